import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mimo_uplink.channel import (ChannelRealization, NoiseSpec, apply_channel, draw_channel,
                                 draw_uniform_delay_channel, identity_channel, subcarrier_correlation,
                                 tap_powers, timing_ramp, tone_response)
from mimo_uplink.errors import ConfigurationError, ShapeError
from mimo_uplink.grid import SystemConfig

from conftest import crandn


def mc_correlation(d_values, L, N, draws, seed=0, batch=10_000):
    """Sample E[H(k) H*(k-d)] over draws and tones, one uniform-delay path per draw."""
    rng = np.random.default_rng(seed)
    acc = np.zeros(len(d_values), complex)
    for start in range(0, draws, batch):
        n = min(batch, draws - start)
        H = draw_uniform_delay_channel((n,), L, N, 1, rng).freq_response
        for i, d in enumerate(d_values):
            acc[i] += np.sum(H[:, d:] * np.conj(H[:, :-d])) / (N - d)
    return acc / draws


class TestDrawChannel:
    def test_tap_power_profile(self, cfg):
        rng = np.random.default_rng(3)
        taps = np.concatenate([draw_channel(cfg, rng).taps.reshape(-1, 6) for _ in range(2000)])
        measured = np.mean(np.abs(taps) ** 2, axis=0)
        assert np.allclose(measured, tap_powers(cfg), rtol=0.02)
        # normalization of this profile moves it by < 0.01 dB
        assert np.allclose(measured, 10 ** (np.array(cfg.tap_powers_db) / 10), rtol=0.02)

    def test_single_tap_is_flat(self, cfg):
        c = cfg.with_(tap_delays=(0,), tap_powers_db=(0,))
        H = draw_channel(c, 1).freq_response
        assert np.allclose(np.abs(H), np.abs(H[..., :1]))

    def test_seed_repeatable(self, cfg):
        a, b = draw_channel(cfg, 42), draw_channel(cfg, 42)
        assert np.array_equal(a.taps, b.taps) and np.array_equal(a.freq_response, b.freq_response)
        assert not np.array_equal(a.taps, draw_channel(cfg, 43).taps)

    def test_response_formula(self, cfg):
        ch = draw_channel(cfg, 5)
        k = np.arange(1, cfg.N + 1)
        ref = sum(ch.taps[2, 1, m] * np.exp(-2j * np.pi * k * tau / cfg.N_FFT) for m, tau in enumerate(ch.delays))
        assert np.allclose(ch.freq_response[2, 1], ref, atol=1e-12)

    def test_empty_profile_rejected(self, cfg):
        with pytest.raises(ConfigurationError):
            SystemConfig(tap_delays=(), tap_powers_db=())

    def test_csv(self, toy_cfg, tmp_path):
        ch = draw_channel(toy_cfg, 1)
        ch.to_csv(tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "r,s,m,re,im"
        assert len(lines) == 1 + toy_cfg.R * toy_cfg.S_active * 3
        r, s, m, re, im = lines[1].split(",")
        assert complex(float(re), float(im)) == ch.taps[0, 0, 0]


class TestCorrelation:
    def test_zero_lag(self):
        assert subcarrier_correlation(0, 8, 1200) == 1

    def test_conjugate_symmetry(self):
        d = np.arange(-50, 51)
        assert np.allclose(subcarrier_correlation(-d, 8, 1200), np.conj(subcarrier_correlation(d, 8, 1200)))

    def test_closed_form_value(self):
        x = 2j * np.pi * 8 * 12 / 1200
        assert subcarrier_correlation(12, 8, 1200) == pytest.approx((1 - np.exp(-x)) / x, abs=1e-15)

    def test_monte_carlo(self):
        d = [1, 4, 12, 24]
        mc = mc_correlation(d, 8, 1200, 20_000)
        assert np.max(np.abs(mc - subcarrier_correlation(np.array(d), 8, 1200))) < 0.02

    @given(d=st.integers(-2000, 2000), L=st.floats(1, 30))
    def test_magnitude_bound(self, d, L):
        r = abs(subcarrier_correlation(d, L, 1200))
        if d == 0:
            assert r == 1
        else:
            assert r < 1


class TestApplyChannel:
    def test_identity(self, rng):
        c = SystemConfig(R=1, S=1, S_active=1, N=64, N_FFT=128, modulation="QPSK", tap_delays=(0,),
                         tap_powers_db=(0,))
        x = crandn(rng, 1, 3, 64)
        assert np.array_equal(apply_channel(x, identity_channel(c), None), x)

    def test_timing_error_is_phase_only(self, cfg, rng):
        ch = draw_channel(cfg, 1)
        x = crandn(rng, cfg.S_active, 1, cfg.N)
        y0 = apply_channel(x, ch, 0.0)
        y2 = apply_channel(x, ch, 0.0, timing_error=2)
        assert np.allclose(np.abs(y2), np.abs(y0))
        assert np.allclose(y2, y0 * timing_ramp(cfg.N, cfg.N_FFT, 2))

    def test_measured_snr(self, cfg, rng):
        c = cfg.with_(R=1, S_active=1, modulation="64QAM")
        sig = crandn(rng, 1, 1, c.N)
        sig /= np.sqrt(np.mean(np.abs(sig) ** 2))
        p_sig, p_noise = 0.0, 0.0
        for i in range(10):  # 12000 tones
            ch = draw_channel(c, rng)
            clean = apply_channel(sig, ch, None)
            noisy = apply_channel(sig, ch, NoiseSpec(25.0), rng_seed=rng)
            p_sig += np.sum(np.abs(clean) ** 2)
            p_noise += np.sum(np.abs(noisy - clean) ** 2)
        assert abs(10 * np.log10(p_sig / p_noise) - 25.0) < 0.5

    def test_power_normalization(self, cfg, rng):
        sigma2 = 0.1
        total, n = 0.0, 0
        for _ in range(40):
            ch = draw_channel(cfg, rng)
            x = np.exp(2j * np.pi * rng.random((cfg.S_active, 1, cfg.N)))
            y = apply_channel(x, ch, sigma2, rng_seed=rng)
            total += np.sum(np.abs(y) ** 2)
            n += y.size
        assert total / n == pytest.approx(cfg.S_active + sigma2, rel=0.03)

    def test_linear(self, cfg, rng):
        ch = draw_channel(cfg, 2)
        a, b = crandn(rng, 4, 3, cfg.N), crandn(rng, 4, 3, cfg.N)
        lhs = apply_channel(2 * a - 3j * b, ch, 0.01, rng_seed=9)
        noise = apply_channel(np.zeros_like(a), ch, 0.01, rng_seed=9)
        rhs = 2 * apply_channel(a, ch, None) - 3j * apply_channel(b, ch, None) + noise
        assert np.allclose(lhs, rhs)

    def test_shape_error(self, cfg, rng):
        with pytest.raises(ShapeError):
            apply_channel(crandn(rng, 3, 3, cfg.N), draw_channel(cfg, 1), None)

    def test_noise_spec(self):
        assert NoiseSpec(25.0).sigma2 == pytest.approx(10 ** -2.5)

    def test_uniform_delay_draw(self):
        ch = draw_uniform_delay_channel((3, 2), 7.0, 120, 7, 1)
        assert ch.freq_response.shape == (3, 2, 120) and ch.dft_size == 120
        assert np.all((ch.delays >= 0) & (ch.delays < 7))
        assert isinstance(ch, ChannelRealization)
        assert np.allclose(ch.freq_response, tone_response(ch.taps, ch.delays, 120, 120))
