import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimo_uplink.channel import apply_channel, draw_channel, timing_ramp
from mimo_uplink.errors import ConfigurationError, FramingError
from mimo_uplink.grid import SystemConfig, build_frame_plan
from mimo_uplink.modem import (constellation, descramble_bits, generate_pilot, lfsr_keystream, ofdm_demodulate,
                               ofdm_modulate, qam_demap, qam_map, scramble_bits, write_golden_vectors)

# first 64 keystream bits for seed 0x1234, frozen from the bit-serial register below
GOLDEN_KEYSTREAM_0x1234 = np.array([
    0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 1, 0, 1, 0, 0, 0,
    0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 1, 0, 0, 1, 1, 1, 1, 1, 0, 0, 1, 1, 0, 1, 0, 0, 0, 0], np.uint8)

S2 = 1 / np.sqrt(2)
GOLDEN_PILOT_UE1_SEED7 = np.array([-S2 + S2 * 1j, -S2 - S2 * 1j, S2 - S2 * 1j, S2 - S2 * 1j])


def serial_lfsr(seed, n):
    """x^31 + x^28 + 1, one bit per step on a Python int register."""
    reg = seed & (2 ** 31 - 1)
    out = []
    for _ in range(n):
        b = ((reg >> 30) ^ (reg >> 27)) & 1
        out.append(b)
        reg = ((reg << 1) | b) & (2 ** 31 - 1)
    return np.array(out, np.uint8)


class TestScrambler:
    def test_matches_serial_register(self):
        for seed in (1, 0x1234, 0x5A5A5A5, 2 ** 31 - 1):
            assert np.array_equal(lfsr_keystream(seed, 500), serial_lfsr(seed, 500))

    def test_golden(self):
        ks = lfsr_keystream(0x1234, 64)
        assert np.array_equal(ks[:8], np.zeros(8, np.uint8))
        assert np.array_equal(ks, GOLDEN_KEYSTREAM_0x1234)

    def test_involution(self, rng):
        bits = rng.integers(0, 2, 10_000, dtype=np.uint8)
        assert np.array_equal(descramble_bits(scramble_bits(bits, 77), 77), bits)

    def test_zero_input_gives_keystream(self):
        assert np.array_equal(scramble_bits(np.zeros(300, np.uint8), 99), lfsr_keystream(99, 300))

    def test_zero_seed_rejected(self):
        with pytest.raises(ConfigurationError):
            lfsr_keystream(0, 10)

    @settings(max_examples=30)
    @given(seed=st.integers(1, 2 ** 31 - 1), n=st.integers(0, 200))
    def test_recurrence(self, seed, n):
        x = lfsr_keystream(seed, n + 40)
        assert np.array_equal(x[31:], x[:-31] ^ x[3:-28])


class TestConstellation:
    def test_qpsk_table(self):
        assert qam_map(np.array([0, 0], np.uint8), "QPSK")[0] == pytest.approx(0.7071067811865476 + 0.7071067811865476j)
        expected = {"00": (1 + 1j), "01": (1 - 1j), "10": (-1 + 1j), "11": (-1 - 1j)}
        for label, point in constellation("QPSK").table():
            assert point == pytest.approx(expected[label] / np.sqrt(2))

    @pytest.mark.parametrize("order,norm", [("QPSK", 2), ("16QAM", 10), ("64QAM", 42)])
    def test_unit_power(self, order, norm):
        pts = constellation(order).points
        assert abs(np.mean(np.abs(pts) ** 2) - 1) < 1e-12
        assert np.allclose(sorted(set(np.round(pts.real * np.sqrt(norm), 9))),
                           np.arange(-np.sqrt(len(pts)) + 1, np.sqrt(len(pts)), 2))

    @pytest.mark.parametrize("order", ["QPSK", "16QAM", "64QAM"])
    def test_gray_neighbours(self, order):
        table = constellation(order).table()
        lab = {(round(p.real, 9), round(p.imag, 9)): l for l, p in table}
        levels = sorted({k[0] for k in lab})
        for (re, im), l in lab.items():
            i = levels.index(re)
            if i + 1 < len(levels):
                other = lab[(levels[i + 1], im)]
                assert sum(a != b for a, b in zip(l, other)) == 1
            j = levels.index(im)
            if j + 1 < len(levels):
                other = lab[(re, levels[j + 1])]
                assert sum(a != b for a, b in zip(l, other)) == 1

    @pytest.mark.parametrize("order", ["QPSK", "16QAM", "64QAM"])
    def test_round_trip(self, order, rng):
        bits = rng.integers(0, 2, 100_002 - 100_002 % (6 if order == "64QAM" else 4), dtype=np.uint8)
        assert np.array_equal(qam_demap(qam_map(bits, order), order), bits)

    @pytest.mark.parametrize("order", ["QPSK", "16QAM", "64QAM"])
    def test_demap_idempotent_on_points(self, order):
        pts = constellation(order).points
        assert np.allclose(qam_map(qam_demap(pts, order), order), pts)

    def test_16qam_labels(self):
        # I bits (b0 b2), Q bits (b1 b3); 00 -> +1, 01 -> +3, 11 -> -3, 10 -> -1 per axis
        assert qam_map(np.array([0, 0, 0, 0], np.uint8), "16QAM")[0] == pytest.approx((1 + 1j) / np.sqrt(10))
        assert qam_map(np.array([0, 0, 1, 0], np.uint8), "16QAM")[0] == pytest.approx((3 + 1j) / np.sqrt(10))
        assert qam_map(np.array([1, 1, 1, 1], np.uint8), "16QAM")[0] == pytest.approx((-3 - 3j) / np.sqrt(10))

    def test_framing_error(self):
        with pytest.raises(FramingError):
            qam_map(np.zeros(7, np.uint8), "64QAM")

    def test_noisy_demap_nearest(self, rng):
        pts = constellation("16QAM").points
        x = rng.choice(pts, 2000)
        y = x + 0.05 * (rng.standard_normal(2000) + 1j * rng.standard_normal(2000))
        got = qam_map(qam_demap(y, "16QAM"), "16QAM")
        nearest = pts[np.argmin(np.abs(y[:, None] - pts[None, :]), axis=1)]
        assert np.allclose(got, nearest)

    def test_golden_files(self, tmp_path):
        paths = write_golden_vectors(tmp_path)
        assert {p.name for p in paths} == {"constellation_QPSK.csv", "constellation_16QAM.csv",
                                          "constellation_64QAM.csv", "keystream_0x1234.csv"}
        rows = (tmp_path / "keystream_0x1234.csv").read_text().splitlines()[1:]
        assert [int(r.split(",")[1]) for r in rows] == GOLDEN_KEYSTREAM_0x1234.tolist()


class TestPilots:
    def test_unit_modulus_and_conjugate(self, cfg):
        p = generate_pilot(2, 7, build_frame_plan(cfg))
        assert np.allclose(p.symbols * p.conjugate, 1)
        assert np.array_equal(p.tones, np.arange(2, 1201, 12))

    def test_ues_differ(self, cfg):
        plan = build_frame_plan(cfg)
        assert not np.array_equal(generate_pilot(1, 7, plan).symbols, generate_pilot(2, 7, plan).symbols)

    def test_golden(self, cfg):
        p = generate_pilot(1, 7, build_frame_plan(cfg))
        assert np.allclose(p.symbols[:4], GOLDEN_PILOT_UE1_SEED7, atol=1e-15)

    def test_unknown_ue(self, cfg):
        with pytest.raises(ConfigurationError):
            generate_pilot(13, 7, build_frame_plan(cfg))


class TestOfdm:
    def test_round_trip(self, cfg, rng):
        x = qam_map(rng.integers(0, 2, 6 * cfg.N * 3, dtype=np.uint8), "64QAM").reshape(3, cfg.N)
        t = ofdm_modulate(x, cfg)
        assert t.shape == (3, cfg.N_FFT + cfg.cp_length)
        assert np.max(np.abs(ofdm_demodulate(t, cfg) - x)) < 1e-9

    def test_time_domain_channel_matches_frequency_model(self, cfg, rng):
        c = cfg.with_(R=2, S_active=1, modulation="64QAM")
        ch = draw_channel(c, 11)
        x = qam_map(rng.integers(0, 2, 6 * c.N, dtype=np.uint8), "64QAM").reshape(1, 1, c.N)
        t = ofdm_modulate(x[0, 0], c)
        h = np.zeros((c.R, int(max(c.tap_delays)) + 1), complex)
        for m, tau in enumerate(c.tap_delays):
            h[:, int(tau)] = ch.taps[:, 0, m]
        rx_time = np.array([np.convolve(t, h[r])[:t.size] for r in range(c.R)])
        freq = apply_channel(x, ch, None)[:, 0, :]
        assert np.max(np.abs(ofdm_demodulate(rx_time, c) - freq)) < 1e-6

    def test_circular_shift_is_phase_ramp(self, cfg, rng):
        x = qam_map(rng.integers(0, 2, 6 * cfg.N, dtype=np.uint8), "64QAM")
        t = ofdm_modulate(x, cfg)
        delayed = np.concatenate([np.zeros(2), t[:-2]])
        assert np.allclose(ofdm_demodulate(delayed, cfg), x * timing_ramp(cfg.N, cfg.N_FFT, 2), atol=1e-9)

    def test_wrong_length(self, cfg):
        with pytest.raises(FramingError):
            ofdm_modulate(np.zeros(10), cfg)

    def test_extended_cp(self):
        c = SystemConfig(cp_kind="extended")
        assert c.cp_length == 512
        x = np.ones(c.N)
        assert ofdm_modulate(x, c).size == 2048 + 512
