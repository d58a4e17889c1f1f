import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import crandn
from mimo_uplink.channel import draw_channel, apply_channel
from mimo_uplink.detection import (assemble_channel_matrices, assemble_channel_matrix, cholesky,
                                   cholesky_solve, gram, mmse_detect, mmse_detect_inverse,
                                   symbols_to_csv, zf_detect)
from mimo_uplink.errors import CoverageError, SingularityError
from mimo_uplink.estimation import ChannelEstimate
from mimo_uplink.pipeline.chain import ReceiverChain, SlotSynthesizer, reference_bits


def push_through_mmse(H, Y, sigma2):
    # oracle: H^H (H H^H + s2 I)^-1 Y, equal to the Gram form by the push-through identity
    R = H.shape[-2]
    Hh = np.conj(np.swapaxes(H, -1, -2))
    return Hh @ np.linalg.solve(H @ Hh + sigma2 * np.eye(R), Y)


class TestZeroForcing:
    def test_identity_channel_returns_input(self, rng):
        Y = crandn(rng, 4, 2)
        np.testing.assert_allclose(zf_detect(np.eye(4), Y), Y, atol=1e-14)

    def test_noiseless_exact(self, rng):
        H = crandn(rng, 50, 16, 4)
        X = crandn(rng, 50, 4, 2)
        np.testing.assert_allclose(zf_detect(H, H @ X), X, atol=1e-9)

    def test_matches_pseudo_inverse(self, rng):
        H = crandn(rng, 10, 16, 4)
        Y = crandn(rng, 10, 16, 3)
        np.testing.assert_allclose(zf_detect(H, Y), np.linalg.pinv(H) @ Y, atol=1e-10)

    def test_single_user_is_maximal_ratio(self, rng):
        h = crandn(rng, 16, 1)
        y = crandn(rng, 16)
        expected = np.vdot(h[:, 0], y) / np.vdot(h[:, 0], h[:, 0]).real
        np.testing.assert_allclose(zf_detect(h, y), [expected], atol=1e-12)

    def test_rank_deficient_raises(self, rng):
        h = crandn(rng, 16, 1)
        with pytest.raises(SingularityError):
            zf_detect(np.hstack([h, 2 * h]), crandn(rng, 16))


class TestMmse:
    def test_zero_noise_equals_zf(self, rng):
        H = crandn(rng, 20, 16, 4)
        Y = crandn(rng, 20, 16, 2)
        np.testing.assert_allclose(mmse_detect(H, Y, 0.0), zf_detect(H, Y), atol=1e-10)

    def test_large_noise_shrinks_to_zero(self, rng):
        H = crandn(rng, 16, 4)
        Y = crandn(rng, 16, 2)
        x = mmse_detect(H, Y, 1e6)
        assert np.max(np.abs(x)) < 1e-3 * np.max(np.abs(zf_detect(H, Y)))

    def test_normal_equation_residual(self, rng):
        H = crandn(rng, 30, 16, 4)
        Y = crandn(rng, 30, 16, 2)
        s2 = 0.01
        X = mmse_detect(H, Y, s2)
        Hh = np.conj(np.swapaxes(H, -1, -2))
        resid = gram(H, s2) @ X - Hh @ Y
        assert np.max(np.abs(resid)) < 1e-10

    def test_matches_push_through_oracle(self, rng):
        H = crandn(rng, 30, 16, 4)
        Y = crandn(rng, 30, 16, 2)
        np.testing.assert_allclose(mmse_detect(H, Y, 0.05), push_through_mmse(H, Y, 0.05), atol=1e-10)

    def test_inverse_form_agrees(self, rng):
        H = crandn(rng, 30, 16, 4)
        Y = crandn(rng, 30, 16, 2)
        np.testing.assert_allclose(mmse_detect(H, Y, 1e-3), mmse_detect_inverse(H, Y, 1e-3), atol=1e-8)

    def test_negative_noise_rejected(self, rng):
        with pytest.raises(ValueError):
            mmse_detect(np.eye(4), crandn(rng, 4), -1.0)

    def test_rank_deficient_zero_noise_raises(self):
        H = np.ones((16, 2), dtype=complex)
        with pytest.raises(SingularityError):
            mmse_detect(H, np.ones(16, dtype=complex), 0.0)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), s2=st.floats(1e-6, 10.0))
    def test_property_matches_oracle(self, seed, s2):
        r = np.random.default_rng(seed)
        H = crandn(r, 16, 4)
        Y = crandn(r, 16, 2)
        np.testing.assert_allclose(mmse_detect(H, Y, s2), push_through_mmse(H, Y, s2), atol=1e-8)


class TestCholesky:
    def test_gram_hermitian_positive_pivots(self, rng):
        G = gram(crandn(rng, 16, 4), 0.1)
        np.testing.assert_allclose(G, G.conj().T, atol=0)
        c = cholesky(G)
        assert np.all(np.diag(c).real > 0)
        np.testing.assert_allclose(c @ c.conj().T, G, atol=1e-12)
        np.testing.assert_allclose(c, np.linalg.cholesky(G), atol=1e-12)

    def test_solve(self, rng):
        G = gram(crandn(rng, 8, 16, 4), 0.1)
        b = crandn(rng, 8, 4, 3)
        np.testing.assert_allclose(cholesky_solve(cholesky(G), b), np.linalg.solve(G, b), atol=1e-10)

    def test_not_positive_definite(self):
        with pytest.raises(SingularityError):
            cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))


class TestAssembly:
    def test_matrix_entries(self):
        ests = [ChannelEstimate(s, np.arange(1, 4), np.full((16, 3), 10 * s) + np.arange(16)[:, None] * 1j)
                for s in range(1, 5)]
        H = assemble_channel_matrix(ests, 2)
        assert H.shape == (16, 4)
        assert H[3, 2] == 30 + 3j

    def test_missing_tone(self):
        est = ChannelEstimate(1, np.array([1, 4]), np.ones((16, 2)))
        with pytest.raises(CoverageError):
            assemble_channel_matrix([est], 2)
        with pytest.raises(CoverageError):
            assemble_channel_matrices([est], 4)

    def test_full_band_shape(self, rng):
        ests = {s: ChannelEstimate(s, np.arange(1, 7), crandn(rng, 16, 6)) for s in range(1, 5)}
        H = assemble_channel_matrices(ests, 6)
        assert H.shape == (6, 16, 4)
        np.testing.assert_array_equal(H[4, :, 1], ests[2].values[:, 4])


class TestRoundTrip:
    @pytest.mark.parametrize("detector", ["zf", "mmse"])
    def test_perfect_csi_noiseless(self, cfg, detector):
        synth = SlotSynthesizer(cfg)
        chain = ReceiverChain(cfg, "perfect", detector)
        chan = draw_channel(cfg, 3)
        grid = apply_channel(synth.tx_grid(0, 2), chan, None)
        res = chain.process_grid(grid, 0, 2, true_H=np.transpose(chan.freq_response, (2, 0, 1)))
        assert res.ok, res.error
        for ue in chain.ues:
            np.testing.assert_array_equal(res.bits[ue], reference_bits(cfg, 0, 2, ue))
            assert res.ber[ue] == 0.0

    def test_symbols_csv(self, tmp_path):
        sym = np.zeros((2, 2, 3), dtype=complex)
        sym[1, 0, 2] = 0.5 - 0.25j
        symbols_to_csv(sym, tmp_path / "x.csv")
        rows = list(csv.reader(open(tmp_path / "x.csv")))
        assert rows[0] == ["s", "symbol", "k", "re", "im"]
        assert len(rows) == 1 + 12
        assert rows[1 + 6 + 2] == ["2", "0", "3", "0.5", "-0.25"]
