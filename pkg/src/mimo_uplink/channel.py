"""Multipath channel draws, subcarrier correlation and the frequency-domain link."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ShapeError
from .grid import SystemConfig


@dataclass(frozen=True, eq=False)
class ChannelRealization:
    """Taps ``(R, S, M)`` at ``delays`` and the response ``(R, S, N)`` on tones 1..N.

    ``dft_size`` is the transform length the delays are measured against
    (N_FFT for sampled channels, N for the uniform-delay design model).
    """

    taps: np.ndarray
    delays: np.ndarray
    freq_response: np.ndarray
    dft_size: int

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "s", "m", "re", "im"])
            R, S, M = self.taps.shape
            for r in range(R):
                for s in range(S):
                    for m in range(M):
                        h = self.taps[r, s, m]
                        w.writerow([r, s + 1, m, repr(float(h.real)), repr(float(h.imag))])


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float

    @property
    def sigma2(self) -> float:
        return 10.0 ** (-self.snr_db / 10.0)


def tone_response(taps: np.ndarray, delays: np.ndarray, N: int, dft_size: int) -> np.ndarray:
    """H(k) = sum_m h_m exp(-j 2 pi k tau_m / dft_size) for k = 1..N (last axis of taps)."""
    k = np.arange(1, N + 1)
    delays = np.asarray(delays, dtype=float)
    if delays.ndim == 1:
        steering = np.exp(-2j * np.pi * np.outer(delays, k) / dft_size)
        return taps @ steering
    # per-draw delays (..., M): tone blocks keep memory at (..., M, block)
    block = min(64, N)
    base = np.exp(-2j * np.pi * delays[..., :, None] * np.arange(1, block + 1) / dft_size)
    out = np.empty(taps.shape[:-1] + (N,), dtype=complex)
    for start in range(0, N, block):
        width = min(block, N - start)
        shifted = taps * np.exp(-2j * np.pi * delays * start / dft_size)
        out[..., start:start + width] = (shifted[..., None, :] @ base[..., :width])[..., 0, :]
    return out


def tap_powers(cfg: SystemConfig) -> np.ndarray:
    p = 10.0 ** (np.asarray(cfg.tap_powers_db, dtype=float) / 10.0)
    if cfg.normalize_taps:
        p = p / p.sum()
    return p


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def complex_normal(rng: np.random.Generator, shape, variance: float = 1.0) -> np.ndarray:
    scale = np.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def draw_channel(cfg: SystemConfig, rng_seed=None) -> ChannelRealization:
    """Rayleigh taps for every (antenna, active UE) link on the configured profile."""
    if len(cfg.tap_delays) == 0:
        raise ConfigurationError("empty tap profile")
    rng = _rng(rng_seed)
    powers = tap_powers(cfg)
    taps = complex_normal(rng, (cfg.R, cfg.S_active, len(powers))) * np.sqrt(powers)
    delays = np.asarray(cfg.tap_delays, dtype=float)
    return ChannelRealization(taps, delays, tone_response(taps, delays, cfg.N, cfg.N_FFT), cfg.N_FFT)


def draw_uniform_delay_channel(shape, L: float, N: int, n_paths: int, rng_seed=None) -> ChannelRealization:
    """Channels matching the design model: ``n_paths`` equal-power paths with
    i.i.d. delays uniform on [0, L), measured on an N-point grid.

    ``shape`` is the leading batch shape, e.g. ``(R, S)``.
    """
    rng = _rng(rng_seed)
    shape = tuple(np.atleast_1d(shape))
    taps = complex_normal(rng, shape + (n_paths,), 1.0 / n_paths)
    delays = rng.uniform(0.0, L, shape + (n_paths,))
    return ChannelRealization(taps, delays, tone_response(taps, delays, N, N), N)


def subcarrier_correlation(d, L: float, N: int):
    """Correlation between tones ``d`` apart under delays uniform on [0, L).

    r_0 = 1; otherwise (1 - exp(-j 2 pi L d / N)) / (j 2 pi L d / N).
    Accepts scalars or integer arrays.
    """
    d = np.asarray(d, dtype=float)
    x = 2j * np.pi * L * d / N
    safe = np.where(d == 0, 1.0, x)
    r = np.where(d == 0, 1.0 + 0j, (1.0 - np.exp(-safe)) / safe)
    return r[()] if r.ndim == 0 else r


def timing_ramp(N: int, N_FFT: int, timing_error: int) -> np.ndarray:
    """Per-tone phase of an integer circular sample shift."""
    k = np.arange(1, N + 1)
    return np.exp(-2j * np.pi * k * timing_error / N_FFT)


def apply_channel(tx_grid: np.ndarray, chan: ChannelRealization, noise: NoiseSpec | float | None,
                  timing_error: int = 0, rng_seed=None, n_fft: int | None = None) -> np.ndarray:
    """Frequency-domain MIMO link.

    ``tx_grid`` is ``(S, symbols, N)``; the result is ``(R, symbols, N)`` with
    Y_r(k) = sum_s H_rs(k) X_s(k) exp(-j 2 pi k dt / N_FFT) + N_r(k).
    ``noise`` may be a NoiseSpec, a variance, or None for a noiseless link.
    """
    tx_grid = np.asarray(tx_grid)
    H = chan.freq_response
    if tx_grid.ndim != 3 or tx_grid.shape[0] != H.shape[1] or tx_grid.shape[2] != H.shape[2]:
        raise ShapeError(f"tx grid {tx_grid.shape} incompatible with channel {H.shape}")
    y = np.einsum("rsk,sik->rik", H, tx_grid)
    if timing_error:
        y = y * timing_ramp(H.shape[2], n_fft or chan.dft_size, timing_error)
    sigma2 = noise.sigma2 if isinstance(noise, NoiseSpec) else (noise or 0.0)
    if sigma2 > 0:
        y = y + complex_normal(_rng(rng_seed), y.shape, sigma2)
    return y


def identity_channel(cfg: SystemConfig) -> ChannelRealization:
    """Full-rank flat channel: antenna r hears only UE (r mod S_active) + 1, with unit gain."""
    taps = np.zeros((cfg.R, cfg.S_active, 1), dtype=complex)
    for r in range(cfg.R):
        taps[r, r % cfg.S_active, 0] = 1.0
    delays = np.zeros(1)
    return ChannelRealization(taps, delays, tone_response(taps, delays, cfg.N, cfg.N_FFT), cfg.N_FFT)
