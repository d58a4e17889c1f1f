"""Scrambling, Gray-coded QAM, pilot sequences and the CP-OFDM cross-check path."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FramingError
from .grid import BITS_PER_SYMBOL, FramePlan, SystemConfig

LFSR_DEGREE = 31
LFSR_TAP = 28
_LFSR_MASK = (1 << LFSR_DEGREE) - 1


def lfsr_keystream(seed: int, n_bits: int) -> np.ndarray:
    """Keystream of the Fibonacci LFSR x^31 + x^28 + 1.

    The 31-bit register starts at ``seed`` (bit 0 newest). Each step emits
    ``b = reg[30] ^ reg[27]`` and shifts it in: ``reg = (reg << 1 | b) & mask``.
    Equivalently, output x[n] = x[n-31] ^ x[n-28] with x[-1-i] = seed bit i.
    """
    seed &= _LFSR_MASK
    if seed == 0:
        raise ConfigurationError("LFSR seed must be nonzero in its low 31 bits")
    hist = np.array([(seed >> (LFSR_DEGREE - 1 - j)) & 1 for j in range(LFSR_DEGREE)], dtype=np.uint8)
    x = np.empty(LFSR_DEGREE + n_bits, dtype=np.uint8)
    x[:LFSR_DEGREE] = hist
    n = LFSR_DEGREE
    step = LFSR_TAP
    while n < x.size:
        m = min(step, x.size - n)
        x[n:n + m] = x[n - LFSR_DEGREE:n - LFSR_DEGREE + m] ^ x[n - LFSR_TAP:n - LFSR_TAP + m]
        n += m
    return x[LFSR_DEGREE:]


@lru_cache(maxsize=256)
def _cached_keystream(seed: int, n_bits: int) -> np.ndarray:
    ks = lfsr_keystream(seed, n_bits)
    ks.setflags(write=False)
    return ks


def scramble_bits(bits: np.ndarray, seed: int) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint8)
    return bits ^ _cached_keystream(seed, bits.size)


descramble_bits = scramble_bits


def scrambler_seed(ue: int, slot_id: int, base: int = 0x5A5A) -> int:
    """Per-(UE, slot) register init; restarted every slot."""
    return ((base << 12) ^ (ue << 6) ^ (slot_id + 1)) & _LFSR_MASK or 1


# Per-axis Gray levels: bit groups (b0 b2 b4) drive I, (b1 b3 b5) drive Q.
def _gray_axis(bits_per_axis: int) -> np.ndarray:
    # a = (1-2 b0) * (2^(m-1) - (1-2 b1) * (2^(m-2) - (1-2 b2) * ...))
    n = 1 << bits_per_axis
    levels = np.empty(n)
    for code in range(n):
        b = [(code >> (bits_per_axis - 1 - i)) & 1 for i in range(bits_per_axis)]
        amp = 1.0
        for i in range(bits_per_axis - 1, 0, -1):
            amp = (1 << (bits_per_axis - i)) - (1 - 2 * b[i]) * amp
        levels[code] = (1 - 2 * b[0]) * amp
    return levels


_NORM = {"QPSK": np.sqrt(2.0), "16QAM": np.sqrt(10.0), "64QAM": np.sqrt(42.0)}


@dataclass(frozen=True, eq=False)
class Constellation:
    """Gray-labeled square QAM with unit average power.

    ``points[label]`` is the symbol for the bit label read MSB first.
    """

    order: str
    points: np.ndarray
    axis_levels: np.ndarray

    @property
    def bits_per_symbol(self) -> int:
        return BITS_PER_SYMBOL[self.order]

    def table(self) -> list[tuple[str, complex]]:
        k = self.bits_per_symbol
        return [(format(i, f"0{k}b"), complex(p)) for i, p in enumerate(self.points)]


@lru_cache(maxsize=None)
def constellation(order: str) -> Constellation:
    if order not in BITS_PER_SYMBOL:
        raise ConfigurationError(f"unsupported modulation {order!r}")
    k = BITS_PER_SYMBOL[order]
    m = k // 2
    levels = _gray_axis(m)
    labels = np.arange(1 << k)
    bits = (labels[:, None] >> (k - 1 - np.arange(k))) & 1
    i_code = np.zeros(labels.size, dtype=int)
    q_code = np.zeros(labels.size, dtype=int)
    for j in range(m):
        i_code = (i_code << 1) | bits[:, 2 * j]
        q_code = (q_code << 1) | bits[:, 2 * j + 1]
    points = (levels[i_code] + 1j * levels[q_code]) / _NORM[order]
    points.setflags(write=False)
    return Constellation(order, points, levels / _NORM[order])


def qam_map(bits: np.ndarray, order: str) -> np.ndarray:
    const = constellation(order)
    k = const.bits_per_symbol
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size % k:
        raise FramingError(f"{bits.size} bits not divisible by {k} bits/symbol")
    labels = bits.reshape(-1, k) @ (1 << np.arange(k - 1, -1, -1))
    return const.points[labels]


def _axis_decide(x: np.ndarray, const: Constellation) -> np.ndarray:
    """Per-axis Gray code of the nearest level."""
    levels = const.axis_levels
    order = np.argsort(levels)
    sorted_levels = levels[order]
    mids = (sorted_levels[1:] + sorted_levels[:-1]) / 2
    return order[np.searchsorted(mids, x)]


def qam_demap(symbols: np.ndarray, order: str) -> np.ndarray:
    """Hard nearest-point decision back to bits (MSB-first labels)."""
    const = constellation(order)
    k = const.bits_per_symbol
    m = k // 2
    symbols = np.asarray(symbols).ravel()
    i_code = _axis_decide(symbols.real, const)
    q_code = _axis_decide(symbols.imag, const)
    out = np.empty((symbols.size, k), dtype=np.uint8)
    for j in range(m):
        shift = m - 1 - j
        out[:, 2 * j] = (i_code >> shift) & 1
        out[:, 2 * j + 1] = (q_code >> shift) & 1
    return out.ravel()


@dataclass(frozen=True, eq=False)
class PilotSequence:
    ue: int
    tones: np.ndarray
    symbols: np.ndarray

    @property
    def conjugate(self) -> np.ndarray:
        """Receiver-side copy; LS estimation multiplies by it instead of dividing."""
        return np.conj(self.symbols)


def generate_pilot(ue: int, seed: int, plan: FramePlan) -> PilotSequence:
    """Random QPSK on the UE's pilot tones; the UE index is folded into the seed.

    Swap-in point for other pilot families: anything unit-modulus works.
    """
    if ue not in plan.pilots:
        raise ConfigurationError(f"UE {ue} not in frame plan")
    tones = plan.pilots[ue]
    rng = np.random.default_rng([seed, ue])
    bits = rng.integers(0, 2, 2 * len(tones), dtype=np.uint8)
    return PilotSequence(ue, tones, qam_map(bits, "QPSK"))


def ofdm_modulate(freq_symbols: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """Tones 1..N onto FFT bins 1..N, N_FFT-point IFFT, prepend CP.

    ``freq_symbols`` is ``(..., N)``; returns ``(..., N_FFT + CP)``.
    """
    freq_symbols = np.asarray(freq_symbols)
    if freq_symbols.shape[-1] != cfg.N:
        raise FramingError(f"expected {cfg.N} tones, got {freq_symbols.shape[-1]}")
    bins = np.zeros(freq_symbols.shape[:-1] + (cfg.N_FFT,), dtype=complex)
    bins[..., 1:cfg.N + 1] = freq_symbols
    t = np.fft.ifft(bins, axis=-1) * np.sqrt(cfg.N_FFT)
    return np.concatenate([t[..., -cfg.cp_length:], t], axis=-1)


def ofdm_demodulate(samples: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    samples = np.asarray(samples)
    body = samples[..., cfg.cp_length:cfg.cp_length + cfg.N_FFT]
    bins = np.fft.fft(body, axis=-1) / np.sqrt(cfg.N_FFT)
    return bins[..., 1:cfg.N + 1]


def random_bits(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, 2, n, dtype=np.uint8)


def write_golden_vectors(directory: str | Path, seeds=(0x1234,), n_bits: int = 64) -> list[Path]:
    """Constellation tables and keystream prefixes as CSV for cross-tool checks."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for order in BITS_PER_SYMBOL:
        path = directory / f"constellation_{order}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bits", "re", "im"])
            for label, point in constellation(order).table():
                w.writerow([label, repr(float(point.real)), repr(float(point.imag))])
        paths.append(path)
    for seed in seeds:
        path = directory / f"keystream_{seed:#x}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "bit"])
            for n, b in enumerate(lfsr_keystream(seed, n_bits)):
                w.writerow([n, int(b)])
        paths.append(path)
    return paths
