"""The per-slot receiver chain and its transmitter-side counterpart.

Shared by the threaded pipeline and the offline Monte Carlo harness, so both
paths run exactly the same arithmetic on the same slot data.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..detection import assemble_channel_matrices, mmse_detect, zf_detect
from ..errors import ConfigurationError, FramingError, IncompleteSlotError
from ..estimation import (ChannelEstimate, WeightBank, build_full_lmmse_weights, build_weight_bank,
                          full_lmmse, interpolate_ls, ls_estimate, windowed_lmmse, zero_order_hold)
from ..grid import SlotBuffer, SystemConfig, build_frame_plan, build_group_table
from ..modem import descramble_bits, generate_pilot, qam_demap, qam_map, scramble_bits, scrambler_seed

ESTIMATORS = ("ls", "ils", "ils-linear", "3w", "12w", "lmmse", "perfect")
DETECTORS = ("zf", "mmse")
PILOT_SEED = 7
PAYLOAD_SEED = 2024


def reference_bits(cfg: SystemConfig, frame_id: int, slot_id: int, ue: int,
                   payload_seed: int = PAYLOAD_SEED) -> np.ndarray:
    """Unscrambled payload of one UE in one slot (2 data symbols on all N tones)."""
    n = 2 * cfg.N * cfg.bits_per_symbol(ue)
    rng = np.random.default_rng([payload_seed, frame_id, slot_id, ue])
    return rng.integers(0, 2, n, dtype=np.uint8)


def ber_calculate(recovered: np.ndarray, reference: np.ndarray) -> float:
    """Hamming distance over length."""
    recovered = np.asarray(recovered, dtype=np.uint8)
    reference = np.asarray(reference, dtype=np.uint8)
    if recovered.shape != reference.shape:
        raise FramingError(f"length mismatch: {recovered.size} vs {reference.size}")
    if recovered.size == 0:
        raise FramingError("empty bit vectors")
    return np.count_nonzero(recovered ^ reference) / recovered.size


xor_descramble = descramble_bits


@dataclass
class SlotResult:
    frame_id: int
    slot_id: int
    bits: dict[int, np.ndarray] = field(default_factory=dict)
    errors: dict[int, int] = field(default_factory=dict)
    ber: dict[int, float] = field(default_factory=dict)
    # seconds spent in each stage, in chain order
    timings: dict[str, float] = field(default_factory=dict)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def cumulative(self) -> list[float]:
        out, acc = [], 0.0
        for key in ("estimation", "detection", "demap"):
            acc += self.timings.get(key, 0.0)
            out.append(acc)
        out.append(self.timings.get("total", acc))
        return out

    def records(self) -> list[dict]:
        base = {"frame": self.frame_id, "slot": self.slot_id,
                **{f"t_{k}_ms": round(v * 1e3, 6) for k, v in self.timings.items()}}
        if self.error:
            return [{**base, "error": self.error}]
        return [{**base, "ue": ue, "ber": self.ber[ue], "bit_errors": self.errors[ue],
                 "bits": int(self.bits[ue].size)} for ue in sorted(self.ber)]


class ReceiverChain:
    """Channel estimation -> hold -> detection -> demap -> XOR -> BER for one slot.

    Weight banks are built on construction (or passed in) and never mutated,
    so one chain may be shared by every slot worker.
    """

    def __init__(self, cfg: SystemConfig, estimator: str = "12w", detector: str = "mmse",
                 bank: WeightBank | None = None, interp: str = "linear",
                 pilot_seed: int = PILOT_SEED, payload_seed: int = PAYLOAD_SEED):
        if estimator not in ESTIMATORS:
            raise ConfigurationError(f"unknown estimator {estimator!r}")
        if detector not in DETECTORS:
            raise ConfigurationError(f"unknown detector {detector!r}")
        self.cfg = cfg
        self.estimator = estimator
        self.detector = detector
        self.interp = "linear" if estimator == "ils-linear" else interp
        self.payload_seed = payload_seed
        self.plan = build_frame_plan(cfg)
        self.ues = tuple(range(1, cfg.S_active + 1))
        self.pilots = {ue: generate_pilot(ue, pilot_seed, self.plan) for ue in self.ues}
        self.bank = None
        self.tables = {}
        self.full_weights = {}
        if estimator in ("3w", "12w"):
            kind = estimator.upper()
            self.bank = bank if bank is not None else build_weight_bank(kind, cfg)
            if self.bank.kind != kind:
                raise ConfigurationError(f"bank kind {self.bank.kind} does not match estimator {estimator}")
            self.tables = {ue: build_group_table(kind, ue, cfg) for ue in self.ues}
        elif estimator == "lmmse":
            self.full_weights = {ue: build_full_lmmse_weights(cfg, ue) for ue in self.ues}

    # -- stages ---------------------------------------------------------

    def estimate(self, pilot_symbol: np.ndarray) -> dict[int, ChannelEstimate]:
        """Per-UE estimates on the estimator's native tone set."""
        out = {}
        for ue in self.ues:
            ls = ls_estimate(pilot_symbol, self.pilots[ue])
            if self.estimator == "ls":
                out[ue] = ChannelEstimate.from_ls(ls)
            elif self.estimator in ("ils", "ils-linear"):
                out[ue] = interpolate_ls(ls, self.cfg, 3, self.interp)
            elif self.estimator == "lmmse":
                out[ue] = full_lmmse(ls, self.full_weights[ue])
            else:
                out[ue] = windowed_lmmse(ls, self.bank, self.tables[ue])
        return out

    def full_band(self, estimates: dict[int, ChannelEstimate]) -> np.ndarray:
        N = self.cfg.N
        held = []
        for ue in self.ues:
            est = estimates[ue]
            if len(est.tones) != N:
                est = zero_order_hold(est, N)
            held.append(est)
        return assemble_channel_matrices(held, N)

    def detect(self, H: np.ndarray, data: np.ndarray) -> np.ndarray:
        """``H`` (N, R, S), ``data`` (R, 2, N) -> detected symbols (S, 2, N)."""
        Y = np.transpose(data, (2, 0, 1))
        if self.detector == "zf":
            X = zf_detect(H, Y)
        else:
            X = mmse_detect(H, Y, self.cfg.detector_sigma2)
        return np.transpose(X, (1, 2, 0))

    def demap(self, symbols: np.ndarray, slot_id: int) -> dict[int, np.ndarray]:
        out = {}
        for i, ue in enumerate(self.ues):
            raw = qam_demap(symbols[i].ravel(), self.cfg.modulation[ue - 1])
            out[ue] = descramble_bits(raw, scrambler_seed(ue, slot_id))
        return out

    # -- whole slot -----------------------------------------------------

    def process_grid(self, grid: np.ndarray, frame_id: int = 0, slot_id: int = 0,
                     true_H: np.ndarray | None = None) -> SlotResult:
        """Run the chain on an ``(R, 3, N)`` grid. ``true_H`` (N, R, S) bypasses estimation."""
        result = SlotResult(frame_id, slot_id)
        t0 = time.perf_counter()
        try:
            grid = np.asarray(grid, dtype=complex)
            if true_H is None and self.estimator != "perfect":
                H = self.full_band(self.estimate(grid[:, 0, :]))
            elif true_H is not None:
                H = np.asarray(true_H)
            else:
                raise ConfigurationError("perfect-CSI mode needs the true channel")
            t1 = time.perf_counter()
            symbols = self.detect(H, grid[:, 1:3, :])
            t2 = time.perf_counter()
            bits = self.demap(symbols, slot_id)
            for ue in self.ues:
                ref = reference_bits(self.cfg, frame_id, slot_id, ue, self.payload_seed)
                result.bits[ue] = bits[ue]
                result.errors[ue] = int(np.count_nonzero(bits[ue] ^ ref))
                result.ber[ue] = ber_calculate(bits[ue], ref)
            t3 = time.perf_counter()
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            result.error = f"{type(exc).__name__}: {exc}"
            result.timings["total"] = time.perf_counter() - t0
            return result
        result.timings.update(estimation=t1 - t0, detection=t2 - t1, demap=t3 - t2,
                              total=time.perf_counter() - t0)
        return result

    def process_slot(self, buffer: SlotBuffer, frame_id: int, slot_id: int,
                     true_H: np.ndarray | None = None) -> SlotResult:
        if not buffer.ready:
            missing = np.argwhere(~buffer.filled).tolist()
            return SlotResult(frame_id, slot_id, error=f"{IncompleteSlotError.__name__}: missing {missing}")
        return self.process_grid(buffer.view(), frame_id, slot_id, true_H)


def process_slot(buffer: SlotBuffer, chain: ReceiverChain, frame_id: int, slot_id: int) -> SlotResult:
    return chain.process_slot(buffer, frame_id, slot_id)


class SlotSynthesizer:
    """Transmit side: pilots on symbol 0, scrambled QAM payload on symbols 1-2."""

    def __init__(self, cfg: SystemConfig, pilot_seed: int = PILOT_SEED, payload_seed: int = PAYLOAD_SEED):
        self.cfg = cfg
        self.payload_seed = payload_seed
        self.plan = build_frame_plan(cfg)
        self.ues = tuple(range(1, cfg.S_active + 1))
        self.pilots = {ue: generate_pilot(ue, pilot_seed, self.plan) for ue in self.ues}

    def pilot_grid(self) -> np.ndarray:
        """(S_active, N) pilot OFDM symbol; tones of other UEs are zero."""
        x = np.zeros((len(self.ues), self.cfg.N), dtype=complex)
        for i, ue in enumerate(self.ues):
            p = self.pilots[ue]
            x[i, p.tones - 1] = p.symbols
        return x

    def tx_grid(self, frame_id: int, slot_id: int) -> np.ndarray:
        """(S_active, 3, N) frequency-domain slot for every active UE."""
        cfg = self.cfg
        grid = np.zeros((len(self.ues), 3, cfg.N), dtype=complex)
        grid[:, 0, :] = self.pilot_grid()
        for i, ue in enumerate(self.ues):
            raw = reference_bits(cfg, frame_id, slot_id, ue, self.payload_seed)
            bits = scramble_bits(raw, scrambler_seed(ue, slot_id))
            grid[i, 1:3, :] = qam_map(bits, cfg.modulation[ue - 1]).reshape(2, cfg.N)
        return grid
