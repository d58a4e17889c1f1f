"""
Frame, pilot and group layout for the uplink resource grid.

Subcarrier indices are 1-based everywhere in this module (tone 1 is the
first used subcarrier). Only the flat slot layout uses 0-based offsets.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ParseError

BITS_PER_SYMBOL = {"QPSK": 2, "16QAM": 4, "64QAM": 6}

# Pilot windows: (pilots per window, center position of an interior group).
WINDOW_KINDS = {"3W": 3, "12W": 12}


@dataclass(frozen=True)
class SystemConfig:
    """Dimensions and numerology of the uplink system.

    Defaults reproduce the simulation parameter table: 16 antennas, a
    12-slot pilot comb with 4 active 64-QAM users, 1200 of 2048
    subcarriers and a 6-tap exponential-ish profile.
    """

    R: int = 16
    S: int = 12
    S_active: int = 4
    N: int = 1200
    N_FFT: int = 2048
    cp_kind: str = "normal"
    modulation: tuple[str, ...] = ("64QAM", "64QAM", "64QAM", "64QAM")
    frame_ms: float = 10.0
    slots_per_frame: int = 18
    symbols_per_slot: int = 3
    tap_delays: tuple[float, ...] = (0, 1, 2, 3, 4, 5)
    tap_powers_db: tuple[float, ...] = (-2, -8, -10, -12, -15, -18)
    normalize_taps: bool = True
    L_assumed: int = 8
    snr_fixed_db: float = 40.0
    snr_db: float = 25.0
    # None: detector uses the true noise variance implied by snr_db.
    sigma2: float | None = None

    def __post_init__(self):
        if isinstance(self.modulation, str):
            object.__setattr__(self, "modulation", (self.modulation,) * self.S_active)
        else:
            object.__setattr__(self, "modulation", tuple(self.modulation))
        object.__setattr__(self, "tap_delays", tuple(self.tap_delays))
        object.__setattr__(self, "tap_powers_db", tuple(self.tap_powers_db))
        self.validate()

    def validate(self) -> None:
        if not (self.R >= self.S_active >= 1):
            raise ConfigurationError(f"need R >= S_active >= 1, got R={self.R}, S_active={self.S_active}")
        if self.S_active > self.S:
            raise ConfigurationError(f"S_active={self.S_active} exceeds S={self.S}")
        if not (1 <= self.N <= self.N_FFT):
            raise ConfigurationError(f"need 1 <= N <= N_FFT, got N={self.N}, N_FFT={self.N_FFT}")
        if self.cp_kind not in ("normal", "extended"):
            raise ConfigurationError(f"unknown cp_kind {self.cp_kind!r}")
        if len(self.modulation) != self.S_active:
            raise ConfigurationError("one modulation per active UE required")
        for mod in self.modulation:
            if mod not in BITS_PER_SYMBOL:
                raise ConfigurationError(f"unsupported modulation {mod!r}")
        if len(self.tap_delays) == 0 or len(self.tap_delays) != len(self.tap_powers_db):
            raise ConfigurationError("tap_delays and tap_powers_db must be nonempty and equal length")
        if any(b <= a for a, b in zip(self.tap_delays, self.tap_delays[1:])):
            raise ConfigurationError("tap_delays must be strictly increasing")
        if self.tap_delays[0] < 0 or self.tap_delays[-1] >= self.cp_length:
            raise ConfigurationError(f"tap delays must lie in [0, CP={self.cp_length})")
        if self.L_assumed < 1:
            raise ConfigurationError("L_assumed must be >= 1")
        if self.slots_per_frame < 1 or self.symbols_per_slot != 3:
            raise ConfigurationError("slots_per_frame >= 1 and exactly 3 processed symbols per slot")
        if self.sigma2 is not None and self.sigma2 < 0:
            raise ConfigurationError("sigma2 must be nonnegative")

    @property
    def cp_length(self) -> int:
        if self.cp_kind == "normal":
            return self.N_FFT * 144 // 2048
        return self.N_FFT // 4

    @property
    def K(self) -> int:
        return math.ceil(self.N / self.S)

    @property
    def noise_variance(self) -> float:
        return 10.0 ** (-self.snr_db / 10.0)

    @property
    def detector_sigma2(self) -> float:
        return self.noise_variance if self.sigma2 is None else self.sigma2

    def bits_per_symbol(self, ue: int) -> int:
        return BITS_PER_SYMBOL[self.modulation[ue - 1]]

    def with_(self, **changes) -> "SystemConfig":
        if "S_active" in changes and "modulation" not in changes:
            changes["modulation"] = (self.modulation[0],) * changes["S_active"]
        return replace(self, **changes)


_LIST_KEYS = {"modulation", "tap_delays", "tap_powers_db"}


def load_config(path: str | Path) -> SystemConfig:
    """Read a ``key = value`` config file (one parameter per line, ``#`` comments)."""
    types = {f.name: f.type for f in fields(SystemConfig)}
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", lineno, 1)
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in types:
            raise ParseError(f"unknown key {key!r}", lineno, 1)
        eq = raw.index("=")
        col = eq + 2 + (len(raw[eq + 1:]) - len(raw[eq + 1:].lstrip()))  # 1-based start of the value
        try:
            values[key] = _parse_value(key, value)
        except ValueError as exc:
            raise ParseError(str(exc), lineno, col) from None
    return SystemConfig(**values)


def _parse_value(key: str, value: str):
    if key in _LIST_KEYS:
        items = [v.strip() for v in value.split(",") if v.strip()]
        if key == "modulation":
            return tuple(items)
        return tuple(float(v) for v in items)
    if key == "cp_kind":
        return value
    if key == "normalize_taps":
        if value.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"bad boolean {value!r}")
        return value.lower() in ("true", "1")
    if key == "sigma2":
        return None if value.lower() in ("none", "") else float(value)
    if key in ("frame_ms", "snr_fixed_db", "snr_db"):
        return float(value)
    return int(value)


def dump_config(cfg: SystemConfig, path: str | Path) -> None:
    lines = []
    for f in fields(SystemConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def pilot_tones(ue: int, cfg: SystemConfig) -> np.ndarray:
    """Pilot subcarriers owned by ``ue``: ue, ue+S, ue+2S, ... up to N."""
    if not 1 <= ue <= cfg.S:
        raise ConfigurationError(f"UE index {ue} outside 1..{cfg.S}")
    return np.arange(ue, cfg.N + 1, cfg.S)


@dataclass(frozen=True)
class SlotPlan:
    slot_id: int
    subframe: int
    roles: tuple[str, ...] = ("pilot", "data", "data")


@dataclass(frozen=True)
class FramePlan:
    slots: tuple[SlotPlan, ...]
    pilots: dict[int, np.ndarray]
    data_tones: np.ndarray
    sync_subframe: int = 1

    def pilot_owner(self, tone: int) -> int | None:
        for ue, tones in self.pilots.items():
            if tone in tones:
                return ue
        return None


def build_frame_plan(cfg: SystemConfig) -> FramePlan:
    """Slot layout of one frame; subframe 1 is sync-only and never processed."""
    slots = tuple(SlotPlan(slot_id=j, subframe=2 + j // 2) for j in range(cfg.slots_per_frame))
    pilots = {ue: pilot_tones(ue, cfg) for ue in range(1, cfg.S + 1)}
    return FramePlan(slots=slots, pilots=pilots, data_tones=np.arange(1, cfg.N + 1))


@dataclass(frozen=True)
class Group:
    index: int
    outputs: tuple[int, ...]
    inputs: tuple[int, ...]
    weight_id: int


@dataclass(frozen=True, eq=False)
class GroupTable:
    """Windowed-LMMSE grouping for one UE.

    ``outputs`` holds the nominal output tones of every group (G rows); tones
    past N are dropped from :attr:`groups` and :attr:`output_tones`.
    ``input_index`` holds 0-based positions into the UE's LS vector.
    """

    kind: str
    ue: int
    N: int
    outputs: np.ndarray
    inputs: np.ndarray
    input_index: np.ndarray
    weight_ids: np.ndarray

    @property
    def G(self) -> int:
        return len(self.weight_ids)

    @property
    def n_weights(self) -> int:
        return int(self.weight_ids.max())

    @cached_property
    def output_mask(self) -> np.ndarray:
        return self.outputs <= self.N

    @cached_property
    def output_tones(self) -> np.ndarray:
        return self.outputs[self.output_mask]

    @property
    def groups(self) -> list[Group]:
        out = []
        for g in range(self.G):
            tones = self.outputs[g][self.output_mask[g]]
            out.append(Group(g + 1, tuple(int(t) for t in tones),
                             tuple(int(t) for t in self.inputs[g]), int(self.weight_ids[g])))
        return out

    def representative(self, weight_id: int) -> int:
        """0-based index of the first group using ``weight_id``."""
        return int(np.flatnonzero(self.weight_ids == weight_id)[0])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "weight_id", "outputs", "inputs"])
            for g in self.groups:
                w.writerow([g.index, g.weight_id, " ".join(map(str, g.outputs)),
                            " ".join(map(str, g.inputs))])


def build_group_table(kind: str, ue: int, cfg: SystemConfig) -> GroupTable:
    """Group layout of the 3W or 12W windowed estimator for one UE.

    Every group owns one pilot ``p_g``. A window of ``n`` consecutive pilots
    (3 or 12, fewer if the UE has fewer) slides so that the group's pilot
    sits at position ``(n-1)//2``, clamped at both band edges; the weight id
    is the group's position inside its window plus one.

    3W outputs are ``p_g + {0, S/3, 2S/3}``. 12W outputs are the S
    consecutive tones of the comb period containing ``p_g``, identical for
    every UE, so the outputs of all groups tile 1..N.
    """
    if kind not in WINDOW_KINDS:
        raise ConfigurationError(f"unknown group kind {kind!r}")
    pilots = pilot_tones(ue, cfg)
    K = len(pilots)
    if K == 0:
        raise ConfigurationError(f"UE {ue} has no pilot tones")
    if cfg.N % cfg.S:
        raise ConfigurationError("windowed tables need N divisible by S")
    n = min(WINDOW_KINDS[kind], K)
    center = (n - 1) // 2
    g = np.arange(K)
    start = np.clip(g - center, 0, K - n)
    input_index = start[:, None] + np.arange(n)[None, :]
    weight_ids = g - start + 1
    if kind == "3W":
        if cfg.S % 3:
            raise ConfigurationError("3W grouping needs S divisible by 3")
        outputs = pilots[:, None] + (cfg.S // 3) * np.arange(3)[None, :]
    else:
        outputs = (g * cfg.S + 1)[:, None] + np.arange(cfg.S)[None, :]
    return GroupTable(kind=kind, ue=ue, N=cfg.N, outputs=outputs, inputs=pilots[input_index],
                      input_index=input_index, weight_ids=weight_ids)


def slot_length(cfg: SystemConfig) -> int:
    return cfg.R * cfg.symbols_per_slot * cfg.N


def slot_index(antenna: int, symbol: int, subcarrier: int, cfg: SystemConfig) -> int:
    """Flat 0-based offset; antenna-major, then symbol, then subcarrier (0-based)."""
    if not (0 <= antenna < cfg.R and 0 <= symbol < cfg.symbols_per_slot and 0 <= subcarrier < cfg.N):
        raise IndexError(f"slot position ({antenna}, {symbol}, {subcarrier}) out of range")
    return (antenna * cfg.symbols_per_slot + symbol) * cfg.N + subcarrier


def slot_position(offset: int, cfg: SystemConfig) -> tuple[int, int, int]:
    if not 0 <= offset < slot_length(cfg):
        raise IndexError(f"offset {offset} out of range")
    rest, k = divmod(offset, cfg.N)
    a, sym = divmod(rest, cfg.symbols_per_slot)
    return a, sym, k


@dataclass
class SlotBuffer:
    """Flat complex64 storage for one slot plus a per-(antenna, symbol) fill map."""

    cfg: SystemConfig
    data: np.ndarray = field(default=None)
    filled: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.data is None:
            self.data = np.zeros(slot_length(self.cfg), dtype=np.complex64)
        if self.filled is None:
            self.filled = np.zeros((self.cfg.R, self.cfg.symbols_per_slot), dtype=bool)

    @property
    def ready(self) -> bool:
        return bool(self.filled.all())

    def view(self) -> np.ndarray:
        """(R, symbols, N) view of the flat storage."""
        return self.data.reshape(self.cfg.R, self.cfg.symbols_per_slot, self.cfg.N)

    def write(self, antenna: int, symbol: int, samples: np.ndarray) -> None:
        start = slot_index(antenna, symbol, 0, self.cfg)
        self.data[start:start + self.cfg.N] = samples
        self.filled[antenna, symbol] = True

    @classmethod
    def from_grid(cls, grid: np.ndarray, cfg: SystemConfig) -> "SlotBuffer":
        """Wrap an (R, 3, N) grid, quantizing to the wire precision."""
        grid = np.asarray(grid)
        if grid.shape != (cfg.R, cfg.symbols_per_slot, cfg.N):
            raise IndexError(f"grid shape {grid.shape} does not match config")
        buf = cls(cfg)
        buf.data[:] = grid.astype(np.complex64).ravel()
        buf.filled[:] = True
        return buf


def group_tables(kind: str, cfg: SystemConfig, ues: Iterable[int] | None = None) -> dict[int, GroupTable]:
    ues = range(1, cfg.S_active + 1) if ues is None else ues
    return {ue: build_group_table(kind, ue, cfg) for ue in ues}


def upsampled_tones(ue: int, cfg: SystemConfig, factor: int = 3) -> np.ndarray:
    """The 3-fold upsampled tone set of a UE (identical to the 3W outputs)."""
    pilots = pilot_tones(ue, cfg)
    step = cfg.S // factor
    tones = (pilots[:, None] + step * np.arange(factor)[None, :]).ravel()
    return tones[tones <= cfg.N]


def active_ues(cfg: SystemConfig) -> Sequence[int]:
    return range(1, cfg.S_active + 1)
