"""
Monte Carlo experiment driver.

MSE experiments work link by link: one draw is one antenna-UE channel
vector, which is all a per-UE estimator ever sees (pilots of different UEs
sit on disjoint tones). BER experiments run the full slot chain.

Seeds split from the master seed as ``SeedSequence([seed, point, chunk])``,
so every chunk of every sweep point is reproducible on its own and the
per-chunk sums are reduced in chunk order regardless of worker count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .channel import (NoiseSpec, apply_channel, complex_normal, draw_channel,
                      draw_uniform_delay_channel, tap_powers, timing_ramp, tone_response)
from .errors import ConfigurationError
from .estimation import (LsEstimate, WeightBank, bank_stem, build_full_lmmse_weights, build_weight_bank,
                         full_lmmse, import_weight_bank, interpolate_ls, windowed_lmmse)
from .grid import SystemConfig, build_frame_plan, build_group_table
from .modem import generate_pilot
from .pipeline.chain import PILOT_SEED, ReceiverChain, SlotSynthesizer

EXPERIMENT_KINDS = ("mse_vs_snr", "mse_vs_L", "mse_vs_snrfixed", "ber_vs_gain", "ber_vs_L", "timing")
MSE_ESTIMATORS = ("ls", "ils", "3w", "12w", "lmmse")
CHANNELS = ("table3", "uniform")
Z95 = 1.959963984540054


@dataclass(frozen=True)
class ExperimentSpec:
    """One sweep.

    ``trials`` counts link draws per point for MSE kinds and slots per point
    for BER kinds. The ``uniform`` channel is the design model itself:
    ``true_paths`` equal-power paths with delays uniform on [0, ``true_L``).
    """

    kind: str
    estimators: tuple[str, ...] = MSE_ESTIMATORS
    snr_db: tuple[float, ...] = (25.0,)
    L_values: tuple[float, ...] = (8,)
    snr_fixed_db: tuple[float, ...] = (40.0,)
    trials: int = 10_000
    seed: int = 1
    timing_error: int = 0
    channel: str = "table3"
    true_L: float = 7.0
    true_paths: int = 7
    detector: str = "mmse"
    chunk: int = 4000
    workers: int = 1
    cfg: SystemConfig = field(default_factory=SystemConfig)
    output: str | None = None

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigurationError(f"unknown experiment kind {self.kind!r}")
        if self.trials < 1:
            raise ConfigurationError("trials must be at least 1")
        if self.channel not in CHANNELS:
            raise ConfigurationError(f"unknown channel {self.channel!r}")
        if not self.estimators:
            raise ConfigurationError("no estimators")
        for name in ("snr_db", "L_values", "snr_fixed_db"):
            if len(getattr(self, name)) == 0:
                raise ConfigurationError(f"empty sweep {name}")

    @property
    def points(self) -> tuple[float, ...]:
        if self.kind in ("mse_vs_L", "ber_vs_L"):
            return self.L_values
        if self.kind == "mse_vs_snrfixed":
            return self.snr_fixed_db
        return self.snr_db

    def operating(self, point: float) -> tuple[float, float, float]:
        """(simulated SNR, design L, design snr_fixed) at one sweep point."""
        snr, L, fixed = self.snr_db[0], self.cfg.L_assumed, self.cfg.snr_fixed_db
        if self.kind in ("mse_vs_L", "ber_vs_L"):
            L = point
        elif self.kind == "mse_vs_snrfixed":
            fixed = point
        else:
            snr = point
        return snr, L, fixed


@dataclass
class ResultRow:
    point: float
    estimator: str
    value: float
    half_width: float
    n: int
    lo: float = math.nan
    hi: float = math.nan


@dataclass
class ResultTable:
    """Rows of (sweep point, estimator, value, 95% half-width).

    ``x_label`` and ``metric`` carry units, e.g. ``snr_db`` and ``mse_db``.
    """

    kind: str
    x_label: str
    metric: str
    rows: list[ResultRow] = field(default_factory=list)

    def add(self, row: ResultRow) -> None:
        if any(r.point == row.point and r.estimator == row.estimator for r in self.rows):
            raise ValueError(f"duplicate row for ({row.point}, {row.estimator})")
        self.rows.append(row)

    @property
    def estimators(self) -> list[str]:
        return list(dict.fromkeys(r.estimator for r in self.rows))

    @property
    def points(self) -> list[float]:
        return sorted({r.point for r in self.rows})

    def row(self, point: float, estimator: str) -> ResultRow:
        for r in self.rows:
            if r.point == point and r.estimator == estimator:
                return r
        raise KeyError((point, estimator))

    def value(self, point: float, estimator: str) -> float:
        return self.row(point, estimator).value

    def series(self, estimator: str) -> tuple[np.ndarray, np.ndarray]:
        rows = sorted((r for r in self.rows if r.estimator == estimator), key=lambda r: r.point)
        return np.array([r.point for r in rows]), np.array([r.value for r in rows])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"# kind={self.kind}"])
            w.writerow([self.x_label, "estimator", self.metric, "ci95_half_width", "n", "ci95_lo", "ci95_hi"])
            for r in self.rows:
                w.writerow([repr(float(r.point)), r.estimator, repr(float(r.value)), repr(float(r.half_width)),
                            r.n, repr(float(r.lo)), repr(float(r.hi))])

    @classmethod
    def from_csv(cls, path: str | Path) -> "ResultTable":
        with open(path, newline="") as fh:
            lines = list(csv.reader(fh))
        kind = lines[0][0].split("=", 1)[1] if lines and lines[0] and lines[0][0].startswith("#") else ""
        header = lines[1] if kind else lines[0]
        body = lines[2:] if kind else lines[1:]
        table = cls(kind, header[0], header[2])
        for rec in body:
            if rec:
                table.add(ResultRow(float(rec[0]), rec[1], float(rec[2]), float(rec[3]), int(rec[4]),
                                    float(rec[5]), float(rec[6])))
        return table


# -- statistics ------------------------------------------------------------

def wilson_interval(errors: int, n: int, z: float = Z95) -> tuple[float, float]:
    """Wilson score interval of a binomial proportion."""
    if n <= 0:
        raise ValueError("n must be positive")
    p = errors / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if errors == 0 else max(0.0, centre - half)
    hi = 1.0 if errors == n else min(1.0, centre + half)
    return lo, hi


def db(x):
    return 10.0 * np.log10(x)


# -- MSE -------------------------------------------------------------------

class _LinkEstimators:
    """Estimator closures for one (UE, L, snr_fixed) design point, cached across chunks."""

    def __init__(self, cfg: SystemConfig):
        self.cfg = cfg
        self.plan = build_frame_plan(cfg)
        self.pilots = {ue: generate_pilot(ue, PILOT_SEED, self.plan) for ue in range(1, cfg.S_active + 1)}
        self._banks: dict = {}
        self._full: dict = {}
        self._tables = {(kind, ue): build_group_table(kind, ue, cfg)
                        for kind in ("3W", "12W") for ue in self.pilots}

    def bank(self, kind: str, L: float, fixed: float) -> WeightBank:
        key = (kind, L, fixed)
        if key not in self._banks:
            self._banks[key] = build_weight_bank(kind, self.cfg, L, fixed)
        return self._banks[key]

    def full(self, ue: int, L: float, fixed: float) -> np.ndarray:
        key = (ue, L, fixed)
        if key not in self._full:
            self._full[key] = build_full_lmmse_weights(self.cfg, ue, L=L, snr_fixed_db=fixed)
        return self._full[key]

    def run(self, name: str, ls: LsEstimate, L: float, fixed: float):
        if name == "ls":
            return ls.tones, ls.values
        if name == "ils":
            est = interpolate_ls(ls, self.cfg, 3, "linear")
        elif name == "ils-spline":
            est = interpolate_ls(ls, self.cfg, 3, "spline")
        elif name in ("3w", "12w"):
            kind = name.upper()
            est = windowed_lmmse(ls, self.bank(kind, L, fixed), self._tables[(kind, ls.ue)])
        elif name == "lmmse":
            est = full_lmmse(ls, self.full(ls.ue, L, fixed))
        else:
            raise ConfigurationError(f"unknown estimator {name!r}")
        return est.tones, est.values


def draw_links(spec: ExperimentSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """``(n, N)`` true responses of independent links."""
    cfg = spec.cfg
    if spec.channel == "uniform":
        return draw_uniform_delay_channel((n,), spec.true_L, cfg.N, spec.true_paths, rng).freq_response
    taps = complex_normal(rng, (n, len(cfg.tap_delays))) * np.sqrt(tap_powers(cfg))
    return tone_response(taps, np.asarray(cfg.tap_delays, dtype=float), cfg.N, cfg.N_FFT)


def _mse_chunk(spec: ExperimentSpec, ests: _LinkEstimators, point_index: int, chunk_index: int,
               n: int, snr: float, L: float, fixed: float) -> dict[str, tuple[float, float]]:
    """Sum and sum of squares of per-link MSE for every estimator."""
    cfg = spec.cfg
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, point_index, chunk_index]))
    ue = chunk_index % cfg.S_active + 1
    pilot = ests.pilots[ue]
    H = draw_links(spec, n, rng)
    if spec.timing_error:
        H = H * timing_ramp(cfg.N, cfg.N_FFT, spec.timing_error)
    y = H[:, pilot.tones - 1] * pilot.symbols + complex_normal(rng, (n, len(pilot.tones)), NoiseSpec(snr).sigma2)
    ls = LsEstimate(ue, pilot.tones, y * pilot.conjugate)
    out = {}
    for name in spec.estimators:
        tones, values = ests.run(name, ls, L, fixed)
        per_link = np.mean(np.abs(values - H[:, tones - 1]) ** 2, axis=1)
        out[name] = (float(per_link.sum()), float(np.sum(per_link ** 2)))
    return out


def run_mse_experiment(spec: ExperimentSpec, ests: _LinkEstimators | None = None) -> ResultTable:
    """MSE in dB per (point, estimator) with a delta-method 95% half-width in dB."""
    labels = {"mse_vs_snr": "snr_db", "mse_vs_L": "L", "mse_vs_snrfixed": "snr_fixed_db"}
    if spec.kind not in labels:
        raise ConfigurationError(f"{spec.kind} is not an MSE experiment")
    ests = ests or _LinkEstimators(spec.cfg)
    table = ResultTable(spec.kind, labels[spec.kind], "mse_db")
    sizes = [min(spec.chunk, spec.trials - i) for i in range(0, spec.trials, spec.chunk)]
    for pi, point in enumerate(spec.points):
        snr, L, fixed = spec.operating(point)
        jobs = [(spec, ests, pi, ci, n, snr, L, fixed) for ci, n in enumerate(sizes)]
        if spec.workers > 1:
            with ThreadPoolExecutor(spec.workers) as pool:
                parts = list(pool.map(lambda a: _mse_chunk(*a), jobs))
        else:
            parts = [_mse_chunk(*a) for a in jobs]
        for name in spec.estimators:
            s = sum(p[name][0] for p in parts)
            s2 = sum(p[name][1] for p in parts)
            n = spec.trials
            mean = s / n
            var = max(s2 / n - mean * mean, 0.0) * n / max(n - 1, 1)
            half = Z95 * math.sqrt(var / n)
            table.add(ResultRow(float(point), name, float(db(mean)), 10 / math.log(10) * half / mean, n,
                                float(db(max(mean - half, 1e-300))), float(db(mean + half))))
    if spec.output:
        table.to_csv(spec.output)
    return table


# -- BER -------------------------------------------------------------------

def scenario_slots(cfg: SystemConfig, n_slots: int, snr_db: float, seed: int = 1, channel: str = "table3",
                   true_L: float = 7.0, true_paths: int = 7, timing_error: int = 0,
                   point_index: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray, int, int]]:
    """Yield ``(grid (R,3,N), true H (N,R,S), frame, slot)`` for simulated slots."""
    synth = SlotSynthesizer(cfg)
    noise = NoiseSpec(snr_db)
    for i in range(n_slots):
        frame, slot = divmod(i, cfg.slots_per_frame)
        rng = np.random.default_rng(np.random.SeedSequence([seed, point_index, i]))
        if channel == "uniform":
            chan = draw_uniform_delay_channel((cfg.R, cfg.S_active), true_L, cfg.N, true_paths, rng)
        else:
            chan = draw_channel(cfg, rng)
        grid = apply_channel(synth.tx_grid(frame, slot), chan, noise, timing_error, rng, n_fft=cfg.N_FFT)
        H = chan.freq_response
        if timing_error:
            H = H * timing_ramp(cfg.N, cfg.N_FFT, timing_error)
        yield grid, np.transpose(H, (2, 0, 1)), frame, slot


def _ber_rows(table: ResultTable, point: float, counts: dict[str, list[int]]) -> None:
    for name, (errors, bits) in counts.items():
        lo, hi = wilson_interval(errors, bits)
        table.add(ResultRow(float(point), name, errors / bits, (hi - lo) / 2, bits, lo, hi))


def run_ber_experiment(spec: ExperimentSpec, banks: dict | None = None) -> ResultTable:
    """Uncoded hard-decision BER with Wilson 95% intervals.

    Every estimator sees the same slot buffers at each point. ``perfect``
    feeds the true channel to the detector. ``banks`` optionally maps
    ``(kind, L)`` to a preloaded :class:`WeightBank`.
    """
    if spec.kind not in ("ber_vs_gain", "ber_vs_L"):
        raise ConfigurationError(f"{spec.kind} is not a BER experiment")
    cfg = spec.cfg
    table = ResultTable(spec.kind, "L" if spec.kind == "ber_vs_L" else "snr_db", "ber")
    for pi, point in enumerate(spec.points):
        snr, L, fixed = spec.operating(point)
        chains = {}
        for name in spec.estimators:
            bank = None
            if name in ("3w", "12w"):
                bank = (banks or {}).get((name.upper(), L)) or build_weight_bank(name.upper(), cfg, L, fixed)
            est = "ils-linear" if name == "ils" else name
            chains[name] = ReceiverChain(cfg.with_(L_assumed=L, snr_fixed_db=fixed), est, spec.detector, bank=bank)
        counts = {name: [0, 0] for name in spec.estimators}
        for grid, H, frame, slot in scenario_slots(cfg, spec.trials, snr, spec.seed, spec.channel, spec.true_L,
                                                   spec.true_paths, spec.timing_error, pi):
            for name, chain in chains.items():
                res = chain.process_grid(grid, frame, slot, true_H=H if name == "perfect" else None)
                if not res.ok:
                    raise RuntimeError(f"{name} failed on slot ({frame}, {slot}): {res.error}")
                counts[name][0] += sum(res.errors.values())
                counts[name][1] += sum(b.size for b in res.bits.values())
        _ber_rows(table, point, counts)
    if spec.output:
        table.to_csv(spec.output)
    return table


def significantly_lower(table: ResultTable, point: float, better: str, worse: str) -> bool:
    """True when the Wilson intervals of the two estimators do not overlap."""
    return table.row(point, better).hi < table.row(point, worse).lo


# -- L refinement ----------------------------------------------------------

def choose_L(ber_by_L: dict[float, float]) -> float:
    """Walk from the largest L downward keeping the minimum; ties go to the smaller L."""
    best_L, best = None, math.inf
    for L in sorted(ber_by_L, reverse=True):
        if ber_by_L[L] <= best:
            best_L, best = L, ber_by_L[L]
    return best_L


def load_banks(bank_dir: str | Path, kind: str, L_values: Iterable[float]) -> dict:
    return {(kind, L): import_weight_bank(bank_stem(bank_dir, kind, L)) for L in L_values}


def refine_L(scenario_stream: Sequence, bank_dir: str | Path, cfg: SystemConfig | None = None,
             kind: str = "12W", L_values: Iterable[float] = range(1, 16),
             detector: str = "mmse") -> tuple[float, ResultTable]:
    """Pick the design L of a bank family by BER on recorded slots.

    ``scenario_stream`` is a sequence of ``(grid, H, frame, slot)`` as
    yielded by :func:`scenario_slots`. Banks are read from ``bank_dir``;
    a missing file raises :class:`ConfigurationError`.
    """
    cfg = cfg or SystemConfig()
    L_values = sorted(L_values, reverse=True)
    banks = load_banks(bank_dir, kind, L_values)
    slots = list(scenario_stream)
    table = ResultTable("ber_vs_L", "L", "ber")
    ber = {}
    for L in L_values:
        chain = ReceiverChain(cfg, kind.lower(), detector, bank=banks[(kind, L)])
        errors = bits = 0
        for grid, _, frame, slot in slots:
            res = chain.process_grid(grid, frame, slot)
            if not res.ok:
                raise RuntimeError(res.error)
            errors += sum(res.errors.values())
            bits += sum(b.size for b in res.bits.values())
        ber[L] = errors / bits
        _ber_rows(table, L, {kind.lower(): [errors, bits]})
    return choose_L(ber), table


def generate_weights(cfg: SystemConfig, directory: str | Path, L_values: Iterable[float] = range(1, 16),
                     kinds: Sequence[str] = ("3W", "12W"), snr_fixed_db: float | None = None) -> list[Path]:
    from .estimation import export_weight_bank
    paths = []
    for kind in kinds:
        for L in L_values:
            paths.extend(export_weight_bank(build_weight_bank(kind, cfg, L, snr_fixed_db), directory))
    return paths


# -- timing ----------------------------------------------------------------

@dataclass
class TimingRow:
    estimator: str
    estimation_ms: float
    detection_ms: float
    total_ms: float
    duty_cycle: float
    worker_utilization: float = math.nan


def measure_timing(cfg: SystemConfig, estimators: Sequence[str] = ("ls", "3w", "12w"), slots: int = 50,
                   detector: str = "mmse", snr_db: float = 25.0, seed: int = 1, pipeline_frames: int = 0,
                   workers: int = 18, output: str | Path | None = None) -> list[TimingRow]:
    """Per-estimator stage times and duty cycle = mean total slot time / frame_ms.

    With ``pipeline_frames`` > 0 each estimator also runs that many frames
    through the threaded receiver over loopback UDP and reports the observed
    worker utilization.
    """
    grids = [(g, f, s) for g, _, f, s in scenario_slots(cfg, slots, snr_db, seed)]
    rows = []
    for name in estimators:
        chain = ReceiverChain(cfg, "ils-linear" if name == "ils" else name, detector)
        chain.process_grid(*grids[0])  # warm caches
        est_t, det_t, tot_t = [], [], []
        for g, f, s in grids:
            res = chain.process_grid(g, f, s)
            est_t.append(res.timings["estimation"])
            det_t.append(res.timings["detection"])
            tot_t.append(res.timings["total"])
        total_ms = 1e3 * float(np.mean(tot_t))
        row = TimingRow(name, 1e3 * float(np.mean(est_t)), 1e3 * float(np.mean(det_t)), total_ms,
                        total_ms / cfg.frame_ms)
        if pipeline_frames > 0:
            row.worker_utilization = run_loopback(cfg, chain, pipeline_frames, workers=workers)[1]["worker_utilization"]
        rows.append(row)
    if output:
        write_timing_csv(rows, output)
    return rows


def write_timing_csv(rows: Sequence[TimingRow], path) -> None:
    """Write to a path or an open text stream."""
    if hasattr(path, "write"):
        _timing_rows(rows, path)
        return
    with open(path, "w", newline="") as fh:
        _timing_rows(rows, fh)


def _timing_rows(rows: Sequence[TimingRow], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["estimator", "estimation_ms", "detection_ms", "total_ms", "duty_cycle_pct",
                "worker_utilization_pct"])
    for r in rows:
        w.writerow([r.estimator, f"{r.estimation_ms:.4f}", f"{r.detection_ms:.4f}", f"{r.total_ms:.4f}",
                    f"{100 * r.duty_cycle:.2f}", f"{100 * r.worker_utilization:.2f}"])


def run_loopback(cfg: SystemConfig, chain: ReceiverChain, frames: int, workers: int = 18,
                 pace_ms: float | None = None, channel_mode: str = "identity", snr_db: float | None = None,
                 seed: int = 1, pin_cores: bool = False, collect: bool = False, timeout: float = 120.0):
    """Stream ``frames`` frames through the threaded receiver on 127.0.0.1.

    Returns ``(receiver, stats dict, tx report)``.
    """
    from .pipeline.receiver import Receiver
    from .pipeline.tx import TxEmulator
    rx = Receiver(chain, [("127.0.0.1", 0), ("127.0.0.1", 0)], workers=workers, pin_cores=pin_cores,
                  collect=collect).start()
    tx = TxEmulator(cfg, rx.addresses, channel_mode, snr_db=snr_db, seed=seed, pace_ms=pace_ms)
    try:
        report = tx.run(frames)
    finally:
        tx.close()
    rx.wait_idle(expected_slots=frames * cfg.slots_per_frame, timeout=timeout)
    stats = rx.stop()
    out = stats.as_dict()
    out["input_frame_rate"] = frames / report.elapsed_s if report.elapsed_s > 0 else math.inf
    out["slot_times_s"] = stats.slot_times_s
    return rx, out, report


# -- plots -----------------------------------------------------------------

def emit_plots(tables: Sequence[ResultTable], paths: Sequence[str | Path]) -> list[Path]:
    """One SVG per table, log-scale y, one curve per estimator, deterministic bytes."""
    import matplotlib
    matplotlib.use("Agg")
    from matplotlib.figure import Figure

    out = []
    with matplotlib.rc_context({"svg.hashsalt": "mimo-uplink", "svg.fonttype": "path"}):
        for table, path in zip(tables, paths):
            fig = Figure(figsize=(6, 4.5))
            ax = fig.add_subplot()
            is_db = table.metric.endswith("_db")
            for name in table.estimators:
                x, y = table.series(name)
                ax.plot(x, 10 ** (y / 10) if is_db else y, marker="o", label=name)
            ax.set_yscale("log")
            ax.set_xlabel(table.x_label)
            ax.set_ylabel(table.metric[:-3] if is_db else table.metric)
            ax.grid(True, which="both", alpha=0.3)
            if table.estimators:
                ax.legend()
            fig.tight_layout()
            fig.savefig(path, format="svg", metadata={"Date": None})
            out.append(Path(path))
    return out


def check_ordering(table: ResultTable, order: Sequence[str]) -> list[str]:
    """Violations of value(order[0]) <= value(order[1]) <= ... at every point."""
    bad = []
    names = [n for n in order if n in table.estimators]
    for p in table.points:
        vals = [table.value(p, n) for n in names]
        for a, b, va, vb in zip(names, names[1:], vals, vals[1:]):
            if va > vb:
                bad.append(f"{table.x_label}={p}: {a} ({va:.4g}) > {b} ({vb:.4g})")
    return bad


__all__ = ["ExperimentSpec", "ResultTable", "ResultRow", "run_mse_experiment", "run_ber_experiment",
           "refine_L", "choose_L", "measure_timing", "emit_plots", "wilson_interval", "scenario_slots",
           "generate_weights", "run_loopback", "check_ordering", "significantly_lower"]
