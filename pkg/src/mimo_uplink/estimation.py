"""
Channel estimators: LS, interpolated LS, full-band LMMSE and the windowed
3W/12W LMMSE built from precomputed weight banks.

All correlation matrices come from the closed-form uniform-delay model
(:func:`mimo_uplink.channel.subcarrier_correlation`), so a weight matrix
depends only on tone differences, the assumed path count ``L`` and the
design SNR. Weight banks are built once and shared read-only.
"""

from __future__ import annotations

import csv

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .channel import subcarrier_correlation
from .errors import (ConfigurationError, IncompleteSlotError, InterpolationError,
                     ParseError, SingularityError)
from .grid import GroupTable, SystemConfig, build_group_table, pilot_tones, upsampled_tones
from .modem import PilotSequence

CONDITION_WARN = 1e12


@dataclass(frozen=True, eq=False)
class LsEstimate:
    """Per-antenna LS values ``(R, K)`` on the pilot tones of one UE."""

    ue: int
    tones: np.ndarray
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class ChannelEstimate:
    """Per-antenna estimates ``(R, n)`` on an ascending tone set."""

    ue: int
    tones: np.ndarray
    values: np.ndarray

    @classmethod
    def from_ls(cls, est: LsEstimate) -> "ChannelEstimate":
        return cls(est.ue, est.tones, est.values)

    def to_csv(self, path: str | Path) -> None:
        """Rows (r, s, k, re, im); r is 0-based, s and k 1-based."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "s", "k", "re", "im"])
            for r, row in enumerate(np.atleast_2d(self.values)):
                for k, h in zip(self.tones, row):
                    w.writerow([r, self.ue, int(k), repr(float(h.real)), repr(float(h.imag))])


def ls_estimate(rx_pilot_symbol: np.ndarray, pilot: PilotSequence,
                filled: np.ndarray | None = None) -> LsEstimate:
    """Y_r(k) * conj(X_s(k)) on every pilot tone (pilots are unit modulus).

    ``rx_pilot_symbol`` is the ``(R, N)`` pilot OFDM symbol; ``filled``
    optionally flags which antennas actually delivered it.
    """
    if filled is not None and not np.all(filled):
        missing = np.flatnonzero(~np.asarray(filled))
        raise IncompleteSlotError(f"pilot symbol missing for antennas {missing.tolist()}")
    y = np.asarray(rx_pilot_symbol)[:, pilot.tones - 1]
    return LsEstimate(pilot.ue, pilot.tones, y * pilot.conjugate)


def _linear_extrap(x: np.ndarray, xp: np.ndarray, fp: np.ndarray) -> np.ndarray:
    """Piecewise-linear interpolation along the last axis, extended linearly past both ends."""
    idx = np.clip(np.searchsorted(xp, x, side="right") - 1, 0, len(xp) - 2)
    x0, x1 = xp[idx], xp[idx + 1]
    t = (x - x0) / (x1 - x0)
    return fp[..., idx] * (1 - t) + fp[..., idx + 1] * t


def interpolate_ls(est: LsEstimate, cfg: SystemConfig, factor: int = 3,
                   method: str = "linear") -> ChannelEstimate:
    """Upsample an LS estimate onto the 3-fold tone set of its UE.

    ``spline`` is a not-a-knot cubic spline; ``linear`` joins neighbours.
    Both extrapolate past the last pilot.
    """
    K = len(est.tones)
    if method == "linear":
        if K < 2:
            raise InterpolationError("linear interpolation needs at least 2 pilots")
    elif method == "spline":
        if K < 4:
            raise InterpolationError("spline interpolation needs at least 4 pilots")
    else:
        raise ConfigurationError(f"unknown interpolation method {method!r}")
    tones = upsampled_tones(est.ue, cfg, factor)
    x = est.tones.astype(float)
    if method == "linear":
        values = _linear_extrap(tones.astype(float), x, est.values)
    else:
        values = CubicSpline(x, est.values, axis=-1, bc_type="not-a-knot", extrapolate=True)(tones)
    return ChannelEstimate(est.ue, tones, values)


def small_inverse(a: np.ndarray, warn_condition: float = CONDITION_WARN) -> np.ndarray:
    """Inverse by Gauss-Jordan elimination with partial pivoting.

    Meant for the 3x3 and 12x12 regularized correlation matrices; warns when
    the 1-norm condition estimate exceeds ``warn_condition``.
    """
    a = np.array(a, dtype=complex)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("square matrix required")
    aug = np.concatenate([a, np.eye(n, dtype=complex)], axis=1)
    scale = np.abs(a).max() or 1.0
    for col in range(n):
        pivot = col + int(np.argmax(np.abs(aug[col:, col])))
        if abs(aug[pivot, col]) <= 1e-14 * scale:
            raise SingularityError(f"matrix is singular at column {col}")
        if pivot != col:
            aug[[col, pivot]] = aug[[pivot, col]]
        aug[col] /= aug[col, col]
        others = np.arange(n) != col
        aug[others] -= np.outer(aug[others, col], aug[col])
    inv = aug[:, n:]
    cond = np.abs(a).sum(axis=0).max() * np.abs(inv).sum(axis=0).max()
    if cond > warn_condition:
        warnings.warn(f"ill-conditioned correlation matrix (cond ~ {cond:.2e})", RuntimeWarning)
    return inv


def small_solve(a: np.ndarray, b: np.ndarray, warn_condition: float = CONDITION_WARN) -> np.ndarray:
    """Solve ``a x = b`` by Gaussian elimination with partial pivoting.

    Forward elimination on ``[a | b]`` then back substitution; never forms
    the inverse, which keeps the 12x12 banks an order of magnitude closer
    to exact than ``inverse @ b`` at high design SNR.
    """
    a = np.array(a, dtype=complex)
    b = np.array(b, dtype=complex)
    vec = b.ndim == 1
    if vec:
        b = b[:, None]
    n = a.shape[0]
    if a.shape != (n, n) or b.shape[0] != n:
        raise ValueError("square matrix and matching right-hand side required")
    norm1 = np.abs(a).sum(axis=0).max()
    aug = np.concatenate([a, b], axis=1)
    scale = np.abs(a).max() or 1.0
    for col in range(n):
        pivot = col + int(np.argmax(np.abs(aug[col:, col])))
        if abs(aug[pivot, col]) <= 1e-14 * scale:
            raise SingularityError(f"matrix is singular at column {col}")
        if pivot != col:
            aug[[col, pivot]] = aug[[pivot, col]]
        below = aug[col + 1:, col] / aug[col, col]
        aug[col + 1:, col:] -= np.outer(below, aug[col, col:])
    x = np.zeros_like(b)
    for i in range(n - 1, -1, -1):
        x[i] = (aug[i, n:] - aug[i, i + 1:n] @ x[i + 1:]) / aug[i, i]
    # cheap condition proxy: 1-norm over the smallest pivot
    u_diag = np.abs(np.diag(aug[:, :n]))
    if norm1 / u_diag.min() > warn_condition:
        warnings.warn(f"ill-conditioned correlation matrix (cond ~ {norm1 / u_diag.min():.2e})", RuntimeWarning)
    return x[:, 0] if vec else x


def correlation_block(rows: np.ndarray, cols: np.ndarray, L: float, N: int) -> np.ndarray:
    """Matrix of r_{row - col} for two tone lists."""
    d = np.asarray(rows)[:, None] - np.asarray(cols)[None, :]
    return subcarrier_correlation(d, L, N)


def snr_ratio(snr_fixed_db: float) -> float:
    """sigma^2 / sigma_s^2 for unit pilot power."""
    return 10.0 ** (-snr_fixed_db / 10.0)


def build_full_lmmse_weights(cfg: SystemConfig, ue: int = 1, out_tones=None, in_tones=None,
                             L: float | None = None, snr_fixed_db: float | None = None) -> np.ndarray:
    """Full LMMSE operator ``R_HH_ls (R_HH + sigma^2/sigma_s^2 I)^-1``.

    Defaults to every tone 1..N from all K pilots of ``ue``; pass tone lists
    to get the operator of any sub-problem. Solved with LAPACK rather than
    the bank's elimination so the two stay independent.
    """
    L = cfg.L_assumed if L is None else L
    snr_fixed_db = cfg.snr_fixed_db if snr_fixed_db is None else snr_fixed_db
    in_tones = pilot_tones(ue, cfg) if in_tones is None else np.asarray(in_tones)
    out_tones = np.arange(1, cfg.N + 1) if out_tones is None else np.asarray(out_tones)
    cross = correlation_block(out_tones, in_tones, L, cfg.N)
    auto = correlation_block(in_tones, in_tones, L, cfg.N) + snr_ratio(snr_fixed_db) * np.eye(len(in_tones))
    try:
        # W = C A^-1  <=>  A^H W^H = C^H, with A Hermitian
        return np.linalg.solve(auto, cross.conj().T).conj().T
    except np.linalg.LinAlgError as exc:
        raise SingularityError(str(exc)) from exc


@dataclass(frozen=True, eq=False)
class WeightBank:
    """Precomputed windowed-LMMSE weights.

    ``matrices`` is ``(n_ues, n_weights, n_out, n_in)``; row ``u`` belongs to
    ``ues[u]``. 3W banks hold the same three matrices for every UE.
    """

    kind: str
    L: float
    snr_fixed_db: float
    N: int
    S: int
    ues: tuple[int, ...]
    matrices: np.ndarray

    def for_ue(self, ue: int) -> np.ndarray:
        try:
            return self.matrices[self.ues.index(ue)]
        except ValueError:
            raise ConfigurationError(f"weight bank has no entry for UE {ue}") from None

    def same_as(self, other: "WeightBank") -> bool:
        return (self.kind == other.kind and self.L == other.L and self.snr_fixed_db == other.snr_fixed_db
                and self.N == other.N and self.S == other.S and self.ues == other.ues
                and np.array_equal(self.matrices, other.matrices))


def three_window_matrices(S: int, L: float, N: int, snr_fixed_db: float) -> np.ndarray:
    """W(1), W(2), W(3) of the 3-pilot window, written out directly.

    Pilots sit at offsets (0, S, 2S); W(j) estimates offsets
    S(j-1) + (0, S/3, 2S/3), i.e. a cross block [r_{out - in}] times
    P = (R + sigma^2/sigma_s^2 I)^-1 with R = [r_{in_a - in_b}].
    """
    pilots = S * np.arange(3)
    P = small_inverse(correlation_block(pilots, pilots, L, N) + snr_ratio(snr_fixed_db) * np.eye(3))
    mats = []
    for j in range(3):
        outs = S * j + (S // 3) * np.arange(3)
        mats.append(correlation_block(outs, pilots, L, N) @ P)
    return np.array(mats)


def table_matrices(table: GroupTable, L: float, N: int, snr_fixed_db: float) -> np.ndarray:
    """One weight matrix per weight id, from the first group using it."""
    alpha = snr_ratio(snr_fixed_db)
    mats = []
    for wid in range(1, table.n_weights + 1):
        g = table.representative(wid)
        ins = table.inputs[g]
        auto = correlation_block(ins, ins, L, N) + alpha * np.eye(len(ins))
        cross = correlation_block(table.outputs[g], ins, L, N)
        # W = C A^-1 solved as A^H W^H = C^H (A is Hermitian)
        mats.append(small_solve(auto, cross.conj().T).conj().T)
    return np.array(mats)


def build_weight_bank(kind: str, cfg: SystemConfig, L: float | None = None,
                      snr_fixed_db: float | None = None, ues=None) -> WeightBank:
    """Weight bank for the 3W or 12W estimator on a canonical (S | N) grid."""
    if kind not in ("3W", "12W"):
        raise ConfigurationError(f"unknown weight bank kind {kind!r}")
    if cfg.N % cfg.S:
        raise ConfigurationError(f"unsupported grid: N={cfg.N} not divisible by S={cfg.S}")
    L = cfg.L_assumed if L is None else L
    snr_fixed_db = cfg.snr_fixed_db if snr_fixed_db is None else snr_fixed_db
    ues = tuple(range(1, cfg.S_active + 1)) if ues is None else tuple(ues)
    if kind == "3W":
        if cfg.S % 3:
            raise ConfigurationError("3W bank needs S divisible by 3")
        if cfg.K >= 3:
            shared = three_window_matrices(cfg.S, L, cfg.N, snr_fixed_db)
        else:
            shared = table_matrices(build_group_table("3W", ues[0], cfg), L, cfg.N, snr_fixed_db)
        mats = np.broadcast_to(shared, (len(ues),) + shared.shape).copy()
    else:
        mats = np.array([table_matrices(build_group_table("12W", ue, cfg), L, cfg.N, snr_fixed_db)
                         for ue in ues])
    mats.setflags(write=False)
    return WeightBank(kind, L, snr_fixed_db, cfg.N, cfg.S, ues, mats)


def windowed_lmmse(est: LsEstimate, bank: WeightBank, table: GroupTable) -> ChannelEstimate:
    """Apply the bank group by group: out_g = W(id_g) @ LS[inputs_g]."""
    if bank.kind != table.kind:
        raise ConfigurationError(f"bank kind {bank.kind} does not match table kind {table.kind}")
    if est.ue != table.ue:
        raise ConfigurationError(f"estimate for UE {est.ue} used with table for UE {table.ue}")
    W = bank.for_ue(est.ue)
    if W.shape[0] != table.n_weights or W.shape[1] != table.outputs.shape[1]:
        raise ConfigurationError("weight bank dimensions do not match the group table")
    x = est.values[:, table.input_index]                       # (R, G, n_in)
    y = np.matmul(W[table.weight_ids - 1], x[..., None])[..., 0]  # (R, G, n_out)
    return ChannelEstimate(est.ue, table.output_tones, y[:, table.output_mask])


def full_lmmse(est: LsEstimate, weights: np.ndarray) -> ChannelEstimate:
    """Apply an (N, K) full-band operator from :func:`build_full_lmmse_weights`."""
    values = est.values @ weights.T
    return ChannelEstimate(est.ue, np.arange(1, weights.shape[0] + 1), values)


def zero_order_hold(est: ChannelEstimate, N: int) -> ChannelEstimate:
    """Fill tones 1..N with the most recent estimate at or below each tone.

    Tones ahead of the first estimate take the first value.
    """
    if len(est.tones) == 0:
        raise ValueError("cannot hold an empty estimate")
    k = np.arange(1, N + 1)
    idx = np.clip(np.searchsorted(est.tones, k, side="right") - 1, 0, None)
    return ChannelEstimate(est.ue, k, est.values[..., idx])


# -- weight-bank text files ------------------------------------------------

def bank_stem(directory: str | Path, kind: str, L: float) -> Path:
    return Path(directory) / f"{kind.lower()}_L{int(L):02d}"


def export_weight_bank(bank: WeightBank, directory: str | Path) -> tuple[Path, Path]:
    """Write ``<kind>_L<LL>_re.txt`` and ``_im.txt``.

    Each file has one ``#`` metadata line then one row per UE holding all
    weight matrices of that UE, row-major, as shortest round-trip decimals
    (12x144 = 1728 values for 12W, 3x9 = 27 for 3W).
    """
    stem = bank_stem(directory, bank.kind, bank.L)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = (f"# kind={bank.kind} L={float(bank.L)!r} snr_fixed_db={float(bank.snr_fixed_db)!r} N={bank.N} S={bank.S} "
              f"ues={','.join(map(str, bank.ues))} shape={'x'.join(map(str, bank.matrices.shape[1:]))}")
    rows = bank.matrices.reshape(len(bank.ues), -1)
    paths = []
    for part, data in (("re", rows.real), ("im", rows.imag)):
        path = stem.with_name(stem.name + f"_{part}.txt")
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for row in data:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
        paths.append(path)
    return paths[0], paths[1]


def _read_part(path: Path) -> tuple[dict, np.ndarray]:
    meta: dict = {}
    rows = []
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise ConfigurationError(f"missing weight file {path}") from None
    for lineno, line in enumerate(lines, start=1):
        if line.startswith("#"):
            for item in line[1:].split():
                if "=" not in item:
                    raise ParseError(f"bad metadata item {item!r}", lineno, line.index(item) + 1)
                key, value = item.split("=", 1)
                meta[key] = value
            continue
        if not line.strip():
            continue
        row = []
        col = 1
        for token in line.split(" "):
            try:
                row.append(float(token))
            except ValueError:
                raise ParseError(f"not a number: {token!r}", lineno, col) from None
            col += len(token) + 1
        rows.append((lineno, row))
    for key in ("kind", "L", "snr_fixed_db", "N", "S", "ues", "shape"):
        if key not in meta:
            raise ParseError(f"metadata key {key!r} missing", 1, 1)
    width = int(np.prod([int(v) for v in meta["shape"].split("x")]))
    for lineno, row in rows:
        if len(row) != width:
            raise ParseError(f"expected {width} values, found {len(row)}", lineno, 1)
    return meta, np.array([r for _, r in rows], dtype=float).reshape(len(rows), width)


def import_weight_bank(stem: str | Path) -> WeightBank:
    """Read a bank written by :func:`export_weight_bank` (pass the path stem)."""
    stem = Path(stem)
    for suffix in ("_re.txt", "_im.txt"):
        if stem.name.endswith(suffix):
            stem = stem.with_name(stem.name[: -len(suffix)])
    meta_re, re = _read_part(stem.with_name(stem.name + "_re.txt"))
    meta_im, im = _read_part(stem.with_name(stem.name + "_im.txt"))
    if meta_re != meta_im or re.shape != im.shape:
        raise ParseError("real and imaginary files disagree", 1, 1)
    ues = tuple(int(u) for u in meta_re["ues"].split(","))
    if re.shape[0] != len(ues):
        raise ParseError(f"expected {len(ues)} rows, found {re.shape[0]}", 2, 1)
    shape = tuple(int(v) for v in meta_re["shape"].split("x"))
    mats = (re + 1j * im).reshape((len(ues),) + shape)
    mats.setflags(write=False)
    return WeightBank(meta_re["kind"], float(meta_re["L"]), float(meta_re["snr_fixed_db"]),
                      int(meta_re["N"]), int(meta_re["S"]), ues, mats)
