"""Per-subcarrier ZF and MMSE detection.

Every routine is batched: a leading axis runs over subcarriers, so ``H`` is
``(..., R, S)`` and ``Y`` is ``(..., R, n)`` with one column per data symbol.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CoverageError, SingularityError
from .estimation import ChannelEstimate


def assemble_channel_matrix(estimates: Mapping[int, ChannelEstimate] | list, k: int) -> np.ndarray:
    """R x S_active matrix of tone ``k`` (1-based) with entry (r, s) = H_rs(k)."""
    ests = list(estimates.values()) if isinstance(estimates, Mapping) else list(estimates)
    cols = []
    for est in ests:
        pos = np.searchsorted(est.tones, k)
        if pos >= len(est.tones) or est.tones[pos] != k:
            raise CoverageError(f"estimate for UE {est.ue} does not cover tone {k}")
        cols.append(est.values[:, pos])
    return np.stack(cols, axis=1)


def assemble_channel_matrices(estimates: Mapping[int, ChannelEstimate] | list, N: int) -> np.ndarray:
    """All N per-tone matrices at once, ``(N, R, S_active)``."""
    ests = list(estimates.values()) if isinstance(estimates, Mapping) else list(estimates)
    full = np.arange(1, N + 1)
    for est in ests:
        if len(est.tones) != N or not np.array_equal(est.tones, full):
            raise CoverageError(f"estimate for UE {est.ue} does not cover all {N} tones")
    return np.stack([est.values.T for est in ests], axis=2)


def _hermitian(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower factor ``C`` with ``a = C C^H`` for a batch of Hermitian matrices.

    Column-by-column (Cholesky-Banachiewicz), vectorized over the batch.
    Raises :class:`SingularityError` on a non-positive pivot.
    """
    a = np.asarray(a, dtype=complex)
    n = a.shape[-1]
    c = np.zeros_like(a)
    for j in range(n):
        d = a[..., j, j].real - np.sum(np.abs(c[..., j, :j]) ** 2, axis=-1)
        if np.any(~(d > 0)):
            raise SingularityError(f"matrix not positive definite (pivot {j})")
        cjj = np.sqrt(d)
        c[..., j, j] = cjj
        if j + 1 < n:
            s = a[..., j + 1:, j] - np.einsum("...ik,...k->...i", c[..., j + 1:, :j], np.conj(c[..., j, :j]))
            c[..., j + 1:, j] = s / cjj[..., None]
    return c


def cholesky_solve(c: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``C C^H x = b`` given the lower factor; ``b`` is ``(..., n, m)``."""
    n = c.shape[-1]
    z = np.zeros(np.broadcast_shapes(c.shape[:-1], b.shape[:-1]) + b.shape[-1:], dtype=complex)
    for i in range(n):  # forward: C z = b
        acc = b[..., i, :] - np.einsum("...k,...km->...m", c[..., i, :i], z[..., :i, :])
        z[..., i, :] = acc / c[..., i, i][..., None]
    x = np.zeros_like(z)
    ch = _hermitian(c)
    for i in range(n - 1, -1, -1):  # backward: C^H x = z
        acc = z[..., i, :] - np.einsum("...k,...km->...m", ch[..., i, i + 1:], x[..., i + 1:, :])
        x[..., i, :] = acc / ch[..., i, i][..., None]
    return x


def gram(H: np.ndarray, sigma2: float = 0.0) -> np.ndarray:
    g = _hermitian(H) @ H
    if sigma2:
        g = g + sigma2 * np.eye(H.shape[-1])
    return g


def zf_detect(H: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Solve (H^H H) X = H^H Y by LU; raises on rank deficiency."""
    H = np.asarray(H)
    Y = np.asarray(Y)
    vec = Y.ndim == H.ndim - 1
    if vec:
        Y = Y[..., None]
    G = gram(H)
    s = np.linalg.svd(H, compute_uv=False)
    if np.any(s[..., -1] <= s[..., 0] * 1e-12):
        raise SingularityError("channel matrix is rank deficient")
    X = np.linalg.solve(G, _hermitian(H) @ Y)
    return X[..., 0] if vec else X


def mmse_detect(H: np.ndarray, Y: np.ndarray, sigma2: float) -> np.ndarray:
    """Solve (H^H H + sigma^2 I) X = H^H Y through a Cholesky factorization."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    H = np.asarray(H)
    Y = np.asarray(Y)
    vec = Y.ndim == H.ndim - 1
    if vec:
        Y = Y[..., None]
    X = cholesky_solve(cholesky(gram(H, sigma2)), _hermitian(H) @ Y)
    return X[..., 0] if vec else X


def mmse_detect_inverse(H: np.ndarray, Y: np.ndarray, sigma2: float) -> np.ndarray:
    """Explicit-inverse form (H^H H + sigma^2 I)^-1 H^H Y; reference only."""
    return np.linalg.inv(gram(H, sigma2)) @ _hermitian(H) @ Y


def symbols_to_csv(symbols: np.ndarray, path: str | Path) -> None:
    """Detected ``(S, n_symbols, N)`` grid as rows (s, symbol, k, re, im), s and k 1-based."""
    symbols = np.asarray(symbols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "symbol", "k", "re", "im"])
        for s, per_ue in enumerate(symbols, start=1):
            for i, row in enumerate(per_ue):
                for k, x in enumerate(row, start=1):
                    w.writerow([s, i, k, repr(float(x.real)), repr(float(x.imag))])
