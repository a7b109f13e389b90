"""Per-block kernel ridge solves and the averaged divide-and-conquer estimator.

Two solve paths are provided:

* :func:`fit_block` factors ``K_kk + n_k lam I`` by Cholesky for a single
  ``lam``. This is the reference path used by scores, diagnostics and the
  Newton derivatives.
* :class:`BlockSpectrum` eigendecomposes ``K_kk`` once and then evaluates
  coefficients and traces for a whole vector of ``lam`` values. Grid
  searches go through :func:`sweep_lambda`, which is built on it.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .datasets import Dataset, Partition
from .errors import InvalidArgumentError, ResourceLimitError, SingularSystemError
from .kernels import KernelSpec, gram

__all__ = [
    "DENSE_CAP",
    "BlockFit",
    "TuneState",
    "fit_block",
    "predict_block",
    "predict_averaged",
    "smoother_rows",
    "fit_state",
    "dense_averaged_hat",
    "BlockSpectrum",
    "Sweep",
    "sweep_lambda",
    "map_ordered",
]

DENSE_CAP = 4096
SOLVE_RTOL = 1e-8


def map_ordered(fn, items, threads: int = 1):
    """``list(map(fn, items))``, optionally on a thread pool; output order is input order."""
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True, eq=False)
class BlockFit:
    index: int
    indices: np.ndarray
    n: int
    lam: float
    spec: KernelSpec
    factor: tuple
    beta: np.ndarray
    trace_ww: float  # tr(A_kk W_k)
    trace: float  # tr(A_kk)
    hat_diag: np.ndarray  # diag(A_kk)
    X: np.ndarray
    y: np.ndarray

    def solve(self, rhs) -> np.ndarray:
        """Apply ``(K_kk + n_k lam I)^{-1}``."""
        return sla.cho_solve(self.factor, rhs, check_finite=False)


def fit_block(X_k, y_k, spec: KernelSpec, lam: float, w_k=None, *, index: int = 0, indices=None, K=None) -> BlockFit:
    """Solve ``(K_kk + n_k lam I) beta = y_k`` and the weighted hat-matrix trace."""
    X_k = np.asarray(X_k, dtype=float)
    if X_k.ndim == 1:
        X_k = X_k[:, None]
    y_k = np.asarray(y_k, dtype=float).ravel()
    n = y_k.size
    if n < 1 or X_k.shape[0] != n:
        raise InvalidArgumentError("block covariates and responses must have matching nonzero length")
    if not lam >= 0:
        raise InvalidArgumentError(f"lambda must be >= 0, got {lam!r}")
    w_k = np.ones(n) if w_k is None else np.asarray(w_k, dtype=float).ravel()
    if w_k.shape != (n,) or np.any(w_k < 0):
        raise InvalidArgumentError("block weights must be nonnegative, one per observation")
    if K is None:
        K = gram(spec, X_k)
    M = K + (n * lam) * np.eye(n)
    try:
        factor = sla.cho_factor(M, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise SingularSystemError(
            f"K_kk + n_k*lambda*I is not positive definite for block {index} at lambda = {lam:g}; use lambda > 0"
        ) from None
    beta = sla.cho_solve(factor, y_k, check_finite=False)
    resid = np.linalg.norm(M @ beta - y_k)
    if not np.isfinite(resid) or resid > SOLVE_RTOL * max(np.linalg.norm(y_k), np.finfo(float).tiny):
        raise SingularSystemError(
            f"ill-conditioned solve for block {index} at lambda = {lam:g} (residual {resid:.3g}); use a larger lambda"
        )
    S = sla.cho_solve(factor, K, check_finite=False)
    diag = np.diag(S).copy()
    return BlockFit(
        index=index,
        indices=np.arange(n) if indices is None else np.asarray(indices, dtype=int),
        n=n,
        lam=float(lam),
        spec=spec,
        factor=factor,
        beta=beta,
        trace_ww=float(diag @ w_k),
        trace=float(diag.sum()),
        hat_diag=diag,
        X=X_k,
        y=y_k,
    )


def predict_block(fit: BlockFit, X_query) -> np.ndarray:
    return gram(fit.spec, X_query, fit.X) @ fit.beta


def predict_averaged(fits, X_query) -> np.ndarray:
    """Mean of the block predictions, accumulated in block order."""
    fits = list(fits)
    if not fits:
        raise InvalidArgumentError("need at least one block fit")
    out = predict_block(fits[0], X_query)
    for fit in fits[1:]:
        out += predict_block(fit, X_query)
    return out / len(fits)


def smoother_rows(fit: BlockFit, X_query) -> np.ndarray:
    """Rows ``a_k(x)' = K(x, X_k) (K_kk + n_k lam I)^{-1}`` for each query point."""
    G = gram(fit.spec, X_query, fit.X)
    return fit.solve(G.T).T


@dataclass(frozen=True, eq=False)
class TuneState:
    """All block fits at one (lambda, theta) plus the averaged fitted values.

    ``fbar`` has length N; entries outside ``eval_index`` are NaN when the
    state was built for a subset of observations only.
    """

    lam: float
    spec: KernelSpec
    fits: tuple[BlockFit, ...]
    fbar: np.ndarray
    weights: np.ndarray
    partition: Partition
    eval_index: np.ndarray

    @property
    def m(self) -> int:
        return len(self.fits)

    @property
    def theta(self) -> np.ndarray:
        return self.spec.theta

    @property
    def trace_stat(self) -> float:
        """``(N m)^{-1} sum_k tr(A_kk W_k)``."""
        return sum(f.trace_ww for f in self.fits) / (self.partition.N * self.m)


def fit_state(
    dataset: Dataset,
    partition: Partition,
    spec: KernelSpec,
    lam: float,
    weights=None,
    eval_index=None,
    threads: int = 1,
) -> TuneState:
    if partition.N != dataset.N:
        raise InvalidArgumentError(f"partition covers {partition.N} points, dataset has {dataset.N}")
    w = np.ones(dataset.N) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (dataset.N,):
        raise InvalidArgumentError("weights must have one entry per observation")

    def one(k):
        idx = partition.blocks[k]
        return fit_block(dataset.X[idx], dataset.y[idx], spec, lam, w[idx], index=k, indices=idx)

    fits = tuple(map_ordered(one, range(partition.m), threads))
    ev = np.arange(dataset.N) if eval_index is None else np.asarray(eval_index, dtype=int)
    fbar = np.full(dataset.N, np.nan)
    fbar[ev] = predict_averaged(fits, dataset.X[ev])
    return TuneState(float(lam), spec, fits, fbar, w, partition, ev)


def dense_averaged_hat(fits, dataset: Dataset, partition: Partition, cap: int = DENSE_CAP) -> np.ndarray:
    """The N x N averaged hat matrix mapping y to the averaged fitted values.

    Row block l, column block k holds ``A_kl / m`` with
    ``A_kl = K_kl' (K_kk + n_k lam I)^{-1}``. Diagnostic use only.
    """
    N = dataset.N
    if N > cap:
        raise ResourceLimitError(f"dense averaged hat matrix needs N <= {cap}, got N = {N}")
    fits = list(fits)
    m = len(fits)
    A = np.zeros((N, N))
    for fit, idx in zip(fits, partition.blocks):
        A[:, idx] = smoother_rows(fit, dataset.X) / m
    return A


# ---------------------------------------------------------------------------
# spectral path for lambda sweeps


class BlockSpectrum:
    """Eigendecomposition ``K_kk = U diag(s) U'`` reused across many lambdas."""

    def __init__(self, K: np.ndarray, y_k: np.ndarray):
        s, U = np.linalg.eigh(K)
        self.s = np.maximum(s, 0.0)
        self.U = U
        self.n = K.shape[0]
        self.y = np.asarray(y_k, dtype=float)
        self.c = U.T @ self.y
        self.lev = U * U  # row j: squared loadings of observation j

    def shifted(self, lams) -> np.ndarray:
        lams = np.asarray(lams, dtype=float)
        if np.any(lams < 0):
            raise InvalidArgumentError("lambda must be >= 0")
        D = self.s[:, None] + self.n * lams[None, :]
        smax = max(self.s.max(), np.finfo(float).tiny)
        if np.any(D <= 1e-13 * smax):
            raise SingularSystemError("K_kk + n_k*lambda*I is singular on this grid; use lambda > 0")
        return D

    def coefficients(self, lams, c=None) -> np.ndarray:
        """``beta`` for every lambda, shape ``(n, L)``."""
        c = self.c if c is None else c
        return self.U @ (c[:, None] / self.shifted(lams))

    def fitted(self, lams) -> np.ndarray:
        """In-block fitted values ``A_kk y_k`` for every lambda."""
        return self.U @ (self.s[:, None] * self.c[:, None] / self.shifted(lams))

    def traces(self, lams, w_k=None) -> np.ndarray:
        """``tr(A_kk W_k)`` for every lambda."""
        ratio = self.s[:, None] / self.shifted(lams)
        wl = self.lev.sum(axis=0) if w_k is None else np.asarray(w_k) @ self.lev
        return wl @ ratio


@dataclass(frozen=True, eq=False)
class Sweep:
    """Averaged-estimator quantities on a lambda grid at fixed theta.

    Arrays indexed ``[row, j]`` refer to ``eval_index[row]`` and ``lams[j]``.
    """

    lams: np.ndarray
    spec: KernelSpec
    eval_index: np.ndarray
    fbar: np.ndarray
    trace_w: np.ndarray  # (m, L): tr(A_kk W_k)
    trace: np.ndarray  # (m, L): tr(A_kk)
    ef: np.ndarray | None  # averaged smoother applied to f0
    var_unit: np.ndarray | None  # Var(fbar) / sigma^2
    fitted: list | None  # per block (n_k, L) in-block fits


def sweep_lambda(
    dataset: Dataset,
    partition: Partition,
    spec: KernelSpec,
    lams,
    weights=None,
    eval_index=None,
    *,
    with_truth: bool = False,
    with_variance: bool = False,
    with_fitted: bool = False,
    threads: int = 1,
) -> Sweep:
    lams = np.atleast_1d(np.asarray(lams, dtype=float))
    N = dataset.N
    if partition.N != N:
        raise InvalidArgumentError(f"partition covers {partition.N} points, dataset has {N}")
    w = np.ones(N) if weights is None else np.asarray(weights, dtype=float)
    ev = np.arange(N) if eval_index is None else np.asarray(eval_index, dtype=int)
    Xe = dataset.X[ev]
    if with_truth and dataset.f0 is None:
        raise InvalidArgumentError("truth-based quantities need dataset.f0")

    def one(k):
        idx = partition.blocks[k]
        Xk = dataset.X[idx]
        G = gram(spec, Xe, Xk)
        bs = BlockSpectrum(gram(spec, Xk), dataset.y[idx])
        D = bs.shifted(lams)
        part = {
            "f": G @ (bs.U @ (bs.c[:, None] / D)),
            "tw": bs.traces(lams, w[idx]),
            "t": bs.traces(lams),
        }
        if with_truth:
            cf = bs.U.T @ dataset.f0[idx]
            part["ef"] = G @ (bs.U @ (cf[:, None] / D))
        if with_variance:
            C = G @ bs.U
            part["v"] = (C * C) @ (1.0 / (D * D))
        if with_fitted:
            part["fit"] = bs.fitted(lams)
        return part

    parts = map_ordered(one, range(partition.m), threads)
    m = partition.m

    def avg(key, scale=1.0):
        acc = np.zeros((ev.size, lams.size))
        for part in parts:
            acc += part[key]
        return acc * scale

    return Sweep(
        lams=lams,
        spec=spec,
        eval_index=ev,
        fbar=avg("f", 1.0 / m),
        trace_w=np.array([p["tw"] for p in parts]),
        trace=np.array([p["t"] for p in parts]),
        ef=avg("ef", 1.0 / m) if with_truth else None,
        var_unit=avg("v", 1.0 / m**2) if with_variance else None,
        fitted=[p["fit"] for p in parts] if with_fitted else None,
    )
