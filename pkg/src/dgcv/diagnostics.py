"""Desk-scale statistics for the regularity conditions behind dGCV optimality.

Everything here uses dense N x N linear algebra and refuses inputs larger
than ``DENSE_CAP``; bigger data go through :func:`resample_conditions`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .block_krr import DENSE_CAP, TuneState, dense_averaged_hat, fit_state, map_ordered
from .datasets import Dataset, Partition, make_rng
from .errors import InvalidArgumentError, ResourceLimitError, UnsupportedOperationError
from .kernels import KernelSpec, gram
from .tuning import dgcv_score, true_loss

__all__ = [
    "RANK_RTOL",
    "DiagnosticsReport",
    "d_lambda",
    "c1_statistic",
    "c1_prime_statistic",
    "c4_statistic",
    "q_statistics",
    "theorem1_gap",
    "resample_conditions",
    "condition_row",
]

RANK_RTOL = 1e-10


def _cap(N, cap=DENSE_CAP):
    if N > cap:
        raise ResourceLimitError(f"dense diagnostics need N <= {cap}, got N = {N}; use resample_conditions")


def d_lambda(dataset: Dataset, spec: KernelSpec, lam: float, K=None):
    """``(d_lambda, df_lambda)``: N times the largest, and the sum of, the full-data hat diagonal."""
    N = dataset.N
    _cap(N)
    K = gram(spec, dataset.X) if K is None else K
    M = K + N * lam * np.eye(N)
    diag = np.diag(sla.solve(M, K, assume_a="pos"))
    return float(N * diag.max()), float(diag.sum())


def c1_statistic(dataset: Dataset, partition: Partition, spec: KernelSpec, lam: float) -> float:
    """Block average of ``lambda_max{(K_ll + n_l lam I)^{-2} (m^{-1} sum_k K_kl' K_kl)}``."""
    _cap(dataset.N)
    m = partition.m
    total = 0.0
    for idx_l in partition.blocks:
        Xl = dataset.X[idx_l]
        n_l = idx_l.size
        fac = sla.cho_factor(gram(spec, Xl) + n_l * lam * np.eye(n_l))
        # M^{-2} S is similar to M^{-1} S M^{-1} = m^{-1} sum_k C_k C_k' with C_k = M^{-1} K_kl'
        sym = np.zeros((n_l, n_l))
        for idx_k in partition.blocks:
            C = sla.cho_solve(fac, gram(spec, Xl, dataset.X[idx_k]))
            sym += C @ C.T
        total += float(np.linalg.eigvalsh(sym / m)[-1])
    return total / m


def _numerical_rank(K) -> int:
    s = np.abs(np.linalg.eigvalsh(K))
    return int((s > RANK_RTOL * s.max()).sum()) if s.max() > 0 else 0


def c1_prime_statistic(dataset: Dataset, partition: Partition, spec: KernelSpec, lam: float) -> float:
    """``m d_lambda (log r + log m) / N`` with r the numerical rank of the full Gram matrix."""
    _cap(dataset.N)
    K = gram(spec, dataset.X)
    d, _ = d_lambda(dataset, spec, lam, K)
    r = _numerical_rank(K)
    m = partition.m
    return m * d * (math.log(r) + math.log(m)) / dataset.N


def c4_statistic(state: TuneState, dataset: Dataset) -> float:
    """``[N^{-1} tr(Abar W)]^2 / [N^{-1} tr(Abar' W Abar)]``."""
    N = dataset.N
    _cap(N)
    A = dense_averaged_hat(state.fits, dataset, state.partition)
    w = state.weights
    num = (sum(f.trace_ww for f in state.fits) / state.m / N) ** 2
    den = float(np.einsum("ij,i,ij->", A, w, A)) / N
    return num / den


def q_statistics(state: TuneState, dataset: Dataset, sigma2: float, fresh_sample=None, size: int = 2048):
    """``(q1, q2, q_mc)``: two in-sample versions of the integrated variance of
    the averaged estimator and a Monte-Carlo one.

    ``fresh_sample`` is either a covariate matrix or a callable ``size -> X``;
    ``q_mc`` is None when it is omitted.
    """
    N = dataset.N
    _cap(N)
    if sigma2 < 0:
        raise InvalidArgumentError("sigma2 must be >= 0")
    m = state.m
    A = dense_averaged_hat(state.fits, dataset, state.partition)
    q1 = sigma2 * float(np.einsum("ij,ij->", A, A)) / N
    trsq = 0.0
    for fit in state.fits:
        Akk = np.eye(fit.n) - fit.n * fit.lam * fit.solve(np.eye(fit.n))
        trsq += float(np.einsum("ij,ji->", Akk, Akk))
    q2 = sigma2 * trsq / (N * m)
    q_mc = None
    if fresh_sample is not None:
        Xf = fresh_sample(size) if callable(fresh_sample) else fresh_sample
        Xf = np.asarray(Xf, dtype=float)
        # Var fbar(x) = sigma^2 m^{-2} sum_k ||a_k(x)||^2
        var = np.zeros(Xf.shape[0])
        for fit in state.fits:
            rows = fit.solve(gram(fit.spec, Xf, fit.X).T)
            var += np.einsum("ij,ij->j", rows, rows)
        q_mc = sigma2 * float(var.mean()) / m**2
    return q1, q2, q_mc


@dataclass(frozen=True)
class GapSummary:
    median: float
    q1: float
    q3: float
    gaps: np.ndarray


def theorem1_gap(
    dataset: Dataset,
    partition: Partition,
    spec: KernelSpec,
    lam: float,
    replicates: int = 1,
    seed=0,
    weights=None,
) -> GapSummary:
    """Relative gap ``|dGCV - L - N^{-1} e'We| / L`` over fresh noise at fixed covariates."""
    if dataset.f0 is None or dataset.sigma is None:
        raise UnsupportedOperationError("theorem1_gap needs a synthetic dataset with f0 and sigma")
    if replicates < 1:
        raise InvalidArgumentError("replicates must be >= 1")
    N = dataset.N
    w = np.ones(N) if weights is None else np.asarray(weights, dtype=float)
    rng = make_rng(seed)
    gaps = []
    for _ in range(replicates):
        eps = dataset.sigma * rng.standard_normal(N)
        ds = dataset.with_response(dataset.f0 + eps)
        st = fit_state(ds, partition, spec, lam, w)
        loss = true_loss(st, ds)
        gaps.append(abs(dgcv_score(st, ds) - loss - float(eps @ (w * eps)) / N) / loss)
    gaps = np.array(gaps)
    q1, med, q3 = np.percentile(gaps, [25, 50, 75])
    return GapSummary(float(med), float(q1), float(q3), gaps)


# ---------------------------------------------------------------------------
# condition table and resampling


def condition_row(dataset: Dataset, partition: Partition, spec: KernelSpec, lam: float, sigma2=None) -> dict:
    """All dense statistics at one (lambda, m)."""
    _cap(dataset.N)
    K = gram(spec, dataset.X)
    d, df = d_lambda(dataset, spec, lam, K)
    r = _numerical_rank(K)
    m = partition.m
    st = fit_state(dataset, partition, spec, lam)
    row = {
        "lambda": float(lam),
        "m": m,
        "c1_stat": c1_statistic(dataset, partition, spec, lam),
        "c1_prime_stat": m * d * (math.log(r) + math.log(m)) / dataset.N,
        "c4_stat": c4_statistic(st, dataset),
        "d_lambda": d,
        "effective_df": df,
    }
    if sigma2 is not None:
        q1, q2, _ = q_statistics(st, dataset, sigma2)
        row["q1"], row["q2"] = q1, q2
    if not d >= df - 1e-9 * max(1.0, df):
        raise ArithmeticError(f"d_lambda ({d}) below effective df ({df})")
    return row


@dataclass
class DiagnosticsReport:
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


_RESAMPLED = ("c1_stat", "c1_prime_stat", "c4_stat", "d_lambda", "effective_df")


def restrict_partition(partition: Partition, idx) -> Partition:
    """Partition of ``idx`` (relabelled 0..len-1) that keeps each point's block."""
    label = partition.block_of()[idx]
    blocks = tuple(np.flatnonzero(label == k) for k in range(partition.m))
    if any(b.size == 0 for b in blocks):
        raise InvalidArgumentError("subsample too small: some block received no observations")
    return Partition(blocks, len(idx))


def resample_conditions(
    dataset: Dataset,
    partition: Partition,
    spec: KernelSpec,
    lam: float,
    B: int = 20,
    fraction: float = 0.5,
    seed=0,
    threads: int = 1,
) -> DiagnosticsReport:
    """Condition statistics on ``B`` random subsamples (without replacement).

    Each subsample keeps the block labels of the full partition. With
    ``fraction = 1`` the subsample is the full data set.
    """
    if not 0 < fraction <= 1:
        raise InvalidArgumentError(f"fraction must lie in (0, 1], got {fraction}")
    if B < 1:
        raise InvalidArgumentError("B must be >= 1")
    size = int(round(fraction * dataset.N))
    if size < partition.m:
        raise InvalidArgumentError(f"subsample of {size} points cannot fill {partition.m} blocks")
    _cap(size)
    seeds = np.random.SeedSequence(seed).spawn(B)

    def one(b):
        if size == dataset.N:
            idx = np.arange(dataset.N)
        else:
            idx = np.sort(make_rng(seeds[b]).choice(dataset.N, size, replace=False))
        sub = dataset.subset(idx)
        row = condition_row(sub, restrict_partition(partition, idx), spec, lam)
        row["replicate"] = b
        return row

    rows = map_ordered(one, range(B), threads)
    summary = {"lambda": float(lam), "m": partition.m, "B": B, "fraction": fraction}
    for key in _RESAMPLED:
        vals = np.array([r[key] for r in rows])
        summary[f"{key}_mean"] = float(vals.mean())
        summary[f"{key}_sd"] = float(vals.std(ddof=1)) if B > 1 else 0.0
    return DiagnosticsReport(rows, summary)
