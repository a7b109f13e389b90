"""Selection scores for the averaged estimator and grid-search tuners.

Score functions taking a :class:`~dgcv.block_krr.TuneState` work from the
Cholesky fits at a single lambda. :func:`tune_grid` evaluates the same
formulas on whole lambda grids through :func:`~dgcv.block_krr.sweep_lambda`.

Degenerate GCV denominators (below ``DEGENERATE_TOL``) give ``inf`` so
grid searches simply pass over them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .block_krr import (
    BlockFit,
    BlockSpectrum,
    TuneState,
    fit_block,
    fit_state,
    predict_averaged,
    smoother_rows,
    sweep_lambda,
)
from .datasets import Dataset, Partition, random_partition
from .errors import InvalidArgumentError, NoSelectionError, UnsupportedOperationError
from .kernels import KernelSpec, gram

__all__ = [
    "DEGENERATE_TOL",
    "ScoreKind",
    "TuneReport",
    "NgcvResult",
    "ProfileRow",
    "gcv_ratio",
    "sub_gcv_score",
    "dgcv_score",
    "dgcv_star_score",
    "cp_score",
    "true_loss",
    "risk_score",
    "lambda_grid",
    "tune_grid",
    "tune_ngcv",
    "profile_m",
    "state_scores",
    "fit_state",
]

DEGENERATE_TOL = 1e-12
KIND_NAMES = ("dgcv", "dgcv_star", "ngcv", "cp", "true_loss", "risk")


def gcv_ratio(numerator, trace_fraction):
    """``numerator / (1 - trace_fraction)^2``, ``inf`` where the denominator degenerates."""
    num = np.asarray(numerator, dtype=float)
    den = (1.0 - np.asarray(trace_fraction, dtype=float)) ** 2
    ok = den >= DEGENERATE_TOL
    out = np.where(ok, num / np.where(ok, den, 1.0), np.inf)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# score kinds


@dataclass(frozen=True)
class ScoreKind:
    name: str
    m_star: int | None = None
    sigma2: float | None = None

    def __post_init__(self):
        if self.name not in KIND_NAMES:
            raise InvalidArgumentError(f"unknown score kind {self.name!r}; expected one of {KIND_NAMES}")
        if self.name == "dgcv_star" and (self.m_star is None or self.m_star < 1):
            raise InvalidArgumentError("dgcv_star needs m_star >= 1")
        if self.sigma2 is not None and not self.sigma2 >= 0:
            raise InvalidArgumentError(f"sigma2 must be >= 0, got {self.sigma2}")

    @classmethod
    def parse(cls, text: str) -> "ScoreKind":
        """``dgcv``, ``dgcv_star:13``, ``cp:9``, ``risk:9``, ``true_loss``, ``ngcv``."""
        name, _, arg = str(text).strip().partition(":")
        if not arg:
            return cls(name)
        try:
            if name == "dgcv_star":
                return cls(name, m_star=int(arg))
            return cls(name, sigma2=float(arg))
        except ValueError:
            raise InvalidArgumentError(f"cannot parse score kind {text!r}") from None

    @property
    def label(self) -> str:
        if self.name == "dgcv_star":
            return f"dgcv_star:{self.m_star}"
        if self.sigma2 is not None:
            return f"{self.name}:{self.sigma2:g}"
        return self.name

    def resolve_sigma2(self, dataset: Dataset) -> float:
        if self.sigma2 is not None:
            return self.sigma2
        if dataset.sigma is not None:
            return dataset.sigma**2
        raise UnsupportedOperationError(f"score {self.name} needs sigma^2 (give it as {self.name}:<value>)")


# ---------------------------------------------------------------------------
# single-state scores


def sub_gcv_score(fit: BlockFit, y_k=None, w_k=None) -> float:
    """Block-local GCV of one sub-estimator, weighted by ``w_k`` (summing to ``n_k``)."""
    y_k = fit.y if y_k is None else np.asarray(y_k, dtype=float)
    w_k = np.ones(fit.n) if w_k is None else np.asarray(w_k, dtype=float)
    if not np.isclose(w_k.sum(), fit.n, rtol=1e-10, atol=0):
        raise InvalidArgumentError("sub-GCV needs block weights summing to n_k")
    resid = fitted_in_block(fit, y_k) - y_k
    num = float(resid @ (w_k * resid)) / fit.n
    return gcv_ratio(num, float(fit.hat_diag @ w_k) / fit.n)


def fitted_in_block(fit: BlockFit, y_k=None) -> np.ndarray:
    """In-block fitted values ``A_kk y_k``."""
    if y_k is None:
        # (K + n lam I) beta = y  =>  K beta = y - n lam beta
        return fit.y - fit.n * fit.lam * fit.beta
    return y_k - fit.n * fit.lam * fit.solve(y_k)


def _resid(state: TuneState, dataset: Dataset, idx=None):
    idx = state.eval_index if idx is None else idx
    fb = state.fbar[idx]
    if np.isnan(fb).any():
        raise InvalidArgumentError("state has no averaged fit at the requested observations")
    return dataset.y[idx] - fb, idx


def _weighted_rows(state: TuneState):
    nz = np.flatnonzero(state.weights)
    missing = np.setdiff1d(nz, state.eval_index, assume_unique=False)
    if missing.size:
        raise InvalidArgumentError("state lacks averaged fits at observations with nonzero weight")
    return nz


def dgcv_score(state: TuneState, dataset: Dataset) -> float:
    w = state.weights
    if not np.isclose(w.sum(), dataset.N, rtol=1e-10, atol=0):
        raise InvalidArgumentError("weights must sum to N")
    r, idx = _resid(state, dataset, _weighted_rows(state))
    num = float(r @ (w[idx] * r)) / dataset.N
    return gcv_ratio(num, state.trace_stat)


def dgcv_star_score(state: TuneState, dataset: Dataset, m_star: int) -> float:
    """Score on the first ``m_star`` blocks only, with unweighted traces."""
    m = state.m
    if not 1 <= m_star <= m:
        raise InvalidArgumentError(f"m_star must lie in 1..{m}, got {m_star}")
    kept = state.partition.retained(m_star)
    r, _ = _resid(state, dataset, kept)
    n_kept = kept.size
    tr = sum(f.trace for f in state.fits[:m_star])
    return gcv_ratio(float(r @ r) / n_kept, tr / (m * n_kept))


def _trace_aw(state: TuneState) -> float:
    return sum(f.trace_ww for f in state.fits) / state.m


def cp_score(state: TuneState, dataset: Dataset, sigma2: float) -> float:
    if not sigma2 > 0:
        raise InvalidArgumentError(f"sigma2 must be > 0, got {sigma2}")
    r, idx = _resid(state, dataset, _weighted_rows(state))
    N = dataset.N
    return float(r @ (state.weights[idx] * r)) / N + 2.0 * sigma2 * _trace_aw(state) / N


def _need_truth(dataset):
    if dataset.f0 is None:
        raise UnsupportedOperationError("this score needs the true regression function (dataset.f0)")


def true_loss(state: TuneState, dataset: Dataset) -> float:
    _need_truth(dataset)
    idx = _weighted_rows(state)
    d = state.fbar[idx] - dataset.f0[idx]
    return float(d @ (state.weights[idx] * d)) / dataset.N


def risk_score(state: TuneState, dataset: Dataset, sigma2: float) -> float:
    """Conditional risk: weighted squared bias plus weighted variance of the averaged fit."""
    _need_truth(dataset)
    if sigma2 is None or sigma2 < 0:
        raise UnsupportedOperationError("risk needs sigma^2 >= 0")
    idx = _weighted_rows(state)
    Xq = dataset.X[idx]
    mean = np.zeros(idx.size)
    var = np.zeros(idx.size)
    for fit in state.fits:
        rows = smoother_rows(fit, Xq)
        mean += rows @ dataset.f0[fit.indices]
        var += np.einsum("ij,ij->i", rows, rows)
    m = state.m
    bias = mean / m - dataset.f0[idx]
    w = state.weights[idx]
    return float(bias @ (w * bias)) / dataset.N + sigma2 * float(w @ var) / (m * m * dataset.N)


# ---------------------------------------------------------------------------
# grids


def lambda_grid(lo: float, hi: float, count: int, base: str = "e") -> np.ndarray:
    """``count`` log-equispaced lambdas with log(lambda) in [lo, hi]; ``base`` is ``'e'`` or ``'10'``."""
    if count < 1:
        raise InvalidArgumentError("lambda grid needs at least one point")
    if base in ("e", "ln"):
        return np.exp(np.linspace(lo, hi, int(count)))
    if str(base) == "10":
        return 10.0 ** np.linspace(lo, hi, int(count))
    raise InvalidArgumentError(f"unknown log base {base!r}")


def _argmin(scores, lams, thetas):
    finite = np.isfinite(scores)
    if not finite.any():
        return None
    order = sorted(
        np.flatnonzero(finite),
        key=lambda i: (scores[i], lams[i], tuple(thetas[i]), i),
    )
    return int(order[0])


@dataclass
class TuneReport:
    """Scores of every requested kind at every (lambda, theta) grid point."""

    lams: np.ndarray
    specs: list
    kinds: list
    scores: dict
    trace_stat: np.ndarray
    wall_ms: np.ndarray
    argmin: dict = field(default_factory=dict)

    @property
    def thetas(self):
        return [s.theta for s in self.specs]

    def degenerate(self, kind) -> np.ndarray:
        return ~np.isfinite(self.scores[_label(kind)])

    def best(self, kind):
        """``(lambda, spec, score)`` at the selected point for ``kind``."""
        label = _label(kind)
        i = self.argmin.get(label)
        if i is None:
            raise NoSelectionError(f"every grid point is degenerate for {label}")
        return float(self.lams[i]), self.specs[i], float(self.scores[label][i])

    def rows(self):
        """Flat table rows: lambda, theta..., kind, score, trace_stat."""
        out = []
        for i, (lam, spec) in enumerate(zip(self.lams, self.specs)):
            for kind in self.kinds:
                out.append((float(lam), *map(float, spec.theta), kind.label, float(self.scores[kind.label][i]),
                            float(self.trace_stat[i])))
        return out


def _label(kind):
    return kind.label if isinstance(kind, ScoreKind) else ScoreKind.parse(kind).label


def _scores_on_sweep(sw, dataset, partition, w, kinds):
    N, m = dataset.N, partition.m
    pos = np.full(N, -1)
    pos[sw.eval_index] = np.arange(sw.eval_index.size)
    y = dataset.y[sw.eval_index]
    resid = y[:, None] - sw.fbar
    we = w[sw.eval_index]
    wrss = we @ (resid * resid) / N
    trace_w_mean = sw.trace_w.sum(axis=0) / m
    out = {}
    for kind in kinds:
        if kind.name == "dgcv":
            out[kind.label] = gcv_ratio(wrss, trace_w_mean / N)
        elif kind.name == "dgcv_star":
            kept = partition.retained(kind.m_star)
            rk = resid[pos[kept]]
            tr = sw.trace[: kind.m_star].sum(axis=0)
            out[kind.label] = gcv_ratio((rk * rk).sum(axis=0) / kept.size, tr / (m * kept.size))
        elif kind.name == "cp":
            s2 = kind.resolve_sigma2(dataset)
            out[kind.label] = wrss + 2.0 * s2 * trace_w_mean / N
        elif kind.name == "true_loss":
            d = sw.fbar - dataset.f0[sw.eval_index][:, None]
            out[kind.label] = we @ (d * d) / N
        elif kind.name == "risk":
            s2 = kind.resolve_sigma2(dataset)
            b = sw.ef - dataset.f0[sw.eval_index][:, None]
            out[kind.label] = we @ (b * b) / N + s2 * (we @ sw.var_unit) / N
    return out, trace_w_mean / N


def tune_grid(
    dataset: Dataset,
    partition: Partition,
    spec_grid,
    lambda_grid,
    kinds,
    weights=None,
    threads: int = 1,
) -> TuneReport:
    """Evaluate every kind over the (theta outer, lambda inner) grid and pick minimizers.

    Ties go to the smaller lambda, then the lexicographically smaller theta,
    then the earlier grid position.
    """
    specs = list(spec_grid)
    lams = np.atleast_1d(np.asarray(lambda_grid, dtype=float))
    kinds = [k if isinstance(k, ScoreKind) else ScoreKind.parse(k) for k in kinds]
    if not specs or lams.size == 0 or not kinds:
        raise InvalidArgumentError("grids and score kinds must be nonempty")
    if any(k.name == "ngcv" for k in kinds):
        raise InvalidArgumentError("ngcv selects one lambda per block; use tune_ngcv")
    for k in kinds:
        if k.name == "dgcv_star" and k.m_star > partition.m:
            raise InvalidArgumentError(f"m_star = {k.m_star} exceeds m = {partition.m}")
        if k.name in ("true_loss", "risk"):
            _need_truth(dataset)
        if k.name in ("cp", "risk"):
            k.resolve_sigma2(dataset)
    N = dataset.N
    w = np.ones(N) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (N,) or np.any(w < 0) or not np.isclose(w.sum(), N, rtol=1e-10, atol=0):
        raise InvalidArgumentError("weights must be nonnegative, one per observation, summing to N")

    rows = []
    if any(k.name != "dgcv_star" for k in kinds):
        rows.append(np.flatnonzero(w))
    for k in kinds:
        if k.name == "dgcv_star":
            rows.append(partition.retained(k.m_star))
    ev = np.unique(np.concatenate(rows))

    need_truth = any(k.name == "risk" for k in kinds)
    all_scores = {k.label: [] for k in kinds}
    trace_stat, wall, lam_col, spec_col = [], [], [], []
    for spec in specs:
        t0 = time.perf_counter()
        sw = sweep_lambda(dataset, partition, spec, lams, w, ev, with_truth=need_truth,
                          with_variance=need_truth, threads=threads)
        sc, ts = _scores_on_sweep(sw, dataset, partition, w, kinds)
        per_point = (time.perf_counter() - t0) * 1e3 / lams.size
        for label, vals in sc.items():
            all_scores[label].append(np.atleast_1d(vals))
        trace_stat.append(ts)
        wall.append(np.full(lams.size, per_point))
        lam_col.append(lams)
        spec_col.extend([spec] * lams.size)

    report = TuneReport(
        lams=np.concatenate(lam_col),
        specs=spec_col,
        kinds=kinds,
        scores={k: np.concatenate(v) for k, v in all_scores.items()},
        trace_stat=np.concatenate(trace_stat),
        wall_ms=np.concatenate(wall),
    )
    thetas = report.thetas
    for kind in kinds:
        i = _argmin(report.scores[kind.label], report.lams, thetas)
        if i is None:
            raise NoSelectionError(f"every grid point is degenerate for {kind.label}")
        report.argmin[kind.label] = i
    return report


# ---------------------------------------------------------------------------
# naive per-block GCV


@dataclass(frozen=True, eq=False)
class NgcvResult:
    """Per-block lambdas chosen by sub-GCV and the averaged estimator built from them."""

    lams: np.ndarray
    scores: np.ndarray  # (m, L) sub-GCV table
    fits: tuple
    spec: KernelSpec

    def predict(self, X_query) -> np.ndarray:
        return predict_averaged(self.fits, X_query)

    def fbar(self, dataset: Dataset) -> np.ndarray:
        return self.predict(dataset.X)

    def true_loss(self, dataset: Dataset, weights=None) -> float:
        _need_truth(dataset)
        w = np.ones(dataset.N) if weights is None else np.asarray(weights, dtype=float)
        d = self.fbar(dataset) - dataset.f0
        return float(d @ (w * d)) / dataset.N


def tune_ngcv(dataset: Dataset, partition: Partition, spec: KernelSpec, lambda_grid, threads: int = 1) -> NgcvResult:
    """Each block minimizes its own sub-GCV (uniform weights); the fits are then averaged."""
    lams = np.atleast_1d(np.asarray(lambda_grid, dtype=float))
    if lams.size == 0:
        raise InvalidArgumentError("lambda grid must be nonempty")
    table, chosen, fits = [], [], []
    for k, idx in enumerate(partition.blocks):
        Xk, yk = dataset.X[idx], dataset.y[idx]
        K = gram(spec, Xk)
        bs = BlockSpectrum(K, yk)
        n = idx.size
        resid = bs.fitted(lams) - yk[:, None]
        sc = gcv_ratio((resid * resid).sum(axis=0) / n, bs.traces(lams) / n)
        j = _argmin(sc, lams, [()] * lams.size)
        if j is None:
            raise NoSelectionError(f"every grid point is degenerate for the sub-GCV of block {k}")
        table.append(sc)
        chosen.append(lams[j])
        fits.append(fit_block(Xk, yk, spec, lams[j], index=k, indices=idx, K=K))
    return NgcvResult(np.array(chosen), np.array(table), tuple(fits), spec)


# ---------------------------------------------------------------------------
# profiled dGCV over the number of blocks


@dataclass(frozen=True)
class ProfileRow:
    m: int
    lam_hat: float
    dgcv_p: float
    centered: float
    true_loss: float | None = None


def profile_m(dataset: Dataset, m_list, spec: KernelSpec, lambda_grid, seed=0, threads: int = 1):
    """Minimized dGCV for each block count, plus values centered over ``m_list``."""
    m_list = [int(m) for m in m_list]
    if not m_list:
        raise InvalidArgumentError("m_list must be nonempty")
    for m in m_list:
        if not 1 <= m <= dataset.N:
            raise InvalidArgumentError(f"every m must lie in 1..N, got {m}")
    kinds = [ScoreKind("dgcv")] + ([ScoreKind("true_loss")] if dataset.f0 is not None else [])
    raw = []
    for m in m_list:
        part = random_partition(dataset.N, m, seed)
        rep = tune_grid(dataset, part, [spec], lambda_grid, kinds, threads=threads)
        lam, _, score = rep.best("dgcv")
        tl = None
        if dataset.f0 is not None:
            tl = float(rep.scores["true_loss"][rep.argmin["dgcv"]])
        raw.append((m, lam, score, tl))
    mean = float(np.mean([r[2] for r in raw]))
    return [ProfileRow(m, lam, score, score - mean, tl) for m, lam, score, tl in raw]


def state_scores(state: TuneState, dataset: Dataset, kinds) -> dict:
    """Evaluate several kinds on one state (used by the CLI ``fit`` command)."""
    out = {}
    for kind in kinds:
        kind = kind if isinstance(kind, ScoreKind) else ScoreKind.parse(kind)
        if kind.name == "dgcv":
            out[kind.label] = dgcv_score(state, dataset)
        elif kind.name == "dgcv_star":
            out[kind.label] = dgcv_star_score(state, dataset, kind.m_star)
        elif kind.name == "cp":
            out[kind.label] = cp_score(state, dataset, kind.resolve_sigma2(dataset))
        elif kind.name == "true_loss":
            out[kind.label] = true_loss(state, dataset)
        elif kind.name == "risk":
            out[kind.label] = risk_score(state, dataset, kind.resolve_sigma2(dataset))
        else:
            raise InvalidArgumentError(f"{kind.label} is not a single-state score")
    return out

