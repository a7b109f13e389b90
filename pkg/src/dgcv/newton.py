"""Newton-type minimization of log dGCV over eta = log(lambda) and kernel hyperparameters.

Writing ``dGCV = alpha / gamma`` with ``alpha = N^{-1} r'W r`` (``r = y - fbar``)
and ``gamma = (1 - t)^2``, ``t = (N m)^{-1} sum_k tr(A_kk W_k)``, every
derivative reduces to derivatives of the block coefficients
``beta_k = M_k^{-1} y_k`` (``M_k = K_kk + n_k e^eta I``) and of
``tr(A_kk W_k) = tr(W_k) - n_k e^eta tr(M_k^{-1} W_k)``. Both are applied as
products with ``M_k^{-1}`` taken from the block Cholesky factor, so one
derivative evaluation costs the same order as one dGCV evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .block_krr import TuneState, fit_state
from .datasets import Dataset, Partition
from .errors import DgcvError, InvalidArgumentError, UnsupportedOperationError
from .kernels import KernelSpec, gram, gram_and_derivatives
from .tuning import dgcv_score

__all__ = [
    "NewtonOptions",
    "OptimResult",
    "alpha_gamma",
    "log_dgcv_derivatives",
    "newton_minimize",
    "newton_optimize",
]


def alpha_gamma(state: TuneState, dataset: Dataset):
    """Numerator and denominator of dGCV."""
    idx = np.flatnonzero(state.weights)
    r = dataset.y[idx] - state.fbar[idx]
    alpha = float(r @ (state.weights[idx] * r)) / dataset.N
    gamma = (1.0 - state.trace_stat) ** 2
    return alpha, gamma


def _block_terms(fit, spec, Xe, w_k, lam, n_theta, order):
    """Derivatives of one block's predictions on ``Xe`` and of ``h = n lam tr(M^{-1} W_k)``."""
    P = 1 + n_theta
    n = fit.n
    nl = n * lam
    if n_theta:
        _, dK, d2K = gram_and_derivatives(spec, fit.X)
        G, dG, d2G = gram_and_derivatives(spec, Xe, fit.X)
    else:
        dK = d2K = dG = d2G = []
        G = gram(spec, Xe, fit.X)
    Minv = fit.solve(np.eye(n))
    beta = fit.beta

    # M_a for a = 0 (eta) is nl * I; for a = c + 1 it is dK[c].
    def M_apply(a, v):
        return nl * v if a == 0 else dK[a - 1] @ v

    def G_apply(a, v):
        return 0.0 if a == 0 else dG[a - 1] @ v

    def M2(a, b):
        if a == 0 and b == 0:
            return "eta"
        if a == 0 or b == 0:
            return None
        return d2K[a - 1][b - 1]

    def G2(a, b):
        if a == 0 or b == 0:
            return None
        return d2G[a - 1][b - 1]

    beta_a = [-Minv @ M_apply(a, beta) for a in range(P)]
    f = G @ beta
    f_a = [G_apply(a, beta) + G @ beta_a[a] for a in range(P)]

    diag_minv = np.diag(Minv)
    T = float(diag_minv @ w_k)
    Q = [nl * Minv if a == 0 else Minv @ dK[a - 1] for a in range(P)]
    # T_a = -tr(Minv M_a Minv W)
    T_a = np.array([-float(np.einsum("ij,ji->i", Q[a], Minv) @ w_k) for a in range(P)])

    h_a = nl * T_a.copy()
    h_a[0] += nl * T
    out = {"f": f, "f_a": f_a, "h_a": h_a}
    if order < 2:
        return out

    f_ab = [[None] * P for _ in range(P)]
    T_ab = np.zeros((P, P))
    for a in range(P):
        for b in range(a, P):
            m2 = M2(a, b)
            rhs = M_apply(a, beta_a[b]) + M_apply(b, beta_a[a])
            if isinstance(m2, str):
                rhs = rhs + nl * beta
            elif m2 is not None:
                rhs = rhs + m2 @ beta
            beta_ab = -Minv @ rhs
            val = G @ beta_ab + G_apply(a, beta_a[b]) + G_apply(b, beta_a[a])
            g2 = G2(a, b)
            if g2 is not None:
                val = val + g2 @ beta
            f_ab[a][b] = f_ab[b][a] = val

            QQ = Q[a] @ Q[b] + Q[b] @ Q[a]
            t = float(np.einsum("ij,ji->i", QQ, Minv) @ w_k)
            if isinstance(m2, str):
                t -= float(np.einsum("ij,ji->i", nl * Minv, Minv) @ w_k)
            elif m2 is not None:
                t -= float(np.einsum("ij,ji->i", Minv @ m2, Minv) @ w_k)
            T_ab[a, b] = T_ab[b, a] = t

    h_ab = nl * T_ab
    h_ab[0, 0] += nl * (T + 2.0 * T_a[0])
    for c in range(1, P):
        h_ab[0, c] += nl * T_a[c]
        h_ab[c, 0] = h_ab[0, c]
    out["f_ab"] = f_ab
    out["h_ab"] = h_ab
    return out


def log_dgcv_derivatives(state: TuneState, dataset: Dataset, order: int = 2, with_theta: bool = True):
    """Gradient (and Hessian) of ``log dGCV`` in ``(eta, theta_1, ..., theta_D)``.

    ``theta`` derivatives are in the raw kernel parameters. With
    ``with_theta=False`` only the ``eta`` coordinate is returned. Returns
    ``(value, grad)`` or ``(value, grad, hess)`` where ``value`` is log dGCV.
    """
    if order not in (1, 2):
        raise InvalidArgumentError("order must be 1 or 2")
    lam = state.lam
    if not lam > 0:
        raise InvalidArgumentError("derivatives in eta = log(lambda) need lambda > 0")
    spec = state.spec
    if with_theta and not spec.differentiable:
        raise UnsupportedOperationError(f"{spec.family} kernel hyperparameters are discrete")
    n_theta = spec.n_theta if with_theta else 0
    N, m = dataset.N, state.m
    w = state.weights
    idx = np.flatnonzero(w)
    Xe = dataset.X[idx]
    we = w[idx]
    P = 1 + n_theta

    fbar = np.zeros(idx.size)
    fbar_a = np.zeros((P, idx.size))
    fbar_ab = np.zeros((P, P, idx.size))
    h_a = np.zeros(P)
    h_ab = np.zeros((P, P))
    for fit in state.fits:
        terms = _block_terms(fit, spec, Xe, w[fit.indices], lam, n_theta, order)
        fbar += terms["f"]
        fbar_a += np.array(terms["f_a"])
        h_a += terms["h_a"]
        if order == 2:
            fbar_ab += np.array([[terms["f_ab"][a][b] for b in range(P)] for a in range(P)])
            h_ab += terms["h_ab"]
    fbar /= m
    fbar_a /= m
    fbar_ab /= m

    r = dataset.y[idx] - fbar
    alpha = float(r @ (we * r)) / N
    t = state.trace_stat
    one_t = 1.0 - t
    gamma = one_t**2
    t_a = -h_a / (N * m)
    alpha_a = -2.0 / N * (fbar_a @ (we * r))
    gamma_a = -2.0 * one_t * t_a
    value = math.log(alpha) - math.log(gamma)
    grad = alpha_a / alpha - gamma_a / gamma
    if order == 1:
        return value, grad

    t_ab = -h_ab / (N * m)
    wf = fbar_a * we
    alpha_ab = 2.0 / N * (wf @ fbar_a.T - np.einsum("abi,i->ab", fbar_ab, we * r))
    gamma_ab = 2.0 * np.outer(t_a, t_a) - 2.0 * one_t * t_ab
    hess = (
        -np.outer(alpha_a, alpha_a) / alpha**2
        + alpha_ab / alpha
        + np.outer(gamma_a, gamma_a) / gamma**2
        - gamma_ab / gamma
    )
    return value, grad, 0.5 * (hess + hess.T)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class NewtonOptions:
    max_iter: int = 50
    grad_tol: float = 1e-6
    backtrack: float = 0.5
    max_halvings: int = 30
    max_step: float = 5.0  # cap on the step's infinity norm in (eta, log theta)


@dataclass
class OptimResult:
    eta_hat: float
    theta_hat: np.ndarray
    score: float
    grad_norm: float
    iterations: int
    status: str  # converged | max_iter | line_search_failed
    history: list = field(default_factory=list)

    @property
    def lam_hat(self) -> float:
        return math.exp(self.eta_hat)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _make_pd(H):
    try:
        np.linalg.cholesky(H)
        return H
    except np.linalg.LinAlgError:
        pass
    norm = np.linalg.norm(H)
    tau = 1e-6 * norm if norm > 0 else 1e-6
    eye = np.eye(H.shape[0])
    while True:
        try:
            np.linalg.cholesky(H + tau * eye)
            return H + tau * eye
        except np.linalg.LinAlgError:
            tau *= 2.0


def newton_minimize(fgh, fval, z0, opts: NewtonOptions | None = None, callback=None):
    """Damped Newton with Hessian modification and backtracking on a generic objective.

    ``fgh(z)`` returns ``(value, grad, hess)``; ``fval(z)`` returns the value
    alone (``inf`` where undefined). Returns ``(z, value, grad, iters, status)``.
    """
    opts = opts or NewtonOptions()
    z = np.atleast_1d(np.asarray(z0, dtype=float)).copy()
    val, g, H = fgh(z)
    status = "max_iter"
    it = 0
    if callback:
        callback(it, z, val, g, 0.0)
    for it in range(1, opts.max_iter + 1):
        if np.max(np.abs(g)) <= opts.grad_tol:
            status = "converged"
            it -= 1
            break
        step = -np.linalg.solve(_make_pd(H), g)
        big = np.max(np.abs(step))
        if big > opts.max_step:
            step *= opts.max_step / big
        t = 1.0
        accepted = False
        for _ in range(opts.max_halvings + 1):
            z_new = z + t * step
            v_new = fval(z_new)
            if np.isfinite(v_new) and v_new < val:
                accepted = True
                break
            t *= opts.backtrack
        if not accepted:
            status = "line_search_failed"
            break
        z = z_new
        val, g, H = fgh(z)
        if callback:
            callback(it, z, val, g, t * float(np.max(np.abs(step))))
    else:
        if np.max(np.abs(g)) <= opts.grad_tol:
            status = "converged"
    return z, val, g, it, status


def newton_optimize(
    dataset: Dataset,
    partition: Partition,
    spec: KernelSpec,
    init_eta: float,
    init_theta=None,
    opts: NewtonOptions | None = None,
    weights=None,
    threads: int = 1,
) -> OptimResult:
    """Minimize log dGCV jointly over eta and (log of) the kernel bandwidths.

    Families without a continuous hyperparameter are tuned over eta only.
    Positive kernel parameters are optimized on the log scale; reported
    gradient norms refer to the ``(eta, log theta)`` coordinates.
    """
    opts = opts or NewtonOptions()
    use_theta = spec.differentiable
    theta0 = spec.theta if init_theta is None else np.atleast_1d(np.asarray(init_theta, dtype=float))
    if use_theta and np.any(theta0 <= 0):
        raise InvalidArgumentError("initial kernel parameters must be positive")
    D = len(theta0) if use_theta else 0

    def unpack(z):
        lam = math.exp(z[0])
        s = spec.with_theta(np.exp(z[1:])) if use_theta else spec
        return lam, s

    def state_at(z):
        lam, s = unpack(z)
        return fit_state(dataset, partition, s, lam, weights, threads=threads)

    def fval(z):
        if not np.all(np.isfinite(z)) or abs(z[0]) > 700:
            return np.inf
        try:
            st = state_at(z)
        except DgcvError:
            return np.inf
        score = dgcv_score(st, dataset)
        return math.log(score) if score > 0 and np.isfinite(score) else np.inf

    def fgh(z):
        st = state_at(z)
        value, g, H = log_dgcv_derivatives(st, dataset, 2, with_theta=use_theta)
        if D:
            th = np.exp(z[1:])
            # chain rule for theta = exp(u)
            g_u = g[1:] * th
            H = H.copy()
            H[1:, 1:] = H[1:, 1:] * np.outer(th, th) + np.diag(g_u)
            H[0, 1:] *= th
            H[1:, 0] *= th
            g = np.concatenate([[g[0]], g_u])
        return value, g, H

    history = []

    def record(it, z, val, g, step):
        row = {"iter": it, "eta": float(z[0])}
        names = spec.param_names if D else ()
        for name, v in zip(names, np.exp(z[1:])):
            row[name] = float(v)
        row.update(score=math.exp(val), grad_norm=float(np.max(np.abs(g))), step=step)
        history.append(row)

    z0 = np.concatenate([[float(init_eta)], np.log(theta0)]) if D else np.array([float(init_eta)])
    z, val, g, iters, status = newton_minimize(fgh, fval, z0, opts, record)
    lam, s = unpack(z)
    return OptimResult(
        eta_hat=float(z[0]),
        theta_hat=s.theta,
        score=math.exp(val),
        grad_norm=float(np.max(np.abs(g))),
        iterations=iters,
        status=status,
        history=history,
    )
