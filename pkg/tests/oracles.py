"""Independent reference computations used by the tests.

These deliberately avoid the package's solvers: kernels are evaluated pair
by pair from their textbook formulas and every hat matrix is formed with an
explicit dense inverse.
"""

from math import factorial

import numpy as np

# B_{2nu}(t) for small orders, written out by hand.
BERNOULLI = {
    2: lambda t: t**2 - t + 1 / 6,
    4: lambda t: t**4 - 2 * t**3 + t**2 - 1 / 30,
    6: lambda t: t**6 - 3 * t**5 + 2.5 * t**4 - 0.5 * t**2 + 1 / 42,
}


def kernel_value(family, param, x, z):
    x, z = np.atleast_1d(np.asarray(x, float)), np.atleast_1d(np.asarray(z, float))
    d2 = float(np.sum((x - z) ** 2))
    if family == "gaussian":
        return np.exp(-d2 / param)
    if family == "gaussian_sq":
        return np.exp(-d2 / param**2)
    if family == "polynomial":
        return (1.0 + float(x @ z)) ** int(param)
    if family in ("sobolev_periodic", "sobolev_periodic_const"):
        nu = int(param)
        t = (x[0] - z[0]) - np.floor(x[0] - z[0])
        k = (-1) ** (nu - 1) / factorial(2 * nu) * BERNOULLI[2 * nu](t)
        return k + (1.0 if family.endswith("const") else 0.0)
    if family == "wendland":
        p = len(x)
        r = np.sqrt(d2) / np.sqrt(p)
        return max(1.0 - r, 0.0) ** 5 * (5 * r * r + 1.0)
    raise ValueError(family)


def gram_loop(family, param, A, B):
    return np.array([[kernel_value(family, param, a, b) for b in B] for a in A])


def dense_hat(K, lam, blocks):
    """Averaged hat matrix from explicit inverses: block (l, k) = K_kl' (K_kk + n_k lam I)^{-1} / m."""
    N = K.shape[0]
    m = len(blocks)
    A = np.zeros((N, N))
    for bk in blocks:
        n = len(bk)
        inv = np.linalg.inv(K[np.ix_(bk, bk)] + n * lam * np.eye(n))
        A[:, bk] = K[:, bk] @ inv / m
    return A


def block_traces(K, lam, blocks, w):
    out = []
    for bk in blocks:
        n = len(bk)
        Akk = K[np.ix_(bk, bk)] @ np.linalg.inv(K[np.ix_(bk, bk)] + n * lam * np.eye(n))
        out.append(float(np.trace(Akk @ np.diag(w[bk]))))
    return out


def classical_gcv(K, lam, y):
    N = len(y)
    A = K @ np.linalg.inv(K + N * lam * np.eye(N))
    r = y - A @ y
    return (r @ r / N) / (1 - np.trace(A) / N) ** 2


def dense_scores(K, lam, blocks, y, f0, w, sigma2):
    """dGCV, Cp and conditional risk from the dense averaged hat matrix."""
    N = len(y)
    m = len(blocks)
    A = dense_hat(K, lam, blocks)
    W = np.diag(w)
    r = y - A @ y
    wrss = r @ W @ r / N
    tr = np.trace(A @ W) / N
    dgcv = wrss / (1 - tr) ** 2
    cp = wrss + 2 * sigma2 * tr
    I = np.eye(N)
    risk = f0 @ (I - A).T @ W @ (I - A) @ f0 / N + sigma2 * np.trace(A.T @ W @ A) / N
    return {"dgcv": dgcv, "cp": cp, "risk": risk, "trace": np.trace(A @ W), "A": A, "m": m}
