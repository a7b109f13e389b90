"""Kernel families, Gram matrices and hyperparameter derivatives.

Supported families:

``gaussian``          exp(-||x - z||^2 / phi)
``gaussian_sq``       exp(-||x - z||^2 / phi^2)
``polynomial``        (1 + x'z)^r
``sobolev_periodic``  (-1)^(nu-1) / (2 nu)! * B_{2nu}([x - z])   on [0, 1]
``sobolev_periodic_const``  1 + the above, which adds the constant functions
``wendland``          (1 - ||x - z|| / sqrt(p))_+^5 (5 ||x - z||^2 / p + 1)
``additive``          sum_j K_j(x_j, z_j), one child kernel per coordinate

Only the Gaussian families (and additive kernels built from them) have a
continuous hyperparameter, so only they support :func:`gram_derivative`.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import comb, factorial

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InvalidArgumentError, UnsupportedOperationError

__all__ = [
    "KernelSpec",
    "bernoulli_polynomial",
    "eval_kernel",
    "gram",
    "gram_derivative",
    "gram_and_derivatives",
]

FAMILIES = ("gaussian", "gaussian_sq", "polynomial", "sobolev_periodic", "sobolev_periodic_const", "wendland",
            "additive")
SOBOLEV_FAMILIES = ("sobolev_periodic", "sobolev_periodic_const")
GAUSSIAN_FAMILIES = ("gaussian", "gaussian_sq")
WENDLAND_MAX_DIM = 5
SOBOLEV_MAX_ORDER = 10

# Bernoulli numbers B_0 .. B_20 (odd entries past B_1 vanish).
_BERNOULLI_NUMBERS = {
    0: Fraction(1),
    1: Fraction(-1, 2),
    2: Fraction(1, 6),
    4: Fraction(-1, 30),
    6: Fraction(1, 42),
    8: Fraction(-1, 30),
    10: Fraction(5, 66),
    12: Fraction(-691, 2730),
    14: Fraction(7, 6),
    16: Fraction(-3617, 510),
    18: Fraction(43867, 798),
    20: Fraction(-174611, 330),
}


def _bernoulli_coefficients(n: int) -> tuple[float, ...]:
    # B_n(t) = sum_k C(n, k) B_k t^(n-k); highest power first, for Horner.
    coefs = []
    for k in range(n + 1):
        coefs.append(float(comb(n, k) * _BERNOULLI_NUMBERS.get(k, Fraction(0))))
    return tuple(coefs)


_BERNOULLI_POLY = {n: _bernoulli_coefficients(n) for n in range(2, 2 * SOBOLEV_MAX_ORDER + 1, 2)}


def bernoulli_polynomial(order: int, t):
    """Evaluate the even-order Bernoulli polynomial ``B_order`` at ``t``.

    ``order`` must be one of 2, 4, ..., 20. ``t`` may be a scalar or an array
    with entries in [0, 1]; the return type follows ``t``.
    """
    if order not in _BERNOULLI_POLY:
        raise InvalidArgumentError(f"Bernoulli polynomial order must be even in 2..20, got {order!r}")
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise InvalidArgumentError("Bernoulli polynomial argument must lie in [0, 1]")
    out = np.zeros_like(t_arr)
    for c in _BERNOULLI_POLY[order]:
        out = out * t_arr + c
    if np.ndim(t) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus its hyperparameters.

    Use the class-method constructors rather than building instances by hand;
    they validate the parameters. ``theta`` of an additive kernel is the
    concatenation of its children's parameters.
    """

    family: str
    params: tuple[float, ...] = ()
    children: tuple["KernelSpec", ...] = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidArgumentError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        if self.family in GAUSSIAN_FAMILIES:
            (phi,) = self._expect(1)
            if not (np.isfinite(phi) and phi > 0):
                raise InvalidArgumentError(f"gaussian bandwidth phi must be > 0, got {phi!r}")
        elif self.family == "polynomial":
            (r,) = self._expect(1)
            if r != int(r) or r < 1:
                raise InvalidArgumentError(f"polynomial degree must be an integer >= 1, got {r!r}")
        elif self.family in SOBOLEV_FAMILIES:
            (nu,) = self._expect(1)
            if nu != int(nu) or not 1 <= nu <= SOBOLEV_MAX_ORDER:
                raise InvalidArgumentError(f"sobolev order nu must be an integer in 1..10, got {nu!r}")
        elif self.family == "wendland":
            (p,) = self._expect(1)
            if p != int(p) or p < 1:
                raise InvalidArgumentError(f"wendland dimension p must be a positive integer, got {p!r}")
            if p > WENDLAND_MAX_DIM:
                raise UnsupportedOperationError(f"wendland kernel is only positive definite for p <= 5, got {p}")
        else:
            if self.params:
                raise InvalidArgumentError("additive kernels carry their parameters in children")
            if not self.children:
                raise InvalidArgumentError("additive kernel needs at least one child")
            for child in self.children:
                if child.family == "additive":
                    raise InvalidArgumentError("additive kernels cannot be nested")

    def _expect(self, count):
        if len(self.params) != count or self.children:
            raise InvalidArgumentError(f"{self.family} kernel takes exactly {count} parameter(s)")
        return self.params

    # constructors ---------------------------------------------------------

    @classmethod
    def gaussian(cls, phi: float) -> "KernelSpec":
        return cls("gaussian", (float(phi),))

    @classmethod
    def gaussian_sq(cls, phi: float) -> "KernelSpec":
        return cls("gaussian_sq", (float(phi),))

    @classmethod
    def polynomial(cls, degree: int) -> "KernelSpec":
        return cls("polynomial", (float(degree),))

    @classmethod
    def sobolev(cls, nu: int, constant: bool = False) -> "KernelSpec":
        """Periodic Sobolev kernel; ``constant=True`` adds 1 so the space contains the constants."""
        return cls("sobolev_periodic_const" if constant else "sobolev_periodic", (float(nu),))

    @classmethod
    def wendland(cls, p: int) -> "KernelSpec":
        return cls("wendland", (float(p),))

    @classmethod
    def additive(cls, children) -> "KernelSpec":
        return cls("additive", (), tuple(children))

    # parameter views ------------------------------------------------------

    @property
    def theta(self) -> np.ndarray:
        if self.family == "additive":
            return np.concatenate([c.theta for c in self.children])
        return np.asarray(self.params, dtype=float)

    @property
    def param_names(self) -> tuple[str, ...]:
        base = {
            "gaussian": "phi",
            "gaussian_sq": "phi",
            "polynomial": "degree",
            "sobolev_periodic": "nu",
            "sobolev_periodic_const": "nu",
            "wendland": "p",
        }
        if self.family == "additive":
            names = []
            for j, child in enumerate(self.children, start=1):
                names.extend(f"{n}_{j}" for n in child.param_names)
            return tuple(names)
        return (base[self.family],)

    @property
    def differentiable(self) -> bool:
        if self.family == "additive":
            return all(c.family in GAUSSIAN_FAMILIES for c in self.children)
        return self.family in GAUSSIAN_FAMILIES

    @property
    def n_theta(self) -> int:
        return len(self.theta)

    def with_theta(self, theta) -> "KernelSpec":
        theta = [float(v) for v in np.atleast_1d(theta)]
        if len(theta) != self.n_theta:
            raise InvalidArgumentError(f"expected {self.n_theta} hyperparameters, got {len(theta)}")
        if self.family == "additive":
            children, pos = [], 0
            for child in self.children:
                k = child.n_theta
                children.append(child.with_theta(theta[pos:pos + k]))
                pos += k
            return KernelSpec.additive(children)
        return KernelSpec(self.family, tuple(theta))

    def to_dict(self) -> dict:
        if self.family == "additive":
            return {"family": "additive", "children": [c.to_dict() for c in self.children]}
        return {"family": self.family, self.param_names[0]: self.params[0]}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        d = dict(d)
        family = d.pop("family", None)
        if family == "additive":
            return cls.additive([cls.from_dict(c) for c in d.get("children", [])])
        names = {
            "gaussian": "phi",
            "gaussian_sq": "phi",
            "polynomial": "degree",
            "sobolev_periodic": "nu",
            "sobolev_periodic_const": "nu",
            "wendland": "p",
        }
        if family not in names:
            raise InvalidArgumentError(f"unknown kernel family {family!r}")
        if names[family] not in d:
            raise InvalidArgumentError(f"kernel family {family} requires parameter {names[family]!r}")
        return cls(family, (float(d[names[family]]),))

    def label(self) -> str:
        if self.family == "additive":
            return "additive(" + ",".join(c.label() for c in self.children) + ")"
        return f"{self.family}({self.param_names[0]}={self.params[0]:g})"


# ---------------------------------------------------------------------------
# evaluation


def _as_2d(A, name):
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2:
        raise InvalidArgumentError(f"{name} must be a matrix, got shape {A.shape}")
    return A


def _check_dims(spec, A, B):
    if A.shape[1] != B.shape[1]:
        raise InvalidArgumentError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]} columns")
    p = A.shape[1]
    if spec.family == "additive":
        if len(spec.children) != p:
            raise InvalidArgumentError(f"additive kernel has {len(spec.children)} children but data has p = {p}")
        for j, child in enumerate(spec.children):
            _check_dims(child, A[:, j:j + 1], B[:, j:j + 1])
    if spec.family == "wendland" and int(spec.params[0]) != p:
        raise InvalidArgumentError(f"wendland kernel built for p = {int(spec.params[0])} but data has p = {p}")
    if spec.family in SOBOLEV_FAMILIES:
        if p != 1:
            raise InvalidArgumentError(f"{spec.family} kernel is univariate")
        for M in (A, B):
            if M.size and (M.min() < 0.0 or M.max() > 1.0):
                raise InvalidArgumentError(f"{spec.family} inputs must lie in [0, 1]")


def _inner(A, B):
    # Elementwise products summed in coordinate order, so K(x, z) == K(z, x) bit for bit.
    out = np.zeros((A.shape[0], B.shape[0]))
    for j in range(A.shape[1]):
        out += np.multiply.outer(A[:, j], B[:, j])
    return out


def _gram(spec, A, B):
    fam = spec.family
    if fam == "gaussian":
        return np.exp(-cdist(A, B, "sqeuclidean") / spec.params[0])
    if fam == "gaussian_sq":
        return np.exp(-cdist(A, B, "sqeuclidean") / spec.params[0] ** 2)
    if fam == "polynomial":
        return (1.0 + _inner(A, B)) ** int(spec.params[0])
    if fam in SOBOLEV_FAMILIES:
        nu = int(spec.params[0])
        # [x - z] is either |x - z| or 1 - |x - z|, and B_{2nu}(1 - t) = B_{2nu}(t).
        t = np.abs(np.subtract.outer(A[:, 0], B[:, 0]))
        scale = (-1.0) ** (nu - 1) / factorial(2 * nu)
        K = scale * bernoulli_polynomial(2 * nu, t)
        return K + 1.0 if fam == "sobolev_periodic_const" else K
    if fam == "wendland":
        p = spec.params[0]
        r = cdist(A, B, "euclidean") / np.sqrt(p)
        return np.maximum(1.0 - r, 0.0) ** 5 * (5.0 * r * r + 1.0)
    out = np.zeros((A.shape[0], B.shape[0]))
    for j, child in enumerate(spec.children):
        out += _gram(child, A[:, j:j + 1], B[:, j:j + 1])
    return out


def gram(spec: KernelSpec, A, B=None) -> np.ndarray:
    """Gram matrix ``[K(a_i, b_j)]``; ``B`` defaults to ``A``."""
    A = _as_2d(A, "A")
    B = A if B is None else _as_2d(B, "B")
    _check_dims(spec, A, B)
    return _gram(spec, A, B)


def eval_kernel(spec: KernelSpec, x, z) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if x.ndim != 1 or z.ndim != 1 or x.shape != z.shape:
        raise InvalidArgumentError(f"x and z must be vectors of equal length, got {x.shape} and {z.shape}")
    return float(gram(spec, x[None, :], z[None, :])[0, 0])


# ---------------------------------------------------------------------------
# derivatives


def _gaussian_terms(family, phi, d2, K):
    """First and second derivative of a Gaussian kernel in its bandwidth."""
    if family == "gaussian":
        d1 = K * d2 / phi**2
        dd = K * (d2 * d2 / phi**4 - 2.0 * d2 / phi**3)
    else:
        d1 = K * 2.0 * d2 / phi**3
        dd = K * (4.0 * d2 * d2 / phi**6 - 6.0 * d2 / phi**4)
    return d1, dd


def _gaussian_parts(spec, A, B):
    """Return (K, [dK_c], [d2K_cc]) for each differentiable coordinate block."""
    if spec.family in GAUSSIAN_FAMILIES:
        d2 = cdist(A, B, "sqeuclidean")
        K = _gram(spec, A, B)
        d1, dd = _gaussian_terms(spec.family, spec.params[0], d2, K)
        return K, [d1], [dd]
    K = np.zeros((A.shape[0], B.shape[0]))
    firsts, seconds = [], []
    for j, child in enumerate(spec.children):
        Kj, d1, dd = _gaussian_parts(child, A[:, j:j + 1], B[:, j:j + 1])
        K += Kj
        firsts += d1
        seconds += dd
    return K, firsts, seconds


def _require_differentiable(spec):
    if not spec.differentiable:
        raise UnsupportedOperationError(
            f"{spec.family} kernel has no continuous hyperparameter to differentiate"
        )


def gram_derivative(spec: KernelSpec, A, B=None, order: int = 1, components=0) -> np.ndarray:
    """Element-wise first or second derivative of the Gram matrix in ``theta``.

    ``components`` is an index for ``order=1`` and an index pair for
    ``order=2``. Mixed derivatives across different additive children vanish.
    """
    _require_differentiable(spec)
    A = _as_2d(A, "A")
    B = A if B is None else _as_2d(B, "B")
    _check_dims(spec, A, B)
    D = spec.n_theta
    if order == 1:
        c = int(components)
        if not 0 <= c < D:
            raise InvalidArgumentError(f"component {c} out of range for {D} hyperparameters")
        return _gaussian_parts(spec, A, B)[1][c]
    if order == 2:
        c1, c2 = (int(c) for c in components)
        if not (0 <= c1 < D and 0 <= c2 < D):
            raise InvalidArgumentError(f"components {components} out of range for {D} hyperparameters")
        if c1 != c2:
            return np.zeros((A.shape[0], B.shape[0]))
        return _gaussian_parts(spec, A, B)[2][c1]
    raise InvalidArgumentError(f"derivative order must be 1 or 2, got {order!r}")


def gram_and_derivatives(spec: KernelSpec, A, B=None):
    """Gram matrix with all first and second ``theta`` derivatives.

    Returns ``(K, dK, d2K)`` where ``dK[c]`` is ``dK/dtheta_c`` and
    ``d2K[c1][c2]`` the second derivative (``None`` when identically zero).
    Non-differentiable families return empty derivative lists.
    """
    A = _as_2d(A, "A")
    B = A if B is None else _as_2d(B, "B")
    _check_dims(spec, A, B)
    if not spec.differentiable:
        return _gram(spec, A, B), [], []
    K, firsts, diag = _gaussian_parts(spec, A, B)
    D = len(firsts)
    seconds = [[diag[c] if c == d else None for d in range(D)] for c in range(D)]
    return K, firsts, seconds
