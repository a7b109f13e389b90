import numpy as np
import pytest
from scipy.integrate import trapezoid
from hypothesis import given, settings
from hypothesis import strategies as st

from dgcv.errors import InvalidArgumentError, UnsupportedOperationError
from dgcv.kernels import (
    KernelSpec,
    bernoulli_polynomial,
    eval_kernel,
    gram,
    gram_and_derivatives,
    gram_derivative,
)

from oracles import BERNOULLI, gram_loop


@pytest.mark.parametrize(
    "order,t,expected",
    [(2, 0.0, 1 / 6), (4, 0.0, -1 / 30), (4, 0.5, 7 / 240), (2, 1.0, 1 / 6), (6, 0.0, 1 / 42)],
)
def test_bernoulli_values(order, t, expected):
    assert bernoulli_polynomial(order, t) == pytest.approx(expected, rel=1e-13)


def test_bernoulli_matches_closed_forms():
    t = np.linspace(0, 1, 41)
    for order, f in BERNOULLI.items():
        np.testing.assert_allclose(bernoulli_polynomial(order, t), f(t), atol=1e-13)


def test_bernoulli_high_order_symmetry_and_integral():
    # B_n(1 - t) = B_n(t) for even n, and each B_n integrates to zero on [0, 1].
    t = np.linspace(0, 1, 2001)
    for order in range(2, 21, 2):
        b = bernoulli_polynomial(order, t)
        np.testing.assert_allclose(b, b[::-1], atol=1e-9 * max(1.0, np.abs(b).max()))
        assert abs(trapezoid(b, t)) < 1e-5 * max(1.0, np.abs(b).max())


@pytest.mark.parametrize("order,t", [(3, 0.1), (22, 0.1), (0, 0.1), (4, 1.2), (4, -0.1)])
def test_bernoulli_rejects_bad_input(order, t):
    with pytest.raises(InvalidArgumentError):
        bernoulli_polynomial(order, t)


def test_kernel_examples():
    g = KernelSpec.gaussian(2.0)
    assert eval_kernel(g, [0.3, 0.4], [0.3, 0.4]) == 1.0
    assert eval_kernel(g, [0.0, 0.0], [1.0, 1.0]) == pytest.approx(np.exp(-1), rel=1e-14)
    assert eval_kernel(KernelSpec.sobolev(1), [0.4], [0.4]) == pytest.approx(1 / 12, rel=1e-14)
    assert eval_kernel(KernelSpec.sobolev(2), [0.4], [0.4]) == pytest.approx(1 / 720, rel=1e-13)
    assert eval_kernel(KernelSpec.sobolev(2, constant=True), [0.4], [0.4]) == pytest.approx(1 + 1 / 720)
    w = KernelSpec.wendland(2)
    assert eval_kernel(w, [0.0, 0.0], [1.0, 1.0]) == 0.0
    assert eval_kernel(KernelSpec.polynomial(3), [1.0, 2.0], [0.5, -1.0]) == pytest.approx((1 - 1.5) ** 3)


def test_sobolev_wraps_fractional_part():
    # [x - z] maps into [0, 1); the kernel only depends on it.
    s = KernelSpec.sobolev(2)
    assert eval_kernel(s, [0.9], [0.1]) == pytest.approx(eval_kernel(s, [0.2], [0.0]), abs=1e-15)
    assert eval_kernel(s, [0.1], [0.9]) == pytest.approx(eval_kernel(s, [0.2], [0.0]), abs=1e-15)


@pytest.mark.parametrize(
    "spec,family,param,p",
    [
        (KernelSpec.gaussian(0.7), "gaussian", 0.7, 3),
        (KernelSpec.gaussian_sq(0.7), "gaussian_sq", 0.7, 3),
        (KernelSpec.polynomial(2), "polynomial", 2, 3),
        (KernelSpec.sobolev(1), "sobolev_periodic", 1, 1),
        (KernelSpec.sobolev(3), "sobolev_periodic", 3, 1),
        (KernelSpec.sobolev(2, constant=True), "sobolev_periodic_const", 2, 1),
        (KernelSpec.wendland(3), "wendland", 3, 3),
    ],
)
def test_gram_matches_pairwise_oracle(spec, family, param, p):
    rng = np.random.default_rng(0)
    A, B = rng.uniform(size=(9, p)), rng.uniform(size=(7, p))
    np.testing.assert_allclose(gram(spec, A, B), gram_loop(family, param, A, B), rtol=1e-12, atol=1e-14)


def test_additive_is_sum_of_children():
    rng = np.random.default_rng(1)
    A, B = rng.uniform(size=(6, 2)), rng.uniform(size=(5, 2))
    spec = KernelSpec.additive([KernelSpec.gaussian(0.3), KernelSpec.sobolev(2)])
    expected = gram(KernelSpec.gaussian(0.3), A[:, :1], B[:, :1]) + gram(KernelSpec.sobolev(2), A[:, 1:], B[:, 1:])
    np.testing.assert_allclose(gram(spec, A, B), expected, rtol=1e-14)
    assert spec.param_names == ("phi_1", "nu_2")


def test_gram_single_row_and_transpose():
    g = KernelSpec.gaussian(1.3)
    x = np.array([[0.2, 0.5]])
    assert gram(g, x).shape == (1, 1) and gram(g, x)[0, 0] == 1.0
    rng = np.random.default_rng(2)
    A, B = rng.normal(size=(8, 2)), rng.normal(size=(5, 2))
    assert np.array_equal(gram(g, A, B), gram(g, B, A).T)


def test_validation_errors():
    with pytest.raises(InvalidArgumentError):
        KernelSpec.gaussian(0.0)
    with pytest.raises(InvalidArgumentError):
        KernelSpec.polynomial(1.5)
    with pytest.raises(InvalidArgumentError):
        KernelSpec.sobolev(11)
    with pytest.raises(UnsupportedOperationError):
        KernelSpec.wendland(6)
    with pytest.raises(InvalidArgumentError):
        gram(KernelSpec.gaussian(1.0), np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(InvalidArgumentError):
        gram(KernelSpec.sobolev(2), np.array([[1.5]]))
    with pytest.raises(InvalidArgumentError):
        gram(KernelSpec.sobolev(2), np.zeros((2, 2)))
    with pytest.raises(InvalidArgumentError):
        gram(KernelSpec.wendland(2), np.zeros((2, 3)))


def test_spec_roundtrip():
    for spec in [KernelSpec.gaussian(2.5), KernelSpec.sobolev(2, constant=True), KernelSpec.wendland(4),
                 KernelSpec.additive([KernelSpec.gaussian(1.0), KernelSpec.gaussian_sq(2.0)])]:
        assert KernelSpec.from_dict(spec.to_dict()) == spec
        assert spec.with_theta(spec.theta) == spec


def test_gaussian_derivative_examples():
    g = KernelSpec.gaussian(2.0)
    x = np.array([[0.0, 0.0]])
    assert gram_derivative(g, x, x)[0, 0] == 0.0
    z = np.array([[1.0, 1.0]])
    assert gram_derivative(g, x, z)[0, 0] == pytest.approx(np.exp(-1) * 2 / 4, rel=1e-14)


def test_derivative_rejects_discrete_families():
    for spec in (KernelSpec.polynomial(2), KernelSpec.sobolev(2), KernelSpec.wendland(1)):
        with pytest.raises(UnsupportedOperationError):
            gram_derivative(spec, np.zeros((2, 1)), np.zeros((2, 1)))


def _fd_check(spec, A, B, tol=1e-5):
    K, d1, d2 = gram_and_derivatives(spec, A, B)
    theta = spec.theta
    for c in range(len(theta)):
        h = 1e-5 * max(1.0, abs(theta[c]))
        tp, tm = theta.copy(), theta.copy()
        tp[c] += h
        tm[c] -= h
        Kp, Km = gram(spec.with_theta(tp), A, B), gram(spec.with_theta(tm), A, B)
        fd1 = (Kp - Km) / (2 * h)
        assert np.max(np.abs(d1[c] - fd1)) <= tol * np.max(np.abs(fd1))
        np.testing.assert_allclose(gram_derivative(spec, A, B, 1, c), d1[c], rtol=1e-14, atol=0)
        _, dp, _ = gram_and_derivatives(spec.with_theta(tp), A, B)
        _, dm, _ = gram_and_derivatives(spec.with_theta(tm), A, B)
        for e in range(len(theta)):
            fd2 = (dp[e] - dm[e]) / (2 * h)
            exact = d2[e][c] if d2[e][c] is not None else np.zeros_like(fd2)
            scale = max(np.max(np.abs(fd2)), 1e-300)
            if np.max(np.abs(fd2)) < 1e-12:
                assert np.max(np.abs(exact)) < 1e-8
            else:
                assert np.max(np.abs(exact - fd2)) <= tol * scale


@pytest.mark.parametrize("phi", [0.05, 0.8, 3.0, 12.0])
def test_gaussian_derivatives_finite_difference(phi):
    rng = np.random.default_rng(3)
    A, B = rng.uniform(size=(10, 2)), rng.uniform(size=(6, 2))
    _fd_check(KernelSpec.gaussian(phi), A, B)
    _fd_check(KernelSpec.gaussian_sq(np.sqrt(phi)), A, B)


def test_additive_derivatives_finite_difference():
    rng = np.random.default_rng(4)
    A, B = rng.uniform(size=(8, 2)), rng.uniform(size=(5, 2))
    _fd_check(KernelSpec.additive([KernelSpec.gaussian(0.4), KernelSpec.gaussian_sq(1.3)]), A, B)


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    n=st.integers(2, 40),
    which=st.sampled_from(["gaussian", "poly", "sobolev", "sobolev_const", "wendland"]),
)
def test_symmetry_and_psd_property(seed, n, which):
    rng = np.random.default_rng(seed)
    if which in ("sobolev", "sobolev_const"):
        X = rng.uniform(size=(n, 1))
        spec = KernelSpec.sobolev(int(rng.integers(1, 11)), constant=which == "sobolev_const")
    elif which == "wendland":
        p = int(rng.integers(1, 6))
        X = rng.uniform(size=(n, p))
        spec = KernelSpec.wendland(p)
    elif which == "poly":
        X = rng.normal(size=(n, 3))
        spec = KernelSpec.polynomial(int(rng.integers(1, 4)))
    else:
        X = rng.normal(size=(n, 3))
        spec = KernelSpec.gaussian(float(rng.uniform(0.1, 10)))
    K = gram(spec, X)
    assert np.array_equal(K, K.T)
    ev = np.linalg.eigvalsh(K)
    assert ev[0] >= -1e-8 * ev[-1]
