import numpy as np
import pytest

from dgcv.block_krr import (
    BlockSpectrum,
    dense_averaged_hat,
    fit_block,
    fit_state,
    predict_averaged,
    predict_block,
    sweep_lambda,
)
from dgcv.datasets import Dataset, Partition, make_weights, random_partition, simulate_beta_mixture, WeightScheme
from dgcv.errors import InvalidArgumentError, ResourceLimitError, SingularSystemError
from dgcv.kernels import KernelSpec, gram

from oracles import block_traces, dense_hat


def _instance(N=24, m=3, seed=0, phi=0.3):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(N, 2))
    y = np.sin(4 * X[:, 0]) + X[:, 1] + 0.1 * rng.standard_normal(N)
    return Dataset(X, y), random_partition(N, m, seed), KernelSpec.gaussian(phi)


def test_scalar_fit():
    fit = fit_block(np.array([[0.3]]), np.array([2.0]), KernelSpec.gaussian(1.0), 0.5)
    assert fit.beta[0] == pytest.approx(4 / 3, rel=1e-14)
    assert fit.trace_ww == pytest.approx(2 / 3, rel=1e-14)
    assert fit.hat_diag[0] == pytest.approx(2 / 3, rel=1e-14)


def test_interpolation_at_zero_lambda():
    ds, _, spec = _instance(N=10, phi=0.05)
    fit = fit_block(ds.X, ds.y, spec, 0.0)
    np.testing.assert_allclose(predict_block(fit, ds.X), ds.y, atol=1e-8)
    assert fit.trace == pytest.approx(10, rel=1e-8)


def test_huge_lambda_shrinks_to_zero():
    ds, _, spec = _instance(N=10)
    fit = fit_block(ds.X, ds.y, spec, 1e12)
    assert np.linalg.norm(fit.beta) < 1e-11
    assert np.max(np.abs(predict_block(fit, ds.X))) < 1e-10


def test_singular_system_error():
    X = np.zeros((3, 1))  # identical points give a rank-one Gram matrix
    with pytest.raises(SingularSystemError, match="lambda > 0"):
        fit_block(X, np.array([1.0, 2.0, 3.0]), KernelSpec.gaussian(1.0), 0.0)


def test_predict_block_matches_dense_hat():
    ds, part, spec = _instance(N=30, m=2, seed=3)
    lam = 1e-3
    K = gram(spec, ds.X)
    k, l = part.blocks
    fit = fit_block(ds.X[k], ds.y[k], spec, lam)
    Akl = K[np.ix_(k, l)].T @ np.linalg.inv(K[np.ix_(k, k)] + len(k) * lam * np.eye(len(k)))
    np.testing.assert_allclose(predict_block(fit, ds.X[l]), Akl @ ds.y[k], rtol=1e-10, atol=1e-12)


def test_predict_averaged_examples():
    ds, part, spec = _instance()
    st = fit_state(ds, part, spec, 1e-3)
    A = dense_hat(gram(spec, ds.X), 1e-3, part.blocks)
    np.testing.assert_allclose(st.fbar, A @ ds.y, rtol=1e-10, atol=1e-12)
    one = fit_state(ds, random_partition(ds.N, 1, 0), spec, 1e-3)
    np.testing.assert_array_equal(predict_averaged(one.fits, ds.X), predict_block(one.fits[0], ds.X))
    with pytest.raises(InvalidArgumentError):
        predict_averaged([], ds.X)


def test_identical_blocks_average_equals_single():
    X = np.linspace(0, 1, 6)[:, None]
    y = np.cos(3 * X[:, 0])
    ds = Dataset(np.vstack([X, X]), np.concatenate([y, y]))
    part = Partition((np.arange(6), np.arange(6, 12)))
    st = fit_state(ds, part, KernelSpec.gaussian(0.2), 1e-2)
    Xq = np.random.default_rng(0).uniform(size=(5, 1))
    np.testing.assert_allclose(predict_averaged(st.fits, Xq), predict_block(st.fits[0], Xq), rtol=1e-13)


def test_dense_hat_examples():
    ds, _, spec = _instance(N=20)
    part1 = random_partition(20, 1, 0)
    st = fit_state(ds, part1, spec, 1e-2)
    K = gram(spec, ds.X)
    expected = K @ np.linalg.inv(K + 20 * 1e-2 * np.eye(20))
    np.testing.assert_allclose(dense_averaged_hat(st.fits, ds, part1), expected, rtol=1e-9, atol=1e-12)
    st0 = fit_state(ds, part1, KernelSpec.gaussian(0.01), 0.0)
    np.testing.assert_allclose(dense_averaged_hat(st0.fits, ds, part1), np.eye(20), atol=1e-7)
    with pytest.raises(ResourceLimitError):
        dense_averaged_hat(st.fits, ds, part1, cap=10)


@pytest.mark.parametrize("m", [1, 2, 4, 8])
def test_blockwise_vs_dense_and_trace_identity(m):
    ds, part, spec = _instance(N=64, m=m, seed=m)
    w = make_weights(WeightScheme("subset", max(1, m // 2)), part) if m > 1 else np.ones(64)
    lam = 3e-3
    st = fit_state(ds, part, spec, lam, w)
    A = dense_hat(gram(spec, ds.X), lam, part.blocks)
    np.testing.assert_allclose(st.fbar, A @ ds.y, rtol=1e-8, atol=1e-10)
    blockwise = sum(f.trace_ww for f in st.fits) / m
    assert blockwise == pytest.approx(np.trace(A @ np.diag(w)), rel=1e-10)
    np.testing.assert_allclose([f.trace_ww for f in st.fits], block_traces(gram(spec, ds.X), lam, part.blocks, w),
                               rtol=1e-10)
    Adense = dense_averaged_hat(st.fits, ds, part)
    np.testing.assert_allclose(Adense, A, rtol=1e-8, atol=1e-11)


def test_solve_residual_and_trace_bounds():
    for seed in range(5):
        ds, part, spec = _instance(N=40, m=2, seed=seed)
        for lam in (1e-6, 1e-3, 1.0):
            for f in fit_state(ds, part, spec, lam).fits:
                M = gram(spec, f.X) + f.n * lam * np.eye(f.n)
                assert np.linalg.norm(M @ f.beta - f.y) <= 1e-8 * np.linalg.norm(f.y)
                assert 0 <= f.trace <= f.n


def test_trace_strictly_decreasing_in_lambda():
    ds, _, spec = _instance(N=30)
    lams = np.logspace(-6, 1, 15)
    tr = [fit_block(ds.X, ds.y, spec, lam).trace for lam in lams]
    assert np.all(np.diff(tr) < 0)


def test_spectral_sweep_matches_cholesky_path():
    ds = simulate_beta_mixture(120, 1.0, seed=3)
    part = random_partition(120, 4, 1)
    spec = KernelSpec.sobolev(2, constant=True)
    w = make_weights(WeightScheme("subset", 3), part)
    lams = np.exp(np.linspace(-16, -6, 6))
    sw = sweep_lambda(ds, part, spec, lams, w, with_truth=True, with_variance=True, with_fitted=True)
    for j, lam in enumerate(lams):
        st = fit_state(ds, part, spec, lam, w)
        # both paths lose about eps * cond(M_k); cond reaches ~1e7 at the smallest lambda
        cond = max(np.linalg.cond(gram(spec, f.X) + f.n * lam * np.eye(f.n)) for f in st.fits)
        tol = max(1e-10, 100 * np.finfo(float).eps * cond)
        np.testing.assert_allclose(sw.fbar[:, j], st.fbar, rtol=tol, atol=tol)
        np.testing.assert_allclose(sw.trace_w[:, j], [f.trace_ww for f in st.fits], rtol=tol)
        np.testing.assert_allclose(sw.trace[:, j], [f.trace for f in st.fits], rtol=tol)
        A = dense_averaged_hat(st.fits, ds, part)
        np.testing.assert_allclose(sw.ef[:, j], A @ ds.f0, rtol=tol, atol=tol)
        np.testing.assert_allclose(sw.var_unit[:, j], np.sum(A * A, axis=1), rtol=tol, atol=tol)


def test_block_spectrum_rejects_singular_grid():
    K = np.ones((3, 3))
    with pytest.raises(SingularSystemError):
        BlockSpectrum(K, np.ones(3)).shifted(np.array([0.0]))


def test_thread_count_does_not_change_results():
    ds, part, spec = _instance(N=60, m=5)
    a = fit_state(ds, part, spec, 1e-3, threads=1)
    b = fit_state(ds, part, spec, 1e-3, threads=4)
    assert np.array_equal(a.fbar, b.fbar)
    assert [f.trace_ww for f in a.fits] == [f.trace_ww for f in b.fits]
