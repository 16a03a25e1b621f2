import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abat.symlinalg import ConvergenceError, inv_sqrt, mean_covariance, spatial_covariance, sym_eig, symmetrize


def random_spd(rng, n, cond=10.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    vals = np.geomspace(1.0, cond, n)
    return symmetrize((q * vals) @ q.T)


def test_diagonal_and_two_by_two_examples():
    vals, _ = sym_eig(np.diag([4.0, 9.0]))
    np.testing.assert_allclose(vals, [9.0, 4.0])
    vals, vecs = sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(vals, [3.0, 1.0], atol=1e-14)
    np.testing.assert_allclose(np.abs(vecs[:, 0]), [2**-0.5, 2**-0.5], atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_jacobi_agrees_with_lapack(n, seed):
    m = random_spd(np.random.default_rng(seed), n, cond=1e3)
    vals, vecs = sym_eig(m)
    ref = np.linalg.eigvalsh(m)[::-1]
    np.testing.assert_allclose(vals, ref, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(vecs.T @ vecs, np.eye(n), atol=1e-12)
    np.testing.assert_allclose((vecs * vals) @ vecs.T, m, atol=1e-11)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_inverse_square_root_whitens(n, seed):
    m = random_spd(np.random.default_rng(seed), n, cond=100.0)
    r = inv_sqrt(m)
    np.testing.assert_array_equal(r, r.T)
    np.testing.assert_allclose(r @ m @ r, np.eye(n), atol=1e-10)


def test_floor_clamps_rank_deficient_input():
    np.testing.assert_allclose(inv_sqrt(np.diag([4.0, 0.0]), floor=1e-8), np.diag([0.5, 1e4]))
    assert np.all(np.isfinite(inv_sqrt(np.zeros((3, 3)))))
    with pytest.raises(ValueError):
        inv_sqrt(np.eye(2), floor=0.0)


def test_non_symmetric_and_non_square_inputs_rejected():
    with pytest.raises(ValueError):
        sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        sym_eig(np.ones((2, 3)))


def test_sweep_cap_raises_with_residual():
    m = random_spd(np.random.default_rng(0), 6)
    with pytest.raises(ConvergenceError, match="off-diagonal"):
        sym_eig(m, max_sweeps=1)


def test_covariances_are_exactly_symmetric_and_averaged_in_order():
    rng = np.random.default_rng(3)
    trials = rng.standard_normal((5, 4, 30))
    c = spatial_covariance(trials[0])
    np.testing.assert_array_equal(c, c.T)
    np.testing.assert_allclose(mean_covariance(trials), np.mean([t @ t.T for t in trials], axis=0), atol=1e-12)
    with pytest.raises(ValueError):
        mean_covariance([])
    with pytest.raises(ValueError):
        mean_covariance([np.ones((2, 5)), np.ones((3, 5))])
