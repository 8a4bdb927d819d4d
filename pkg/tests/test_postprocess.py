import numpy as np
import pytest

from cscomp.errors import ParameterError
from cscomp.model import complex_normal, generate_sparse_sample, synthesize_measurements
from cscomp.postprocess import prune_and_refit, truncate_rows
from cscomp.solvers import FistaConfig, fista, hard_threshold_rows, omp_mmv, row_norms

from conftest import gaussian_matrix


def test_truncate_matches_hard_threshold():
    x = complex_normal(np.random.default_rng(0), (30, 3))
    assert np.array_equal(truncate_rows(x, 4), hard_threshold_rows(x, 4))


def test_idempotent_on_omp(dft1):
    for seed in range(10):
        y = synthesize_measurements(dft1, generate_sparse_sample(257, 16, 10, seed), 20.0, seed)
        r = omp_mmv(dft1, y, 10)
        out = prune_and_refit(r.estimate, dft1, y, 10)
        assert np.max(np.abs(out.estimate - r.estimate)) <= 1e-12
        assert np.array_equal(out.support, r.support)


def test_zero_input(dft1):
    y = complex_normal(np.random.default_rng(1), (52, 4))
    out = prune_and_refit(np.zeros((257, 4)), dft1, y, 10)
    assert out.support.size == 0
    assert np.all(out.estimate == 0)


def test_dense_inputs(dft4):
    rng = np.random.default_rng(2)
    for _ in range(50):
        x_hat = complex_normal(rng, (1025, 16))
        y = complex_normal(rng, (52, 16))
        out = prune_and_refit(x_hat, dft4, y, 10)
        assert np.count_nonzero(row_norms(out.estimate)) <= 10
        trunc = np.linalg.norm(y - dft4.entries @ truncate_rows(x_hat, 10))
        assert out.final_residual <= trunc


def test_fewer_nonzero_rows_than_s(dft1):
    rng = np.random.default_rng(3)
    x_hat = np.zeros((257, 2), complex)
    x_hat[[4, 90]] = complex_normal(rng, (2, 2))
    out = prune_and_refit(x_hat, dft1, complex_normal(rng, (52, 2)), 10)
    assert list(out.support) == [4, 90]


def test_fista_refit_exact():
    # well-conditioned noiseless instance where FISTA's top-s rows are the true support
    rng = np.random.default_rng(4)
    f = gaussian_matrix(60, 120, rng)
    x0 = np.zeros((120, 4), complex)
    rows = np.array([3, 40, 77, 101])
    x0[rows] = 3 * complex_normal(rng, (4, 4))
    y = f.entries @ x0
    r = fista(f, y, FistaConfig(max_iters=3000))
    out = prune_and_refit(r.estimate, f, y, 4)
    assert np.array_equal(out.support, rows)
    assert out.final_residual <= 1e-8


def test_ties_lowest_index(dft1):
    x_hat = np.zeros((257, 1), complex)
    x_hat[[5, 9, 2]] = 1.0
    out = prune_and_refit(x_hat, dft1, np.ones((52, 1)), 2)
    assert list(out.support) == [2, 5]


def test_validation(dft1):
    with pytest.raises(ParameterError):
        prune_and_refit(np.zeros((257, 1)), dft1, np.ones((52, 1)), 0)
    with pytest.raises(ParameterError):
        prune_and_refit(np.zeros((256, 1)), dft1, np.ones((52, 1)), 3)
