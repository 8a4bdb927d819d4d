import numpy as np
import pytest

from cscomp.model import SensingMatrix, build_sensing_matrix, complex_normal


def gaussian_matrix(m, n, rng, var=None, unit_columns=False):
    """Complex Gaussian dictionary with entry variance ``var`` (default ``1/m``)."""
    var = 1.0 / m if var is None else var
    a = complex_normal(rng, (m, n), var)
    if unit_columns:
        a /= np.linalg.norm(a, axis=0)
    return SensingMatrix.from_array(a)


def orthonormal_matrix(m, n, rng):
    """``m x n`` matrix with orthonormal columns (requires ``n <= m``)."""
    q, _ = np.linalg.qr(complex_normal(rng, (m, n)))
    return SensingMatrix.from_array(q)


def sparse_rows(n, p, s, rng):
    x = np.zeros((n, p), dtype=np.complex128)
    rows = np.sort(rng.choice(n, size=s, replace=False))
    x[rows] = complex_normal(rng, (s, p))
    return x, rows


@pytest.fixture(scope="session")
def dft1():
    return build_sensing_matrix(1)


@pytest.fixture(scope="session")
def dft4():
    return build_sensing_matrix(4)
