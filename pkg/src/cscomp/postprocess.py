"""Sparsity matching: prune an estimate to ``s`` rows and refit by least squares."""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .solvers import Matrix, SolverResult, _as_measurements, _operator, least_squares_on_support, row_norms, top_rows

__all__ = ["prune_and_refit", "truncate_rows"]


def truncate_rows(x_hat: np.ndarray, s: int) -> np.ndarray:
    """Keep the values of the ``s`` strongest rows without refitting."""
    out = np.zeros_like(x_hat)
    keep = top_rows(x_hat, s)
    out[keep] = x_hat[keep]
    return out


def prune_and_refit(x_hat: np.ndarray, f: Matrix, y: np.ndarray, s: int) -> SolverResult:
    """Zero all but the ``s`` rows of largest l2 norm, then refit on that support.

    Rows that are already zero are never selected, so an estimate with fewer
    than ``s`` nonzero rows keeps its smaller support. Ties follow
    :func:`cscomp.solvers.top_rows`.
    """
    F, _ = _operator(f)
    M, N = F.shape
    y = _as_measurements(y, M)
    x_hat = np.asarray(x_hat)
    if x_hat.ndim == 1:
        x_hat = x_hat[:, None]
    if x_hat.shape != (N, y.shape[1]):
        raise ParameterError(f"estimate must have shape {(N, y.shape[1])}, got {x_hat.shape}")
    if not 1 <= s <= min(M, N):
        raise ParameterError(f"s must lie in [1, {min(M, N)}], got {s}")

    norms = row_norms(x_hat)
    support = top_rows(x_hat, s)
    support = support[norms[support] > 0]
    estimate, deficient = least_squares_on_support(F, y, support, return_info=True)
    residual = float(np.linalg.norm(y - F @ estimate))
    return SolverResult(
        estimate=estimate,
        support=support,
        iterations=0,
        residual_history=[residual],
        converged=True,
        final_residual=residual,
        info={"rank_deficient": deficient},
    )
