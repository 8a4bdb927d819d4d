"""Classical row-sparse MMV recovery algorithms.

All solvers take a sensing matrix (a :class:`~cscomp.model.SensingMatrix` or a
plain 2-D complex array) and an ``M x P`` measurement matrix, and return a
:class:`SolverResult` holding the ``N x P`` estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ParameterError, SolverError
from .model import SensingMatrix

__all__ = [
    "SolverResult",
    "FistaConfig",
    "row_norms",
    "row_shrink",
    "soft_threshold",
    "top_rows",
    "hard_threshold_rows",
    "least_squares_on_support",
    "omp_mmv",
    "niht",
    "lipschitz_estimate",
    "fista_step",
    "fista",
    "fista_objective",
    "amp",
    "amp_mmv",
]

Matrix = Union[SensingMatrix, np.ndarray]


def _operator(f: Matrix) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(F, F^H)`` as dense arrays."""
    if isinstance(f, SensingMatrix):
        return f.entries, f.H
    f = np.asarray(f)
    if f.ndim != 2:
        raise ParameterError("sensing matrix must be two-dimensional")
    return f, f.conj().T


def _as_measurements(y: np.ndarray, m: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or y.shape[0] != m:
        raise ParameterError(f"measurements must have {m} rows, got shape {y.shape}")
    return y.astype(np.complex128, copy=False)


@dataclass
class SolverResult:
    """Output of a recovery algorithm.

    ``residual_history`` starts with the residual of the initial iterate, so
    its length is ``iterations + 1``.
    """

    estimate: np.ndarray
    support: np.ndarray
    iterations: int
    residual_history: List[float]
    converged: bool
    final_residual: float = float("nan")
    info: Dict[str, Any] = field(default_factory=dict)

    def csv_row(self, algorithm: str, s: int, os: int, wall_time_ms: float) -> list:
        return [algorithm, s, os, self.iterations, self.final_residual, wall_time_ms]


@dataclass
class FistaConfig:
    """FISTA settings with geometric continuation of the penalty weight.

    ``lambda_fixed`` disables continuation and solves the problem for one
    absolute penalty value.
    """

    lambda_start_factor: float = 0.9
    lambda_decay: float = 0.7
    lambda_min_factor: float = 1e-3
    inner_iters: int = 50
    max_iters: int = 1000
    tol: float = 1e-8
    restart_enabled: bool = True
    lambda_fixed: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.lambda_start_factor < 1:
            raise ParameterError("lambda_start_factor must lie in (0, 1)")
        if not 0 < self.lambda_decay < 1:
            raise ParameterError("lambda_decay must lie in (0, 1)")
        if not 0 < self.lambda_min_factor <= 1:
            raise ParameterError("lambda_min_factor must lie in (0, 1]")
        if self.inner_iters < 1 or self.max_iters < 1:
            raise ParameterError("iteration counts must be positive")
        if self.tol < 0:
            raise ParameterError("tol must be nonnegative")
        if self.lambda_fixed is not None and self.lambda_fixed < 0:
            raise ParameterError("lambda_fixed must be nonnegative")


# ---------------------------------------------------------------------------
# shared operators
# ---------------------------------------------------------------------------

def row_sq_norms(x: np.ndarray) -> np.ndarray:
    """Squared l2 norm of every row (last axis)."""
    x = np.asarray(x)
    if np.iscomplexobj(x) and x.flags.c_contiguous and x.dtype == np.complex128:
        xv = x.view(np.float64)
        return np.einsum("...j,...j->...", xv, xv)
    return np.sum(x.real ** 2 + x.imag ** 2, axis=-1)


def row_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(row_sq_norms(x))


def _shrink_with_norms(x: np.ndarray, lam: float):
    norms = row_norms(x)
    shrunk = np.maximum(norms - lam, 0.0)
    scale = np.zeros_like(norms)
    np.divide(shrunk, norms, out=scale, where=norms > 0)
    return scale[..., None] * x, shrunk


def row_shrink(x: np.ndarray, lam: float) -> np.ndarray:
    """Proximal operator of ``lam * sum_i ||x_i||_2``: shrink every row norm by ``lam``.

    Rows with norm at or below ``lam`` (including zero rows) map to zero.
    Works on stacked ``(..., N, P)`` arrays as well.
    """
    if lam < 0:
        raise ParameterError("shrinkage threshold must be nonnegative")
    x = np.asarray(x)
    norms = row_norms(x)
    scale = np.zeros_like(norms)
    np.divide(np.maximum(norms - lam, 0.0), norms, out=scale, where=norms > 0)
    return scale[..., None] * x


def soft_threshold(z: np.ndarray, lam: float) -> np.ndarray:
    """Phase-preserving complex soft threshold ``sign(z) * max(|z| - lam, 0)``."""
    z = np.asarray(z)
    mag = np.abs(z)
    scale = np.zeros_like(mag)
    np.divide(np.maximum(mag - lam, 0.0), mag, out=scale, where=mag > 0)
    return scale * z


def _largest(scores: np.ndarray, s: int) -> np.ndarray:
    """Sorted indices of the ``s`` largest scores; ties at the cut go to lower indices."""
    n = scores.shape[0]
    if s >= n:
        return np.arange(n)
    kth = np.partition(scores, n - s)[n - s]
    above = np.flatnonzero(scores > kth)
    ties = np.flatnonzero(scores == kth)[: s - above.size]
    return np.sort(np.concatenate([above, ties]))


def top_rows(x: np.ndarray, s: int) -> np.ndarray:
    """Sorted indices of the ``s`` rows of largest l2 norm (ties: lower index wins)."""
    return _largest(row_sq_norms(np.asarray(x)), s)


def hard_threshold_rows(x: np.ndarray, s: int) -> np.ndarray:
    """Keep the ``s`` rows of largest l2 norm verbatim and zero the rest."""
    x = np.asarray(x)
    if not 1 <= s <= x.shape[0]:
        raise ParameterError(f"s must lie in [1, {x.shape[0]}], got {s}")
    out = np.zeros_like(x)
    keep = top_rows(x, s)
    out[keep] = x[keep]
    return out


def least_squares_on_support(f: Matrix, y: np.ndarray, support: Sequence[int],
                             return_info: bool = False):
    """Least-squares fit of ``y`` using only the columns of ``f`` listed in ``support``.

    Rows outside the support are zero. A rank-deficient column subset falls back
    to the minimum-norm solution; with ``return_info=True`` the function returns
    ``(x, rank_deficient)``.
    """
    F, _ = _operator(f)
    y = _as_measurements(y, F.shape[0])
    idx = np.asarray(sorted(int(i) for i in support), dtype=np.int64)
    x = np.zeros((F.shape[1], y.shape[1]), dtype=np.complex128)
    deficient = False
    if idx.size:
        sub = F[:, idx]
        coef, _, rank, _ = np.linalg.lstsq(sub, y, rcond=None)
        x[idx] = coef
        deficient = rank < idx.size
    if return_info:
        return x, deficient
    return x


# ---------------------------------------------------------------------------
# greedy and thresholding solvers
# ---------------------------------------------------------------------------

def omp_mmv(f: Matrix, y: np.ndarray, s: int, eps: float = 1e-12) -> SolverResult:
    """Simultaneous orthogonal matching pursuit.

    Each step adds the column with the largest summed squared correlation with
    the residual and refits all selected coefficients by least squares. Stops
    after ``s`` atoms, or earlier when the best atom is already selected or its
    score falls below ``eps``.
    """
    F, FH = _operator(f)
    M, N = F.shape
    y = _as_measurements(y, M)
    if not 1 <= s <= min(M, N):
        raise ParameterError(f"s must lie in [1, {min(M, N)}], got {s}")

    selected: List[int] = []
    x = np.zeros((N, y.shape[1]), dtype=np.complex128)
    residual = y.copy()
    history = [float(np.linalg.norm(residual))]
    converged = True
    deficient = False
    for _ in range(s):
        scores = row_norms(FH @ residual) ** 2
        best = int(np.argmax(scores))
        if scores[best] < eps:
            break
        if best in selected:
            converged = False
            break
        selected.append(best)
        x, flag = least_squares_on_support(F, y, selected, return_info=True)
        deficient |= flag
        residual = y - F @ x
        history.append(float(np.linalg.norm(residual)))

    return SolverResult(
        estimate=x,
        support=np.asarray(sorted(selected), dtype=np.int64),
        iterations=len(selected),
        residual_history=history,
        converged=converged,
        final_residual=history[-1],
        info={"selection_order": selected, "rank_deficient": deficient},
    )


_ROUNDOFF = 64 * np.finfo(np.float64).eps


def _merge_rows(support: np.ndarray, coef: np.ndarray, rows: np.ndarray,
                grad: np.ndarray, mu: float) -> np.ndarray:
    """Rows ``rows`` of ``x + mu * grad`` where ``x`` is given compactly by ``(support, coef)``."""
    vals = mu * grad[rows]
    pos = np.searchsorted(support, rows)
    pos_c = np.minimum(pos, support.size - 1)
    hit = (pos < support.size) & (support[pos_c] == rows)
    vals[hit] += coef[pos_c[hit]]
    return vals


def niht(f: Matrix, y: np.ndarray, s: int, c: float = 0.1, max_iters: int = 500,
         tol: float = 1e-8) -> SolverResult:
    """Normalised iterative hard thresholding for row-sparse MMV problems.

    Iterates hard-thresholded gradient steps with the adaptive step size and
    backtracking rule of Blumensath and Davies; the final support gets a
    least-squares refit. Stops after ``max_iters`` iterations or once the
    residual norm changes by less than ``tol`` (relative).
    """
    F, FH = _operator(f)
    M, N = F.shape
    y = _as_measurements(y, M)
    if not 1 <= s <= N:
        raise ParameterError(f"s must lie in [1, {N}], got {s}")
    if not 0 < c < 1:
        raise ParameterError("c must lie in (0, 1)")

    # the iterate is kept compactly: rows `support` hold `coef`, all others are zero
    support = top_rows(FH @ y, s)
    coef = np.zeros((s, y.shape[1]), dtype=np.complex128)
    residual = y.copy()
    history = [float(np.linalg.norm(residual))]
    converged = False
    backtracks = 0
    steps: List[float] = []
    k = 0
    while k < max_iters:
        grad = FH @ residual
        g_sup = grad[support]
        num = np.vdot(g_sup, g_sup).real
        den = np.linalg.norm(F[:, support] @ g_sup) ** 2
        if num == 0.0 or den == 0.0:
            # stationary on the current support
            converged = True
            break
        mu = num / den
        grad_sq = row_sq_norms(grad)

        def threshold(step_size):
            scores = step_size * step_size * grad_sq
            scores[support] = row_sq_norms(coef + step_size * g_sup)
            return _largest(scores, s)

        rows = threshold(mu)
        vals = _merge_rows(support, coef, rows, grad, mu)
        if not np.array_equal(rows, support):
            f_old = F[:, support] @ coef
            while True:
                # ||x_new - x||^2 from the two compact representations
                overlap = np.vdot(vals, _merge_rows(support, coef, rows, grad, 0.0)).real
                dist = np.vdot(vals, vals).real + np.vdot(coef, coef).real - 2.0 * overlap
                fstep = np.linalg.norm(F[:, rows] @ vals - f_old) ** 2
                if fstep == 0.0:
                    break
                if mu <= (1.0 - c) * dist / fstep:
                    break
                mu /= 2.0
                backtracks += 1
                rows = threshold(mu)
                vals = _merge_rows(support, coef, rows, grad, mu)
        support, coef = rows, vals
        steps.append(float(mu))
        residual = y - F[:, support] @ coef
        k += 1
        history.append(float(np.linalg.norm(residual)))
        if not np.isfinite(history[-1]):
            raise SolverError(f"NIHT produced a non-finite residual at iteration {k}")
        prev, cur = history[-2], history[-1]
        # a residual at rounding level counts as an exact fit
        if cur <= _ROUNDOFF * history[0] or abs(prev - cur) < tol * prev:
            converged = True
            break

    estimate, deficient = least_squares_on_support(F, y, support, return_info=True)
    return SolverResult(
        estimate=estimate,
        support=support,
        iterations=k,
        residual_history=history,
        converged=converged,
        final_residual=float(np.linalg.norm(y - F @ estimate)),
        info={"backtracks": backtracks, "step_sizes": steps, "rank_deficient": deficient},
    )


# ---------------------------------------------------------------------------
# convex relaxation
# ---------------------------------------------------------------------------

def lipschitz_estimate(f: Matrix, iters: int = 100, tol: float = 1e-13,
                       max_iters: int = 100_000) -> float:
    """Largest eigenvalue of ``F^H F`` by power iteration.

    Runs at least ``iters`` steps on the smaller of the two Gram matrices and
    keeps going until the Rayleigh quotient changes by less than ``tol``
    (relative), so slowly separating spectra still yield an accurate bound.
    """
    F, FH = _operator(f)
    gram = F @ FH if F.shape[0] <= F.shape[1] else FH @ F
    if not np.any(gram):
        raise ParameterError("sensing matrix is zero")
    rng = np.random.default_rng(0)
    v = rng.standard_normal(gram.shape[0]) + 1j * rng.standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    estimate = 0.0
    for k in range(max_iters):
        w = gram @ v
        new = float(np.vdot(v, w).real)
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            break
        v = w / norm_w
        done = k + 1 >= iters and abs(new - estimate) <= tol * abs(new)
        estimate = new
        if done:
            break
    return estimate


def fista_objective(F: np.ndarray, y: np.ndarray, x: np.ndarray, lam: float) -> float:
    """``0.5 * ||y - F x||^2 + lam * sum_i ||x_i||_2``."""
    r = y - F @ x
    return 0.5 * float(np.vdot(r, r).real) + lam * float(np.sum(row_norms(x)))


def _accelerated_step(F, descent, y, x, z, fx, fz, t, thresh, restart):
    """Shared FISTA update; carries ``F @ x`` and ``F @ z`` along to save products.

    ``descent`` is ``-F^H / beta`` and ``thresh`` is ``lam / beta``. Also returns
    the row norms of the new iterate and ``||x_next - x||``.
    """
    x_next = descent @ (fz - y)
    x_next += z
    norms = row_norms(x_next)
    shrunk = np.maximum(norms - thresh, 0.0)
    scale = np.zeros_like(norms)
    np.divide(shrunk, norms, out=scale, where=norms > 0)
    x_next *= scale[:, None]
    active = np.flatnonzero(shrunk)
    if 2 * active.size < x_next.shape[0]:
        fx_next = F[:, active] @ x_next[active]
    else:
        fx_next = F @ x_next
    diff = x_next - x
    restarted = False
    if restart and np.vdot(z, diff).real - np.vdot(x_next, diff).real > 0:
        t = 1.0
        restarted = True
    t_next = 0.5 * (1.0 + math.sqrt(4.0 * t * t + 1.0))
    momentum = (t - 1.0) / t_next
    if momentum:
        z_next = x_next + momentum * diff
        fz_next = fx_next + momentum * (fx_next - fx)
    else:
        z_next, fz_next = x_next, fx_next
    change = math.sqrt(np.vdot(diff, diff).real)
    return x_next, z_next, fx_next, fz_next, t_next, restarted, shrunk, change


def fista_step(F: np.ndarray, FH: np.ndarray, y: np.ndarray, x: np.ndarray, z: np.ndarray,
               t: float, lam: float, beta: float, restart: bool = True):
    """One accelerated proximal-gradient step.

    Returns ``(x_next, z_next, t_next, restarted)``. When ``restart`` is set and
    the step direction disagrees with the momentum direction, the momentum
    sequence is reset to ``t = 1`` before extrapolating.
    """
    x_next, z_next, _, _, t_next, restarted, _, _ = _accelerated_step(
        F, FH * (-1.0 / beta), y, x, z, F @ x, F @ z, t, lam / beta, restart)
    return x_next, z_next, t_next, restarted


def fista(f: Matrix, y: np.ndarray, cfg: Optional[FistaConfig] = None,
          beta: Optional[float] = None) -> SolverResult:
    """FISTA for ``0.5||Y - FX||^2 + lam * ||X||_{2,1}`` with continuation and adaptive restart.

    Without ``cfg.lambda_fixed`` the penalty starts at
    ``lambda_start_factor * max_i ||(F^H Y)_i||`` and is multiplied by
    ``lambda_decay`` after each stage of ``inner_iters`` iterations (or earlier
    if the stage converges) until it reaches ``lambda_min_factor`` times its
    start value; the last stage runs until ``tol`` or ``max_iters``. Each stage
    is warm-started from the previous iterate with fresh momentum.
    """
    cfg = cfg or FistaConfig()
    F, FH = _operator(f)
    M, N = F.shape
    y = _as_measurements(y, M)
    if beta is None:
        beta = lipschitz_estimate(F)
    descent = FH * (-1.0 / beta)

    if cfg.lambda_fixed is not None:
        lam = float(cfg.lambda_fixed)
        lam_floor = lam
    else:
        lam = cfg.lambda_start_factor * float(np.max(row_norms(FH @ y)))
        lam_floor = cfg.lambda_min_factor * lam

    x = np.zeros((N, y.shape[1]), dtype=np.complex128)
    fx = np.zeros_like(y)
    history = [float(np.linalg.norm(y))]
    objectives = [fista_objective(F, y, x, lam)]
    lambdas = [lam]
    restarts: List[int] = []
    stages: List[int] = []
    converged = False
    x_scale = 0.0
    k = 0
    if lam == 0.0 and cfg.lambda_fixed is None:
        # F^H Y = 0: zero is optimal for every penalty
        converged = True
    while not converged and k < cfg.max_iters:
        final_stage = lam <= lam_floor
        budget = cfg.max_iters - k if final_stage else min(cfg.inner_iters, cfg.max_iters - k)
        z, fz, t = x, fx, 1.0
        stage_done = False
        for _ in range(budget):
            x_next, z, fx_next, fz, t, restarted, norms, change = _accelerated_step(
                F, descent, y, x, z, fx, fz, t, lam / beta, cfg.restart_enabled)
            k += 1
            if not np.all(np.isfinite(fx_next)):
                raise SolverError(f"FISTA produced non-finite values at iteration {k}")
            if restarted:
                restarts.append(k)
            x, fx = x_next, fx_next
            r = y - fx
            rnorm2 = float(np.vdot(r, r).real)
            history.append(math.sqrt(rnorm2))
            objectives.append(0.5 * rnorm2 + lam * float(np.sum(norms)))
            lambdas.append(lam)
            converged_step = change <= cfg.tol * x_scale
            x_scale = math.sqrt(float(norms @ norms))
            if converged_step:
                stage_done = True
                break
        stages.append(k)
        if final_stage:
            converged = stage_done
            break
        lam *= cfg.lambda_decay

    return SolverResult(
        estimate=x,
        support=np.flatnonzero(row_norms(x) > 0),
        iterations=k,
        residual_history=history,
        converged=converged,
        final_residual=float(np.linalg.norm(y - F @ x)),
        info={"objective_history": objectives, "lambda_history": lambdas,
              "restarts": restarts, "stage_ends": stages, "beta": beta},
    )


# ---------------------------------------------------------------------------
# approximate message passing
# ---------------------------------------------------------------------------

def amp(f: Matrix, y: np.ndarray, alpha: float = 1.0, iters: int = 20) -> SolverResult:
    """Approximate message passing for a single measurement vector.

    Starts from ``x = 0, v_prev = 0`` and performs ``iters`` soft-threshold
    updates with Onsager term ``(|x|_0 / M) v_prev`` and threshold
    ``alpha * ||v|| / sqrt(M)``.
    """
    F, FH = _operator(f)
    M, N = F.shape
    y = np.asarray(y, dtype=np.complex128)
    if y.ndim != 1 or y.shape[0] != M:
        raise ParameterError(f"amp expects a length-{M} vector")
    if iters < 1 or alpha <= 0:
        raise ParameterError("iters must be >= 1 and alpha > 0")
    x = np.zeros(N, dtype=np.complex128)
    v = np.zeros(M, dtype=np.complex128)
    thresholds = []
    history = []
    for _ in range(iters):
        b = np.count_nonzero(x) / M
        v = y - F @ x + b * v
        history.append(float(np.linalg.norm(v)))
        lam = alpha / np.sqrt(M) * np.linalg.norm(v)
        thresholds.append(float(lam))
        x = soft_threshold(x + FH @ v, lam)
    return SolverResult(
        estimate=x,
        support=np.flatnonzero(x),
        iterations=iters,
        residual_history=history + [float(np.linalg.norm(y - F @ x))],
        converged=True,
        final_residual=float(np.linalg.norm(y - F @ x)),
        info={"thresholds": thresholds},
    )


def amp_mmv(f: Matrix, y: np.ndarray, alpha: float = 1.0, iters: int = 20) -> SolverResult:
    """AMP adapted to row sparsity: row shrinkage and Onsager factor ``||X||_{2,0} / M``."""
    F, FH = _operator(f)
    M, N = F.shape
    y = _as_measurements(y, M)
    if iters < 1 or alpha <= 0:
        raise ParameterError("iters must be >= 1 and alpha > 0")
    x = np.zeros((N, y.shape[1]), dtype=np.complex128)
    v = np.zeros_like(y)
    thresholds = []
    history = []
    for _ in range(iters):
        b = np.count_nonzero(np.any(x != 0, axis=1)) / M
        v = y - F @ x + b * v
        history.append(float(np.linalg.norm(v)))
        lam = alpha / np.sqrt(M) * np.linalg.norm(v)
        thresholds.append(float(lam))
        x = row_shrink(x + FH @ v, lam)
    final = float(np.linalg.norm(y - F @ x))
    return SolverResult(
        estimate=x,
        support=np.flatnonzero(row_norms(x) > 0),
        iterations=iters,
        residual_history=history + [final],
        converged=True,
        final_residual=final,
        info={"thresholds": thresholds},
    )
