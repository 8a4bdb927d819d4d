"""Learned AMP for row-sparse MMV recovery (L-AMP-MMV).

Layer ``t`` maps ``(X_{t-1}, V_{t-1})`` to::

    lam_t = alpha_t / sqrt(M) * ||V_{t-1}||
    X_t   = beta_t * row_shrink(X_{t-1} + B V_{t-1}, lam_t)
    V_t   = Y - F X_t + beta_t * ||X_t||_{2,0} / M * V_{t-1}

with ``X_0 = 0`` and ``V_0 = Y``. The matrix ``B`` is shared by all layers;
``alpha`` and ``beta`` are per-layer scalars. A freshly initialized network
(``B = F^H``, ``alpha = beta = 1``) reproduces ``amp_mmv`` exactly.

Gradients are derived by hand. Complex quantities carry their gradient as
``dL/dRe + 1j * dL/dIm``; the row count in the Onsager term is treated as a
constant.

Every forward/backward function accepts either one sample (``Y`` of shape
``M x P``) or a stacked batch (``batch x M x P``); batched losses and
gradients are averaged over the batch.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .errors import FormatError, ParameterError, SolverError
from .model import (
    SensingMatrix,
    build_sensing_matrix,
    default_subcarriers,
    generate_sparse_sample,
    synthesize_measurements,
)
from .solvers import row_norms

__all__ = [
    "LampModel",
    "LayerState",
    "AdamState",
    "TrainConfig",
    "lamp_layer",
    "lamp_forward",
    "loss",
    "lamp_backward",
    "split_gradients",
    "adam_step",
    "training_batch",
    "train",
    "save_model",
    "load_model",
]


@dataclass(eq=False)
class LampModel:
    alpha: np.ndarray
    beta: np.ndarray
    B: np.ndarray
    F: SensingMatrix
    gamma: float = 0.5

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.complex128)
        if self.alpha.shape != self.beta.shape or self.alpha.ndim != 1:
            raise ParameterError("alpha and beta must be vectors of equal length")
        if self.B.shape != (self.F.N, self.F.M):
            raise ParameterError(f"B must have shape {(self.F.N, self.F.M)}, got {self.B.shape}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ParameterError("gamma must lie in [0, 1]")

    @classmethod
    def initial(cls, f: SensingMatrix, T: int, gamma: float = 0.5) -> "LampModel":
        """``B = F^H`` and ``alpha_t = beta_t = 1`` for every layer."""
        if T < 1:
            raise ParameterError("T must be >= 1")
        return cls(np.ones(T), np.ones(T), f.H.copy(), f, gamma)

    @property
    def T(self) -> int:
        return self.alpha.shape[0]

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable real parameters (copies)."""
        return {"alpha": self.alpha.copy(), "beta": self.beta.copy(),
                "B_re": self.B.real.copy(), "B_im": self.B.imag.copy()}

    def set_parameters(self, params: Dict[str, np.ndarray]) -> None:
        self.alpha = np.array(params["alpha"], dtype=np.float64)
        self.beta = np.array(params["beta"], dtype=np.float64)
        self.B = params["B_re"] + 1j * params["B_im"]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def copy(self) -> "LampModel":
        return LampModel(self.alpha.copy(), self.beta.copy(), self.B.copy(), self.F, self.gamma)

    def same_parameters(self, other: "LampModel") -> bool:
        return (self.gamma == other.gamma
                and np.array_equal(self.alpha, other.alpha)
                and np.array_equal(self.beta, other.beta)
                and np.array_equal(self.B, other.B))


@dataclass
class LayerState:
    """Outputs of one layer plus the intermediates the backward pass needs."""

    X: np.ndarray
    V: np.ndarray
    lam: np.ndarray
    onsager: np.ndarray
    count: np.ndarray
    v_prev: np.ndarray
    pre_shrink: np.ndarray
    shrunk: np.ndarray
    v_norm: np.ndarray
    active_rows: np.ndarray


def _matmul(A: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``A @ X`` for a single matrix or a stacked batch of matrices."""
    if X.ndim == 2:
        return A @ X
    b, n, p = X.shape
    out = A @ X.transpose(1, 0, 2).reshape(n, b * p)
    return out.reshape(A.shape[0], b, p).transpose(1, 0, 2)


def _fro(x: np.ndarray) -> np.ndarray:
    """Frobenius norm over the last two axes."""
    return np.sqrt(np.sum(x.real ** 2 + x.imag ** 2, axis=(-2, -1)))


def _per_sample(scalar: np.ndarray) -> np.ndarray:
    """Broadcast a per-sample scalar against ``(..., rows, cols)`` arrays."""
    return np.asarray(scalar)[..., None, None]


def lamp_layer(x_prev: np.ndarray, v_prev: np.ndarray, y: np.ndarray, alpha_t: float,
               beta_t: float, b: np.ndarray, f: SensingMatrix) -> LayerState:
    M = y.shape[-2]
    if x_prev.ndim == 2:
        v_norm = np.linalg.norm(v_prev)
    else:
        v_norm = _fro(v_prev)
    lam = alpha_t / np.sqrt(M) * v_norm
    pre = x_prev + _matmul(b, v_prev)
    norms = row_norms(pre)
    lam_rows = _per_sample(lam)[..., 0]
    active = norms > lam_rows
    scale = np.zeros_like(norms)
    np.divide(np.maximum(norms - lam_rows, 0.0), norms, out=scale, where=norms > 0)
    shrunk = scale[..., None] * pre
    x = beta_t * shrunk
    count = np.count_nonzero(np.any(x != 0, axis=-1), axis=-1)
    onsager = beta_t * count / M
    v = y - _matmul(f.entries, x) + _per_sample(onsager) * v_prev
    return LayerState(x, v, lam, onsager, count, v_prev, pre, shrunk, v_norm, active)


def lamp_forward(model: LampModel, y: np.ndarray, layers: Optional[int] = None
                 ) -> Tuple[np.ndarray, List[LayerState]]:
    """Run the first ``layers`` (default: all) layers on ``y``.

    Returns the final estimate and the per-layer states for backpropagation.
    """
    y = np.asarray(y, dtype=np.complex128)
    if y.ndim not in (2, 3) or y.shape[-2] != model.F.M:
        raise ParameterError(f"y must have shape ({model.F.M}, P) or (batch, {model.F.M}, P)")
    layers = model.T if layers is None else layers
    if not 1 <= layers <= model.T:
        raise ParameterError(f"layers must lie in [1, {model.T}]")
    shape = y.shape[:-2] + (model.F.N, y.shape[-1])
    x = np.zeros(shape, dtype=np.complex128)
    # V_0 = Y - F X_0 + 0 * V_{-1}
    v = y - _matmul(model.F.entries, x)
    states = []
    for t in range(layers):
        st = lamp_layer(x, v, y, model.alpha[t], model.beta[t], model.B, model.F)
        states.append(st)
        x, v = st.X, st.V
    return x, states


def loss(x_hat: np.ndarray, x_true: np.ndarray, y: np.ndarray, f: SensingMatrix,
         gamma: float) -> float:
    """``(1 - gamma) ||X - X_hat||^2 + gamma ||Y - F X_hat||^2``, averaged over a batch."""
    if not 0.0 <= gamma <= 1.0:
        raise ParameterError("gamma must lie in [0, 1]")
    d = x_true - x_hat
    r = y - _matmul(f.entries, x_hat)
    per = (1.0 - gamma) * _fro(d) ** 2 + gamma * _fro(r) ** 2
    return float(np.mean(per))


def lamp_backward(model: LampModel, states: List[LayerState], x_true: np.ndarray,
                  y: np.ndarray) -> Dict[str, np.ndarray]:
    """Gradient of ``loss`` of the network output with respect to all parameters.

    Layers beyond ``len(states)`` receive zero gradient. The complex gradient
    ``"B"`` equals ``dL/dRe(B) + 1j * dL/dIm(B)``.
    """
    F, FH = model.F.entries, model.F.H
    M = model.F.M
    gamma = model.gamma
    batched = y.ndim == 3
    scale = 1.0 / y.shape[0] if batched else 1.0

    g_alpha = np.zeros(model.T)
    g_beta = np.zeros(model.T)
    g_B = np.zeros_like(model.B)

    x_hat = states[-1].X
    g_x = 2.0 * scale * ((1.0 - gamma) * (x_hat - x_true)
                         + gamma * _matmul(FH, _matmul(F, x_hat) - y))
    g_v = np.zeros_like(y)
    sum_axes = (-2, -1)

    for t in range(len(states) - 1, -1, -1):
        st = states[t]
        beta_t, alpha_t = model.beta[t], model.alpha[t]
        v_prev = st.v_prev

        # V_t = Y - F X_t + onsager * V_{t-1}
        g_x = g_x - _matmul(FH, g_v)
        g_onsager = np.sum((g_v.conj() * v_prev).real, axis=sum_axes)
        g_beta[t] += np.sum(g_onsager * st.count / M)
        g_vp = _per_sample(st.onsager) * g_v

        # X_t = beta_t * S
        g_beta[t] += np.sum((g_x.conj() * st.shrunk).real)
        g_s = beta_t * g_x

        # S = row_shrink(U, lam)
        u = st.pre_shrink
        r = row_norms(u)
        act = st.active_rows
        r_safe = np.where(act, r, 1.0)
        lam_rows = _per_sample(st.lam)[..., 0]
        inner = np.sum((g_s.conj() * u).real, axis=-1)
        coef_g = np.where(act, 1.0 - lam_rows / r_safe, 0.0)
        coef_u = np.where(act, lam_rows * inner / r_safe ** 3, 0.0)
        g_u = coef_g[..., None] * g_s + coef_u[..., None] * u
        g_lam = -np.sum(np.where(act, inner / r_safe, 0.0), axis=-1)

        # lam = alpha_t / sqrt(M) * ||V_{t-1}||
        g_alpha[t] += np.sum(g_lam * st.v_norm) / math.sqrt(M)
        g_norm = g_lam * alpha_t / math.sqrt(M)
        v_norm = np.asarray(st.v_norm)
        ratio = np.divide(g_norm, v_norm, out=np.zeros_like(v_norm, dtype=np.float64),
                          where=v_norm > 0)
        g_vp = g_vp + _per_sample(ratio) * v_prev

        # U = X_{t-1} + B V_{t-1}
        if batched:
            b, n, p = g_u.shape
            gu_flat = g_u.transpose(1, 0, 2).reshape(n, b * p)
            vp_flat = v_prev.transpose(1, 0, 2).reshape(M, b * p)
            g_B += gu_flat @ vp_flat.conj().T
        else:
            g_B += g_u @ v_prev.conj().T
        g_vp = g_vp + _matmul(model.B.conj().T, g_u)

        g_x = g_u
        g_v = g_vp

    return {"alpha": g_alpha, "beta": g_beta, "B": g_B}


def split_gradients(grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Map ``lamp_backward`` output onto the keys of :meth:`LampModel.parameters`."""
    return {"alpha": grads["alpha"], "beta": grads["beta"],
            "B_re": grads["B"].real.copy(), "B_im": grads["B"].imag.copy()}


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected ADAM update; returns new parameter arrays and the advanced state."""
    step = state.step + 1
    bc1 = 1.0 - state.b1 ** step
    bc2 = 1.0 - state.b2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        if g.shape != p.shape:
            raise ParameterError(f"gradient for {key!r} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(key, np.zeros_like(p))
        v = state.v.get(key, np.zeros_like(p))
        m = state.b1 * m + (1.0 - state.b1) * g
        v = state.b2 * v + (1.0 - state.b2) * (g * g)
        new_params[key] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[key], new_v[key] = m, v
    return new_params, AdamState(state.lr, state.b1, state.b2, state.eps, step, new_m, new_v)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    T: int = 20
    n_pre: int = 2
    n_post: int = 5
    batches_per_epoch: int = 1000
    batch_size: int = 64
    gamma: float = 0.5
    lr: float = 1e-3
    s: int = 10
    p: int = 16
    snr_db: Optional[float] = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.T < 1 or self.batches_per_epoch < 1 or self.batch_size < 1:
            raise ParameterError("T, batches_per_epoch and batch_size must be positive")
        if self.n_pre < 0 or self.n_post < 0:
            raise ParameterError("epoch counts must be nonnegative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ParameterError("gamma must lie in [0, 1]")
        if self.lr <= 0:
            raise ParameterError("lr must be positive")


def training_batch(f: SensingMatrix, batch_size: int, s: int, p: int,
                   snr_db: Optional[float], rng: np.random.Generator
                   ) -> Tuple[np.ndarray, np.ndarray]:
    """Draw a batch of ``(X, Y)`` pairs with ``||Y|| = 1`` per sample.

    ``X`` is divided by the same factor as its measurements so that
    ``Y ~ F X`` still holds after normalization.
    """
    xs = np.empty((batch_size, f.N, p), dtype=np.complex128)
    ys = np.empty((batch_size, f.M, p), dtype=np.complex128)
    seeds = rng.integers(0, 2 ** 63 - 1, size=(batch_size, 2))
    for i in range(batch_size):
        x = generate_sparse_sample(f.N, p, s, int(seeds[i, 0]))
        y = synthesize_measurements(f, x, snr_db, int(seeds[i, 1]))
        norm = np.linalg.norm(y)
        xs[i] = x / norm
        ys[i] = y / norm
    return xs, ys


BatchCallback = Callable[[int, str, int, int, float], None]


def _run_phase(model: LampModel, layer: int, trainable: Dict[str, np.ndarray], epochs: int,
               cfg: TrainConfig, rng: np.random.Generator, phase: str,
               on_batch: Optional[BatchCallback]) -> None:
    state = AdamState(lr=cfg.lr)
    for epoch in range(epochs):
        for batch in range(cfg.batches_per_epoch):
            x_true, y = training_batch(model.F, cfg.batch_size, cfg.s, cfg.p, cfg.snr_db, rng)
            x_hat, states = lamp_forward(model, y, layers=layer)
            value = loss(x_hat, x_true, y, model.F, model.gamma)
            if not math.isfinite(value):
                raise SolverError(
                    f"training diverged: non-finite loss at layer {layer}, {phase} epoch {epoch}, batch {batch}")
            grads = split_gradients(lamp_backward(model, states, x_true, y))
            for key, mask in trainable.items():
                grads[key] = grads[key] * mask
            params, state = adam_step(model.parameters(), grads, state)
            if not all(np.all(np.isfinite(v)) for v in params.values()):
                raise SolverError(
                    f"training diverged: non-finite parameters at layer {layer}, {phase} epoch {epoch}, batch {batch}")
            model.set_parameters(params)
            if on_batch is not None:
                on_batch(layer, phase, epoch, batch, value)


def train(f: SensingMatrix, cfg: Optional[TrainConfig] = None,
          on_batch: Optional[BatchCallback] = None) -> LampModel:
    """Layer-wise training from a fresh model.

    For ``t = 1..T``: reset ``alpha_t = beta_t = 1``, train only
    ``(alpha_t, beta_t, B)`` for ``n_pre`` epochs on the depth-``t`` network,
    then fine-tune ``alpha_1..t, beta_1..t`` and ``B`` for ``n_post`` epochs.
    Each phase starts with a fresh ADAM state; every batch is newly drawn
    synthetic data. ``on_batch(layer, phase, epoch, batch, loss)`` is called
    after every update.
    """
    cfg = cfg or TrainConfig()
    model = LampModel.initial(f, cfg.T, cfg.gamma)
    rng = np.random.default_rng(cfg.seed)
    ones_b = np.ones_like(model.B.real)
    for t in range(1, cfg.T + 1):
        model.alpha[t - 1] = 1.0
        model.beta[t - 1] = 1.0
        only_t = np.zeros(cfg.T)
        only_t[t - 1] = 1.0
        mask = {"alpha": only_t, "beta": only_t, "B_re": ones_b, "B_im": ones_b}
        _run_phase(model, t, mask, cfg.n_pre, cfg, rng, "pre", on_batch)
        upto_t = np.zeros(cfg.T)
        upto_t[:t] = 1.0
        mask = {"alpha": upto_t, "beta": upto_t, "B_re": ones_b, "B_im": ones_b}
        _run_phase(model, t, mask, cfg.n_post, cfg, rng, "post", on_batch)
    return model


# ---------------------------------------------------------------------------
# LMP1 model files
# ---------------------------------------------------------------------------

_LMP_HEADER = struct.Struct("<4sIIId")
LMP_MAGIC = b"LMP1"


def encode_model(model: LampModel) -> bytes:
    T, N, M = model.T, model.F.N, model.F.M
    parts = [
        _LMP_HEADER.pack(LMP_MAGIC, T, N, M, float(model.gamma)),
        model.alpha.astype("<f8").tobytes(),
        model.beta.astype("<f8").tobytes(),
        np.asfortranarray(model.B).ravel(order="F").astype("<c16").tobytes(),
    ]
    return b"".join(parts)


def decode_model(data: bytes, f: Optional[SensingMatrix] = None) -> LampModel:
    if len(data) < _LMP_HEADER.size:
        raise FormatError("truncated LMP1 header")
    magic, T, N, M, gamma = _LMP_HEADER.unpack_from(data)
    if magic != LMP_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if T < 1:
        raise FormatError("model has no layers")
    expected = _LMP_HEADER.size + 16 * T + 16 * N * M
    if len(data) != expected:
        raise FormatError(f"LMP1 payload has {len(data)} bytes, expected {expected}")
    if not 0.0 <= gamma <= 1.0:
        raise FormatError(f"gamma {gamma} outside [0, 1]")
    off = _LMP_HEADER.size
    alpha = np.frombuffer(data, "<f8", T, off).astype(np.float64)
    beta = np.frombuffer(data, "<f8", T, off + 8 * T).astype(np.float64)
    B = np.frombuffer(data, "<c16", N * M, off + 16 * T).reshape((N, M), order="F").astype(np.complex128)
    if f is None:
        os_, rem = divmod(N - 1, 256)
        if rem or os_ < 1 or M != len(default_subcarriers()):
            raise FormatError(f"cannot infer the sensing matrix for N={N}, M={M}; pass it explicitly")
        f = build_sensing_matrix(os_)
    if (f.N, f.M) != (N, M):
        raise FormatError(f"model shape N={N}, M={M} does not match sensing matrix {f.shape}")
    return LampModel(alpha, beta, B, f, gamma)


def save_model(model: LampModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_model(model))


def load_model(path, f: Optional[SensingMatrix] = None) -> LampModel:
    """Read an LMP1 file. Without ``f`` the default dictionary for the stored ``N`` is rebuilt."""
    with open(path, "rb") as fh:
        return decode_model(fh.read(), f)
