"""Sensing operator and synthetic data generation.

The measurement model is ``Y = F X + noise`` where ``F`` is a partial,
oversampled DFT matrix (M measured subcarriers by N delay taps), ``X`` is a
row-sparse delay-domain matrix whose P columns share one support and ``Y``
holds the frequency-domain observations of all P spatial paths.

Every generator takes an explicit integer seed and builds its own
``numpy.random.Generator``; nothing here touches global random state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateInputError, ParameterError

__all__ = [
    "SensingMatrix",
    "OffGridChannel",
    "default_subcarriers",
    "build_sensing_matrix",
    "row_support",
    "complex_normal",
    "generate_sparse_sample",
    "synthesize_measurements",
    "generate_offgrid_channel",
    "normalize_measurements",
]

FFT_SIZE = 1024
MAX_DELAY_TAPS = 256


def default_subcarriers() -> list[int]:
    """Every 12th subcarrier of ``[-312, ..., 311]`` (52 pilots)."""
    return list(range(-312, 312, 12))


@dataclass(frozen=True, eq=False)
class SensingMatrix:
    """Partial oversampled DFT dictionary together with its construction parameters.

    ``entries`` is stored read-only so that solvers and training cannot modify
    it in place.
    """

    entries: np.ndarray
    os: int
    fft_size: int
    subcarriers: Tuple[int, ...]
    max_delay_taps: int
    _adjoint: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.entries.setflags(write=False)
        adj = np.ascontiguousarray(self.entries.conj().T)
        adj.setflags(write=False)
        object.__setattr__(self, "_adjoint", adj)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.entries.shape

    @property
    def M(self) -> int:
        return self.entries.shape[0]

    @property
    def N(self) -> int:
        return self.entries.shape[1]

    @property
    def H(self) -> np.ndarray:
        """Conjugate transpose of ``entries`` (cached, contiguous)."""
        return self._adjoint

    @classmethod
    def from_array(cls, entries: np.ndarray, os: int = 1, fft_size: int = FFT_SIZE,
                   subcarriers: Optional[Sequence[int]] = None,
                   max_delay_taps: Optional[int] = None) -> "SensingMatrix":
        """Wrap an arbitrary dense complex matrix (used for random test dictionaries)."""
        entries = np.array(entries, dtype=np.complex128)
        if entries.ndim != 2:
            raise ParameterError("sensing matrix must be two-dimensional")
        m, n = entries.shape
        if subcarriers is None:
            subcarriers = range(m)
        if max_delay_taps is None:
            max_delay_taps = max((n - 1) // max(os, 1), 0)
        return cls(entries, int(os), int(fft_size), tuple(int(v) for v in subcarriers),
                   int(max_delay_taps))


def build_sensing_matrix(os: int, fft_size: int = FFT_SIZE, max_delay_taps: int = MAX_DELAY_TAPS,
                         subcarriers: Optional[Sequence[int]] = None) -> SensingMatrix:
    """Build ``F[m, n] = exp(-2j*pi*f_m*n / (fft_size*os)) / sqrt(fft_size)``.

    Columns are indexed by ``n = 0, 1, ..., max_delay_taps*os`` (inclusive), so
    ``N = max_delay_taps*os + 1``.
    """
    if int(os) != os or os < 1:
        raise ParameterError(f"oversampling factor must be a positive integer, got {os!r}")
    if fft_size < 1 or max_delay_taps < 1:
        raise ParameterError("fft_size and max_delay_taps must be positive")
    if subcarriers is None:
        subcarriers = default_subcarriers()
    freqs = np.asarray(list(subcarriers), dtype=np.int64)
    if freqs.size == 0:
        raise ParameterError("subcarrier list is empty")
    half = fft_size // 2
    if freqs.min() < -half or freqs.max() >= fft_size - half:
        raise ParameterError(f"subcarriers must lie in [{-half}, {fft_size - half})")

    os = int(os)
    n = np.arange(max_delay_taps * os + 1, dtype=np.int64)
    # reduce f*n modulo the period before scaling to keep the phase argument small
    period = fft_size * os
    phase = np.mod(np.outer(freqs, n), period) / period
    entries = np.exp(-2j * np.pi * phase) / np.sqrt(fft_size)
    return SensingMatrix(entries, os, int(fft_size), tuple(int(v) for v in freqs), int(max_delay_taps))


def row_support(x: np.ndarray) -> np.ndarray:
    """Sorted indices of rows of ``x`` with nonzero l2 norm."""
    x = np.asarray(x)
    if x.ndim == 1:
        return np.flatnonzero(x)
    return np.flatnonzero(np.any(x != 0, axis=1))


def complex_normal(rng: np.random.Generator, shape, var: float = 1.0) -> np.ndarray:
    """Circular complex Gaussian draws with ``E|z|^2 = var``."""
    scale = np.sqrt(var / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def generate_sparse_sample(n: int, p: int, s: int, rng_seed: int) -> np.ndarray:
    """Draw an ``n x p`` matrix with exactly ``s`` nonzero rows.

    The support is uniform without replacement; the nonzero entries are i.i.d.
    standard complex Gaussian.
    """
    if p < 1 or n < 1:
        raise ParameterError("n and p must be positive")
    if not 1 <= s <= n:
        raise ParameterError(f"sparsity must satisfy 1 <= s <= n, got s={s}, n={n}")
    rng = np.random.default_rng(rng_seed)
    rows = np.sort(rng.choice(n, size=s, replace=False))
    x = np.zeros((n, p), dtype=np.complex128)
    x[rows] = complex_normal(rng, (s, p))
    return x


def _add_noise(clean: np.ndarray, snr_db: Optional[float], rng: np.random.Generator) -> np.ndarray:
    if snr_db is None:
        return clean.copy()
    power = np.vdot(clean, clean).real
    var = power / (clean.size * 10.0 ** (snr_db / 10.0))
    return clean + complex_normal(rng, clean.shape, var)


def synthesize_measurements(f: SensingMatrix, x: np.ndarray, snr_db: Optional[float] = None,
                            rng_seed: int = 0) -> np.ndarray:
    """Return ``F @ x`` plus complex Gaussian noise at ``snr_db`` (noiseless if ``None``).

    The noise variance is set so that ``||F x||^2 / E||noise||^2 = 10**(snr_db/10)``.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != f.N:
        raise ParameterError(f"x must have shape ({f.N}, P), got {x.shape}")
    return _add_noise(f.entries @ x, snr_db, np.random.default_rng(rng_seed))


@dataclass(frozen=True, eq=False)
class OffGridChannel:
    """Continuous-delay channel: ``s`` common delays in (0, 1) and an ``s x P`` gain matrix."""

    delays: np.ndarray
    gains: np.ndarray
    snr_db: Optional[float]

    def __post_init__(self):
        if self.delays.ndim != 1 or self.delays.size < 1:
            raise ParameterError("at least one delay is required")
        if np.any(np.diff(self.delays) <= 0):
            raise ParameterError("delays must be strictly increasing")

    def response(self, f: SensingMatrix) -> np.ndarray:
        """Noiseless frequency response on the subcarriers of ``f`` (M x P)."""
        freqs = np.asarray(f.subcarriers, dtype=np.float64)
        steer = np.exp(-2j * np.pi * np.outer(freqs, self.delays) * f.max_delay_taps / f.fft_size)
        return (steer / np.sqrt(f.fft_size)) @ self.gains


def generate_offgrid_channel(p: int, s: int, f: SensingMatrix, snr_db: Optional[float],
                             rng_seed: int) -> Tuple[np.ndarray, OffGridChannel]:
    """Draw an off-grid test channel and its (noisy) measurements.

    Delays are uniform in (0, 1), shared by all ``p`` paths and not snapped to
    the delay grid. Tap powers decay exponentially so the last tap carries a
    tenth of the first tap's power.
    """
    if s < 1 or p < 1:
        raise ParameterError("s and p must be positive")
    rng = np.random.default_rng(rng_seed)
    delays = np.sort(rng.uniform(0.0, 1.0, size=s))
    while np.any(np.diff(delays) <= 0) or delays[0] <= 0.0:
        delays = np.sort(rng.uniform(0.0, 1.0, size=s))
    power = 10.0 ** (-np.arange(s) / (s - 1)) if s > 1 else np.ones(1)
    gains = np.sqrt(power)[:, None] * complex_normal(rng, (s, p))
    channel = OffGridChannel(delays, gains, snr_db)
    y = _add_noise(channel.response(f), snr_db, rng)
    return y, channel


def normalize_measurements(y: np.ndarray) -> np.ndarray:
    """Scale ``y`` to unit Frobenius norm."""
    y = np.asarray(y)
    norm = np.linalg.norm(y)
    if not norm > 0:
        raise DegenerateInputError("cannot normalize a zero measurement matrix")
    return y / norm
