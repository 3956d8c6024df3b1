"""Deterministic randomness, dense linear algebra, and summary statistics.

Dense vectors and matrices are plain float64 numpy arrays throughout the
package.  All randomness flows through :class:`SeededRng`, a counter-based
generator with fixed, documented constants, so that identical seeds produce
bit-identical streams on every platform and any draw can be replayed from
``(seed, position)`` alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1

# SplitMix64 constants (Steele, Lea & Flood; public-domain reference code).
_GAMMA = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB

_INV_2_53 = 2.0 ** -53


def _mix64_scalar(z: int) -> int:
    """SplitMix64 finalizer on a Python int, mod 2**64."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX_A) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX_B) & _MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps mod 2**64, matching the scalar path.
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_A)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_B)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Derive an independent substream seed from integer keys.

    Folds each key into the seed with the SplitMix64 finalizer:
    ``h <- mix64(h ^ mix64(key + GAMMA))``.  Deterministic, order-sensitive,
    and collision-resistant enough for experiment bookkeeping.
    """
    if not keys:
        raise ValueError("derive_seed requires at least one key")
    h = seed & _MASK64
    for k in keys:
        h = _mix64_scalar(h ^ _mix64_scalar((int(k) + _GAMMA) & _MASK64))
    return h


class SeededRng:
    """Counter-based SplitMix64 stream.

    Output ``i`` (1-indexed) is ``mix64(seed + i * GAMMA)``; the only state
    is the number of 64-bit words consumed, so streams can be split,
    replayed, and compared across platforms.  Normal deviates use the
    Box-Muller transform (cosine branch), consuming exactly two words each.
    """

    def __init__(self, seed: int, position: int = 0):
        self.seed = int(seed) & _MASK64
        self.position = int(position)
        if self.position < 0:
            raise ValueError("position must be non-negative")

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed:#018x}, position={self.position})"

    def raw_uint64(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words as a uint64 array."""
        if n < 0:
            raise ValueError("n must be non-negative")
        idx = np.arange(self.position + 1, self.position + n + 1, dtype=np.uint64)
        self.position += n
        counters = np.uint64(self.seed) + idx * np.uint64(_GAMMA)
        return _mix64_array(counters)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` uniforms in [0, 1) with 53-bit resolution."""
        bits = self.raw_uint64(n) >> np.uint64(11)
        return bits.astype(np.float64) * _INV_2_53

    def normal(self, n: int) -> np.ndarray:
        """``n`` i.i.d. standard normals via Box-Muller."""
        u1 = ((self.raw_uint64(n) >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _INV_2_53
        u2 = self.uniform(n)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """``n`` uniform integers in [0, bound) as int64 (floor of u * bound)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        if bound > (1 << 53):
            raise ValueError("bound exceeds 53-bit sampling resolution")
        return np.minimum((self.uniform(n) * bound).astype(np.int64), bound - 1)

    def rademacher(self, n: int) -> np.ndarray:
        """``n`` independent +-1 values as float64."""
        bits = self.raw_uint64(n) >> np.uint64(63)
        return bits.astype(np.float64) * 2.0 - 1.0

    def substream(self, *keys: int) -> "SeededRng":
        """Fresh stream derived from this stream's seed and integer keys."""
        return SeededRng(derive_seed(self.seed, *keys))


def gaussian_vector(rng: SeededRng, n: int, variance: float = 1.0) -> np.ndarray:
    """Vector of ``n`` i.i.d. N(0, variance) entries."""
    if n <= 0:
        raise ValueError("gaussian_vector needs n >= 1")
    if variance < 0:
        raise ValueError("variance must be non-negative")
    return rng.normal(n) * math.sqrt(variance)


def check_symmetric(m: np.ndarray, rtol: float = 1e-12) -> None:
    """Raise if ``m`` is not square and symmetric within ``rtol * max|m|``."""
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    scale = float(np.max(np.abs(m))) if m.size else 0.0
    tol = rtol * max(scale, np.finfo(np.float64).tiny)
    if float(np.max(np.abs(m - m.T), initial=0.0)) > tol:
        raise ValueError("matrix is not symmetric within tolerance")


def sym_eig(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns ``(w, V)`` with eigenvalues ``w`` sorted descending and
    orthonormal eigenvector columns ``V[:, i]`` matching ``w[i]``, so that
    ``m = V @ diag(w) @ V.T`` up to floating-point error.
    """
    m = np.asarray(m, dtype=np.float64)
    check_symmetric(m)
    w, v = np.linalg.eigh(m)
    order = np.argsort(w)[::-1]
    return np.ascontiguousarray(w[order]), np.ascontiguousarray(v[:, order])


def pearson_corr(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two equal-length samples.

    Raises on fewer than two points, mismatched lengths, non-finite values,
    or zero variance in either input.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("inputs must have equal length")
    if a.size < 2:
        raise ValueError("need at least two points")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("inputs must be finite")
    da = a - a.mean()
    db = b - b.mean()
    na = float(np.sqrt(np.dot(da, da)))
    nb = float(np.sqrt(np.dot(db, db)))
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero variance input")
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class MeanSe:
    """Sample mean with its standard error over ``n`` draws."""

    mean: float
    se: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not math.isnan(self.se) and self.se < 0:
            raise ValueError("se must be non-negative")

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "MeanSe":
        x = np.asarray(samples, dtype=np.float64).ravel()
        if x.size < 2:
            raise ValueError("need at least two samples for a standard error")
        return cls(mean=float(x.mean()), se=float(x.std(ddof=1) / math.sqrt(x.size)), n=int(x.size))


class DenseOperator:
    """Deterministic matrix-vector oracle around an explicit symmetric matrix.

    Used wherever a curvature operator is needed but the matrix is small
    enough to hold: unit tests, closed-form baselines, and exact references.
    """

    def __init__(self, matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=np.float64)
        check_symmetric(matrix)
        self.matrix = matrix
        self.n_params = matrix.shape[0]
        self.segments = (("all", 0, self.n_params),)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n_params,):
            raise ValueError(f"expected vector of length {self.n_params}")
        return self.matrix @ v
