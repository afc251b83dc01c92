"""Dense numeric kernels: orthonormal DCT, pseudoinverse, PCA and a portable RNG."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MASK64 = (1 << 64) - 1


class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# DCT
# ---------------------------------------------------------------------------


@lru_cache(maxsize=32)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis, rows are frequencies.

    ``dct_matrix(n) @ x`` is the 1-D transform; the matrix is orthogonal so its
    transpose is the inverse (DCT-III).
    """
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0, :] = np.sqrt(1.0 / n)
    m.setflags(write=False)
    return m


def _check_2d(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise DimensionError(f"expected a non-empty 2-D array, got shape {a.shape}")
    return a


def dct2(img: np.ndarray) -> np.ndarray:
    img = _check_2d(img)
    h, w = img.shape
    return dct_matrix(h) @ img @ dct_matrix(w).T


def idct2(coeffs: np.ndarray) -> np.ndarray:
    coeffs = _check_2d(coeffs)
    h, w = coeffs.shape
    return dct_matrix(h).T @ coeffs @ dct_matrix(w)


# ---------------------------------------------------------------------------
# Pseudoinverse
# ---------------------------------------------------------------------------


def pinv(m: np.ndarray, tol: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudoinverse via full SVD.

    Singular values below ``tol * sigma_max`` are treated as zero. The default
    relative tolerance is ``eps * max(rows, cols)``.
    """
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"pinv expects a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError("pinv input contains non-finite values")
    if tol is None:
        tol = np.finfo(np.float64).eps * max(a.shape)
    if tol < 0:
        raise ParameterError("tol must be >= 0")
    if a.size == 0:
        return np.zeros((a.shape[1], a.shape[0]))
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    cutoff = tol * s[0] if s.size else 0.0
    keep = s > cutoff
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (vt.T * s_inv) @ u.T


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # (d,)
    components: np.ndarray  # (k, d), orthonormal rows
    variances: np.ndarray  # (k,), nonincreasing

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def k(self) -> int:
        return self.components.shape[0]


def pca_fit(data: np.ndarray, k: int) -> PcaModel:
    """Fit a PCA model from the SVD of mean-centred rows.

    Each component's largest-magnitude entry is made positive so fits are
    reproducible bit for bit.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"pca_fit expects (n, d) data, got shape {x.shape}")
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise ParameterError(f"k must lie in [1, {min(n, d)}], got {k}")
    mean = x.mean(axis=0)
    centred = x - mean
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:k].copy()
    pivots = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), pivots])
    signs[signs == 0] = 1.0
    comps *= signs[:, None]
    denom = max(n - 1, 1)
    variances = (s[:k] ** 2) / denom
    return PcaModel(mean=mean, components=comps, variances=variances)


def pca_project(model: PcaModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise DimensionError(f"expected dimension {model.dim}, got {x.shape[-1]}")
    return (x - model.mean) @ model.components.T


def pca_reconstruct(model: PcaModel, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.k:
        raise DimensionError(f"expected {model.k} coefficients, got {z.shape[-1]}")
    return z @ model.components + model.mean


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Rng:
    """xoshiro256** generator seeded through SplitMix64.

    Pure integer arithmetic, so a given seed yields the same stream on every
    platform. Not thread-safe; give each consumer its own instance.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        sm = self.seed
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        if size is None:
            return low + (high - low) * self.random()
        shape = (size,) if isinstance(size, int) else tuple(size)
        count = int(np.prod(shape)) if shape else 1
        raw = np.fromiter((self.next_u64() >> 11 for _ in range(count)), dtype=np.float64, count=count)
        return (low + (high - low) * raw * (1.0 / (1 << 53))).reshape(shape)

    def integers(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ParameterError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        # Box-Muller, one value per call; 1 - u keeps log away from zero
        u1 = 1.0 - self.random()
        u2 = self.random()
        return mean + std * float(np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2))

    def permutation(self, n: int) -> np.ndarray:
        idx = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def spawn(self) -> "Rng":
        """Child generator seeded from this stream."""
        return Rng(self.next_u64())
