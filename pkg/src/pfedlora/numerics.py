"""Dense matrices, seeded random streams, top-k selection and mask similarity.

Matrices are plain 2-D ``float64`` numpy arrays and binary masks are 2-D
``bool`` arrays; no wrapper types are introduced for either.
"""

from __future__ import annotations

import math

import numpy as np

from .exceptions import ConfigError, DataError
from .validation import check_fraction


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


class RngStream:
    """Deterministic random stream addressed by ``(seed, *stream_ids)``.

    Streams are built with :class:`numpy.random.SeedSequence` spawn keys, so
    two streams with different ids are statistically independent and a
    stream's output never depends on which other streams were drawn first.
    The bit generator is PCG64.

    Gaussian draws use the Box-Muller transform on PCG64 uniform doubles
    (``z0 = sqrt(-2 ln u1) cos(2 pi u2)``, ``z1 = sqrt(-2 ln u1) sin(2 pi u2)``
    with ``u1`` in (0, 1]), which keeps the Gaussian sequence defined by this
    module rather than by numpy's ziggurat tables.
    """

    def __init__(self, seed: int, *stream_ids: int):
        if seed < 0:
            raise ConfigError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.stream_ids = tuple(int(s) for s in stream_ids)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream_ids)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_ids={self.stream_ids})"

    def child(self, *stream_ids: int) -> "RngStream":
        return RngStream(self.seed, *self.stream_ids, *stream_ids)

    def uniform(self, size) -> np.ndarray:
        return self._gen.random(size)

    def standard_normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self._gen.random((2, pairs))
        radius = np.sqrt(-2.0 * np.log1p(-u[0]))  # 1 - u in (0, 1]
        angle = 2.0 * math.pi * u[1]
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:n]

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct integers from ``range(n)``, in draw order."""
        if k > n:
            raise ConfigError(f"cannot draw {k} distinct items from {n}")
        return self._gen.choice(n, size=k, replace=False)

    def dirichlet(self, alpha) -> np.ndarray:
        return self._gen.dirichlet(alpha)


def sample_gaussian(rng: RngStream, rows: int, cols: int, variance: float) -> np.ndarray:
    """i.i.d. ``N(0, variance)`` matrix drawn with Box-Muller."""
    if variance < 0:
        raise ConfigError(f"variance must be non-negative, got {variance}")
    z = rng.standard_normal(rows * cols).reshape(rows, cols)
    return z * math.sqrt(variance)


def top_k_indices(values, k: int) -> np.ndarray:
    """Flat indices of the ``k`` largest values, ties to the lower index.

    Returned indices are sorted ascending.
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    if not 0 <= k <= flat.size:
        raise ConfigError(f"k={k} outside [0, {flat.size}]")
    # lexsort: last key is primary -> descending value, then ascending index
    order = np.lexsort((np.arange(flat.size), -flat))
    return np.sort(order[:k])


def percentile_threshold(values, fraction_below: float) -> float:
    """Score threshold separating the bottom ``fraction_below`` from the rest.

    ``floor(fraction_below * n)`` values are dropped and the rest retained;
    the returned value is the smallest retained score (``inf`` when nothing is
    retained). Because equal scores may straddle the cut, use
    :func:`retained_indices` when the exact retained set matters.
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        raise DataError("percentile_threshold needs at least one value")
    keep = flat.size - _n_below(flat.size, fraction_below)
    if keep == 0:
        return math.inf
    return float(flat[top_k_indices(flat, keep)].min())


def retained_indices(values, fraction_below: float) -> np.ndarray:
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        raise DataError("retained_indices needs at least one value")
    return top_k_indices(flat, flat.size - _n_below(flat.size, fraction_below))


def _n_below(n: int, fraction_below: float) -> int:
    fraction_below = check_fraction(fraction_below, "fraction_below")
    return int(math.floor(fraction_below * n + 1e-12))


def hamming_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """``1 - (differing bits / total bits)`` between two equal-shape masks."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ConfigError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 1.0
    return 1.0 - np.count_nonzero(a ^ b) / a.size
