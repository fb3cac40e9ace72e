"""Dense linear algebra helpers, Gauss-Hermite rules and the seeded random stream."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite import hermgauss

PIVOT_TOL = 1e-12
SYMMETRY_TOL = 1e-12


class NotPositiveDefinite(ValueError):
    """Raised when a Cholesky pivot falls below the tolerance."""


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises:
        ValueError: ``a`` is not square or not symmetric within 1e-12.
        NotPositiveDefinite: some pivot is below 1e-12.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"cholesky needs a square matrix, got shape {a.shape}")
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_TOL:
        raise ValueError("cholesky needs a symmetric matrix")
    try:
        low = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    # LAPACK accepts tiny positive pivots; reject anything at or below the tolerance.
    if np.any(np.diag(low) ** 2 <= PIVOT_TOL) or not np.all(np.isfinite(low)):
        raise NotPositiveDefinite(f"pivot below {PIVOT_TOL}")
    return low


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite nodes and weights for the weight function exp(-y^2)."""

    nodes: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.nodes)


@lru_cache(maxsize=64)
def _hermgauss(n: int) -> tuple[np.ndarray, np.ndarray]:
    y, w = hermgauss(n)
    # symmetrise the tiny asymmetry from the eigen-solver
    y = 0.5 * (y - y[::-1])
    w = 0.5 * (w + w[::-1])
    y.setflags(write=False)
    w.setflags(write=False)
    return y, w


def gauss_hermite(n: int) -> QuadratureRule:
    """n-point Gauss-Hermite rule, exact for polynomials up to degree 2n-1."""
    if n < 1:
        raise ValueError("gauss_hermite needs n >= 1")
    y, w = _hermgauss(int(n))
    return QuadratureRule(y, w)


class Rng:
    """Seeded random stream on the Philox counter-based generator.

    The same seed always yields the same draw sequence.  Child streams for
    workers are derived with ``spawn(worker_index)``, which seeds
    ``SeedSequence(seed, spawn_key=(worker_index,))``.
    """

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(spawn_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, worker_index: int) -> "Rng":
        return Rng(self.seed, self.spawn_key + (int(worker_index),))

    def uniform(self, lo=0.0, hi=1.0, size=None):
        if np.any(np.asarray(lo) >= np.asarray(hi)):
            raise ValueError("uniform needs lo < hi")
        u = self._gen.random(size)
        return lo + (np.asarray(hi) - lo) * u

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


def rng_uniform(rng: Rng, lo: float, hi: float) -> float:
    return float(rng.uniform(lo, hi))


def rng_normal(rng: Rng) -> float:
    return float(rng.normal())
