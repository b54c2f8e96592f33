"""Dense float64 tensor helpers and the seeded generator used everywhere.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float64.
Randomness goes through :class:`Rng`, a thin wrapper around numpy's PCG64
bit generator so that every stream is fully determined by its integer seed.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


class ShapeError(ValueError):
    pass


def tensor(values, shape: Sequence[int] | None = None) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(values, dtype=DTYPE))
    if shape is not None:
        out = out.reshape(tuple(shape))
    return out


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(tuple(shape), dtype=DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return np.matmul(a.astype(DTYPE, copy=False), b.astype(DTYPE, copy=False))


def ewise(op: str, a, b=None, *, fn: Callable | None = None) -> np.ndarray:
    """Elementwise ``add``/``sub``/``mul`` (tensor or scalar ``b``), ``scale`` or ``map``.

    Broadcasting is limited to a scalar right operand.
    """
    a = np.asarray(a, dtype=DTYPE)
    if op == "scale":
        return a * float(b)
    if op == "map":
        if fn is None:
            raise ValueError("map requires fn")
        return np.asarray(fn(a), dtype=DTYPE)
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    b = np.asarray(b, dtype=DTYPE)
    if b.ndim != 0 and b.shape != a.shape:
        raise ShapeError(f"operand shapes differ: {a.shape} vs {b.shape}")
    return _BINARY[op](a, b)


class Rng:
    """Seeded PCG64 stream. Same seed, same numbers."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def reseed(self, seed: int | None = None) -> None:
        self.__init__(self.seed if seed is None else seed)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from this seed and an integer key."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        child = Rng.__new__(Rng)
        child.seed = int(ss.generate_state(1, np.uint64)[0])
        child._gen = np.random.Generator(np.random.PCG64(ss))
        return child

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        return rand_uniform(self, shape, lo, hi)

    def normal(self, shape, sigma: float = 1.0) -> np.ndarray:
        return rand_normal(self, shape, sigma)

    def poisson(self, lam) -> np.ndarray:
        return self._gen.poisson(lam)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, lo: int, hi: int, size=None):
        return self._gen.integers(lo, hi, size=size)


def rand_uniform(rng: Rng, shape, lo: float, hi: float) -> np.ndarray:
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi})")
    # random() is on [0, 1); the affine map can round up to hi for wide ranges
    out = lo + (hi - lo) * rng.generator.random(tuple(np.atleast_1d(shape)), dtype=DTYPE)
    return np.where(out >= hi, np.nextafter(hi, lo), out)


def rand_normal(rng: Rng, shape, sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return sigma * rng.generator.standard_normal(tuple(np.atleast_1d(shape)), dtype=DTYPE)


def checksum(arrays) -> str:
    import hashlib

    h = hashlib.sha256()
    for arr in arrays:
        h.update(np.ascontiguousarray(arr, dtype=DTYPE).tobytes())
    return h.hexdigest()
