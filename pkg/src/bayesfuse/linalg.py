"""Dense float64 math and counter-based random streams.

Everything downstream (heads, training, prediction) is built on two
primitives: row-major float64 matrices (plain numpy arrays) and splittable
random streams.  A stream is keyed by ``(seed, stream_id)``; drawing from it
advances a local counter only, and ``child()`` derives an independent stream
without touching the parent.  Library functions that accept a stream treat
it as a key: they only ever draw from children, so passing the same stream
value twice replays the same randomness.

All internal math is float64.  32-bit floats appear only in file formats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "RngStream",
    "derive_seed",
    "matmul",
    "softmax_rows",
    "sample_gaussian",
    "sample_rademacher",
]

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def derive_seed(seed: int, *indices: int) -> int:
    """Mix integer indices into a seed, giving a decorrelated derived seed."""
    out = _splitmix64(seed & _MASK64)
    for ix in indices:
        out = _splitmix64(out ^ _splitmix64(ix & _MASK64))
    return out


@dataclass
class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Two streams with equal ``(seed, stream_id)`` replay identical sequences;
    distinct stream ids are statistically independent (distinct Philox keys).
    Each draw call claims its own 2^192-block slice of the Philox counter
    space, so consecutive draws can never overlap regardless of how much a
    single call consumes.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def child(self, *indices: int) -> "RngStream":
        """Derive an independent stream; pure in ``(stream_id, indices)``."""
        sid = self.stream_id
        for ix in indices:
            sid = _splitmix64(sid ^ _splitmix64(ix & _MASK64))
        return RngStream(self.seed, sid, 0)

    def clone(self) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.counter)

    def _next_generator(self) -> np.random.Generator:
        # counter[3] is the most-significant word of the 256-bit Philox
        # counter; bumping it per call keeps calls 2^192 blocks apart.
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        ctr = np.array([0, 0, 0, self.counter & _MASK64], dtype=np.uint64)
        self.counter = (self.counter + 1) & _MASK64
        return np.random.Generator(np.random.Philox(counter=ctr, key=key))

    def normal(self, rows: int, cols: int | None = None) -> np.ndarray:
        """Standard-normal draws via Box-Muller on the counter stream."""
        n = self._check_dims(rows, cols)
        g = self._next_generator()
        half = (n + 1) // 2
        u1 = g.random(half)
        u2 = g.random(half)
        # u1 in [0, 1), so log1p(-u1) stays finite.
        radius = np.sqrt(-2.0 * np.log1p(-u1))
        angle = (2.0 * np.pi) * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        return z if cols is None else z.reshape(rows, cols)

    def rademacher(self, rows: int, cols: int | None = None) -> np.ndarray:
        """Uniform draws from {-1.0, +1.0}."""
        n = self._check_dims(rows, cols)
        g = self._next_generator()
        z = g.integers(0, 2, size=n).astype(np.float64) * 2.0 - 1.0
        return z if cols is None else z.reshape(rows, cols)

    def uniform(self, rows: int, cols: int | None = None) -> np.ndarray:
        """Uniform draws from [0, 1)."""
        n = self._check_dims(rows, cols)
        z = self._next_generator().random(n)
        return z if cols is None else z.reshape(rows, cols)

    def integers(self, low: int, high: int, size: int | None = None):
        """Integer draws from [low, high)."""
        if high <= low:
            raise ShapeError(f"integers() needs low < high, got [{low}, {high})")
        out = self._next_generator().integers(low, high, size=size)
        return int(out) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        if n < 0:
            raise ShapeError(f"permutation() needs n >= 0, got {n}")
        return self._next_generator().permutation(n)

    @staticmethod
    def _check_dims(rows: int, cols: int | None) -> int:
        if rows <= 0 or (cols is not None and cols <= 0):
            raise ShapeError(f"sampling needs positive dims, got ({rows}, {cols})")
        return rows if cols is None else rows * cols


def _as_matrix(x, name: str) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    """Standard matrix product with an explicit shape check."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}: inner dims differ")
    return a @ b


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax with max-subtraction for stability.

    Accepts a matrix or a single row vector; raises NumericError on
    non-finite input.
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax_rows: input contains non-finite entries")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample_gaussian(stream: RngStream, rows: int, cols: int) -> np.ndarray:
    """Matrix of i.i.d. standard-normal entries, deterministic in the stream."""
    return stream.normal(rows, cols)


def sample_rademacher(stream: RngStream, rows: int, cols: int) -> np.ndarray:
    """Matrix of i.i.d. {-1, +1} entries, each sign with probability 1/2."""
    return stream.rademacher(rows, cols)
