"""Dense float64 arrays and seeded random streams shared by every module.

Tensors are plain ``numpy.ndarray`` objects with dtype ``float64``.

Random streams
--------------
:class:`Rng` wraps numpy's Philox4x64-10 counter-based bit generator.  The
128-bit Philox key is the pair ``(seed, stream)`` as two unsigned 64-bit
words, and the counter starts at zero, so a given ``(seed, stream)`` always
yields the same sequence on every platform.  Distinct stream ids are distinct
keys, which Philox maps to independent streams.

Child streams (``Rng.child(i)``) derive a new stream id with SplitMix64::

    child_stream = splitmix64(stream ^ splitmix64(i + 1))

using the standard SplitMix64 constants (increment ``0x9E3779B97F4A7C15``,
multipliers ``0xBF58476D1CE4E5B9`` and ``0x94D049BB133111EB``, shifts 30, 27,
31).  The seed is kept, so the whole tree of streams is a pure function of the
root ``(seed, stream)``.
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np

MASK64 = (1 << 64) - 1

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def splitmix64(x: int) -> int:
    """One SplitMix64 output for state ``x`` (pure integer arithmetic)."""
    z = (x + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


class Rng:
    """Seeded Philox stream addressed by ``(seed, stream)``.

    Sampling advances the internal counter, so results depend on the call
    sequence as well as on the address.  Use :meth:`child` to hand independent
    streams to parallel workers or per-item loops.
    """

    def __init__(self, seed: int = 0, stream: int = 0):
        self.seed = int(seed) & MASK64
        self.stream = int(stream) & MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def child(self, index: int) -> Rng:
        """Fresh stream for sub-task ``index``; independent of this stream's position."""
        if index < 0:
            raise ValueError("child index must be nonnegative")
        return Rng(self.seed, splitmix64(self.stream ^ splitmix64(index + 1)))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(_shape(shape))

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(_shape(shape))

    def integers(self, high: int, size) -> np.ndarray:
        return self._gen.integers(0, high, size=_shape(size))


def _shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ValueError(f"negative extent in shape {shape}")
    return shape


def as_tensor(x, *, allow_nonfinite: bool = False) -> np.ndarray:
    """Convert to a float64 array, rejecting NaN/Inf unless allowed."""
    arr = np.asarray(x, dtype=np.float64)
    if not allow_nonfinite and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def check_same_shape(*arrays: np.ndarray) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def sample_standard_normal(rng: Rng, shape) -> np.ndarray:
    """I.i.d. N(0, 1) entries of the given shape."""
    return rng.normal(shape)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sample_logit_normal(rng: Rng, n: int) -> np.ndarray:
    """Draw ``n`` values ``sigmoid(z)`` with ``z ~ N(0, 1)``.

    The result is clipped into the open interval so that extreme normals
    (|z| > ~37) cannot round to exactly 0 or 1.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    t = sigmoid(rng.normal(n))
    tiny = np.finfo(np.float64).tiny
    return np.clip(t, tiny, np.nextafter(1.0, 0.0))


def reduce_stats(x, axes: int | Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population standard deviation over ``axes`` (all axes if None).

    Sums go through ``math.fsum`` so the result is correctly rounded and does
    not depend on element order.
    """
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    else:
        axes = tuple(int(a) for a in axes)
    for a in axes:
        if not -x.ndim <= a < x.ndim:
            raise ValueError(f"axis {a} out of range for shape {x.shape}")
    axes = tuple(sorted({a % x.ndim for a in axes})) if x.ndim else ()
    count = int(np.prod([x.shape[a] for a in axes], dtype=np.int64))
    if count == 0:
        raise ValueError("empty reduction")
    keep = [a for a in range(x.ndim) if a not in axes]
    rows = np.transpose(x, keep + list(axes)).reshape(-1, count)
    mean = np.array([math.fsum(r) / count for r in rows])
    var = np.array([math.fsum((r - m) ** 2) / count for r, m in zip(rows, mean)])
    out_shape = tuple(x.shape[a] for a in keep)
    return mean.reshape(out_shape), np.sqrt(var).reshape(out_shape)
