"""Dense float64 array kernel.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.  The
functions here add strict shape checking (no implicit broadcasting) and a
finiteness guard on every result, and route the adapter hot kernels to the
compiled backend when it is available (see :mod:`nanovoice.kernels`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionError, NonFiniteError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def check_finite(x: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite value in {what}")
    return x


def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul")


def batched_matmul(a, b) -> np.ndarray:
    """Slice-wise product ``out[n] = a[n] @ b[n]``; no broadcasting across the batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3:
        raise DimensionError(f"batched_matmul expects 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"batch sizes differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[2] != b.shape[1]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return check_finite(np.matmul(a, b), "batched_matmul")


def column_norms(v) -> np.ndarray:
    """Euclidean norm of every column of a d x k matrix, returned as 1 x k."""
    v = as_tensor(v)
    if v.ndim != 2:
        raise DimensionError(f"column_norms expects a 2-D matrix, got shape {v.shape}")
    return check_finite(kernels.backend.column_norms(v[None])[0][None, :], "column_norms")


@dataclass
class RngStream:
    """Counter-based Gaussian/uniform stream keyed by ``(seed, stream_id)``.

    Every draw call uses a fresh Philox counter block indexed by ``counter``, so
    the values a stream produces never depend on how its calls interleave with
    any other stream.
    """

    seed: int
    stream_id: int = 0
    counter: int = field(default=0)

    def __post_init__(self):
        # numpy integers would overflow the 64-bit masking below
        self.seed, self.stream_id = int(self.seed), int(self.stream_id)

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        ctr = np.array([0, 0, self.counter, 0], dtype=np.uint64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key, counter=ctr))

    def fork(self, salt: int) -> "RngStream":
        """Independent stream for a different purpose (same stream_id, derived seed)."""
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, salt])
        return RngStream(int(seq.generate_state(1, np.uint64)[0]), self.stream_id)

    def randn(self, shape) -> np.ndarray:
        return self._generator().standard_normal(shape)

    def uniform(self, low: float, high: float, shape=None):
        return self._generator().uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None):
        return self._generator().integers(low, high, shape)


def randn(stream: RngStream, shape) -> np.ndarray:
    return stream.randn(shape)
