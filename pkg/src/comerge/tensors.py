"""Dense float32 tensor primitives.

Values are stored as float32 in row-major numpy arrays; reductions inside
matmul and softmax accumulate in float64 so results stay tight against
scalar reference implementations.  Axis order everywhere in this package is
(batch, token, channel).
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError

DTYPE = np.float32

# Above this many key columns, softmax attention consumers switch to a
# row-chunked evaluation to bound peak memory (see block.attention).
CHUNK_THRESHOLD = 8192


def as_tensor(values, name: str = "tensor") -> np.ndarray:
    """Coerce to a C-contiguous float32 array and reject non-finite values."""
    arr = np.ascontiguousarray(values, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


def check_finite(arr: np.ndarray, name: str = "tensor") -> None:
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, result cast back to float32.

    Supports stacked (batched) operands under numpy broadcasting rules.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return out.astype(DTYPE)


def softmax_rows(logits: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Row softmax over the last axis with optional per-column additive bias.

    Stabilized by row-max subtraction; the max and the normalizing sum are
    taken in float64.  Rows of the result sum to 1 within 1e-6.
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim < 1 or x.shape[-1] == 0:
        raise DomainError("softmax_rows requires a non-empty last axis")
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape[-1] != x.shape[-1]:
            raise ShapeError(
                f"bias length {bias.shape[-1]} does not match row length {x.shape[-1]}"
            )
        x = x + bias
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=-1, keepdims=True)
    return out.astype(DTYPE)


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic counter-based generator (Philox); same seed, same stream."""
    return np.random.Generator(np.random.Philox(int(seed)))
