"""Transformer block on merged sequences, plus the exact unmerged oracle.

The merged path runs merge -> biased attention -> split -> merge -> MLP ->
split with residual connections applied at full resolution.  Collapsing a
group of n keys into one concentrates n attention logits into a single entry,
which the softmax then under-weights; adding log(n) to that key's logit
scales its exponential by n and restores the mass the n constituents carried.

Axis order is (batch, token, channel).  Query rows are processed in chunks
above tensors.CHUNK_THRESHOLD keys so the score matrix never materializes at
large sequence lengths; that path trades the float64 matmul accumulation for
plain float32 BLAS, which only benchmark-scale runs ever hit.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .layout import LayoutDescriptor, TokenSequence
from .maskgen import MergeMask
from .mergesplit import (
    STRATEGY_AVERAGE,
    STRATEGY_DROP_ALL,
    MergedSequence,
    merge,
    split,
)
from .tensors import CHUNK_THRESHOLD, DTYPE, matmul

_CHUNK_ROWS = 256


@dataclass
class BlockParams:
    """Projection weights of one attention + MLP block."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    heads: int = 1

    def __post_init__(self):
        for name in ("wq", "wk", "wv", "wo", "w1", "w2"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=DTYPE))
        c = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (c, c):
                raise ShapeError(f"{name} must be square ({c}, {c})")
        if self.w1.shape[0] != c or self.w2.shape != (self.w1.shape[1], c):
            raise ShapeError("MLP weights must be (c, d_ff) and (d_ff, c)")
        if self.heads < 1 or c % self.heads != 0:
            raise ParameterError(f"channels {c} not divisible by heads {self.heads}")
        for name in ("wq", "wk", "wv", "wo", "w1", "w2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ShapeError(f"{name} contains non-finite values")

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    @property
    def d_ff(self) -> int:
        return self.w1.shape[1]

    def save(self, path) -> None:
        from . import fileio
        sections = {name: getattr(self, name)
                    for name in ("wq", "wk", "wv", "wo", "w1", "w2")}
        sections["heads"] = np.array(float(self.heads), dtype=np.float32)
        fileio.write_tensor_pack(path, sections)

    @classmethod
    def load(cls, path) -> "BlockParams":
        from . import fileio
        pack = fileio.read_tensor_pack(path)
        heads = int(pack.pop("heads", np.array(1.0)))
        return cls(heads=heads, **pack)

    @classmethod
    def random(
        cls,
        channels: int,
        d_ff: int | None = None,
        heads: int = 1,
        rng: np.random.Generator | None = None,
        scale: float = 1.0,
    ) -> "BlockParams":
        if rng is None:
            raise ParameterError("BlockParams.random requires an rng")
        if d_ff is None:
            d_ff = 4 * channels
        std = scale / math.sqrt(channels)
        return cls(
            wq=rng.normal(0.0, std, (channels, channels)),
            wk=rng.normal(0.0, std, (channels, channels)),
            wv=rng.normal(0.0, std, (channels, channels)),
            wo=rng.normal(0.0, std, (channels, channels)),
            w1=rng.normal(0.0, std, (channels, d_ff)),
            w2=rng.normal(0.0, scale / math.sqrt(d_ff), (d_ff, channels)),
            heads=heads,
        )


def gelu(x: np.ndarray) -> np.ndarray:
    """Pointwise GELU (tanh approximation)."""
    x = np.asarray(x, dtype=DTYPE)
    inner = DTYPE(math.sqrt(2.0 / math.pi)) * (x + DTYPE(0.044715) * x * x * x)
    return DTYPE(0.5) * x * (DTYPE(1.0) + np.tanh(inner))


def attention_bias(mask: MergeMask) -> np.ndarray:
    """Per-key additive logits log(n_j): zero for unmerged slots."""
    return np.log(mask.inverse_counts.astype(np.float64)).astype(DTYPE)


def _attention_rows(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                    bias: np.ndarray | None, scale: float) -> np.ndarray:
    """softmax(q k^T * scale + bias) v for one (sample, head).

    float32 BLAS throughout with float64 row sums in the softmax
    normalizer.  All row-wise math is independent of the chunking, which
    only bounds the score block's memory above CHUNK_THRESHOLD keys.
    """
    kt = np.ascontiguousarray(k.T, dtype=DTYPE)
    bias32 = None if bias is None else np.asarray(bias, dtype=DTYPE)
    out = np.empty_like(q)
    n = q.shape[0]
    rows = n if k.shape[0] <= CHUNK_THRESHOLD else _CHUNK_ROWS
    for start in range(0, n, max(rows, 1)):
        stop = min(start + max(rows, 1), n)
        s = q[start:stop] @ kt
        s *= DTYPE(scale)
        if bias32 is not None:
            s += bias32
        s -= s.max(axis=1, keepdims=True)
        np.exp(s, out=s)
        zinv = (1.0 / s.sum(axis=1, dtype=np.float64)).astype(DTYPE)
        s *= zinv[:, None]
        out[start:stop] = s @ v
    return out


def attention(x: np.ndarray, params: BlockParams,
              bias: np.ndarray | None = None) -> np.ndarray:
    """Multi-head softmax attention with output projection.

    bias, when given, is one additive logit per key: shape (tokens,) or
    (batch, tokens), shared across heads and query rows.
    """
    batch, tokens, channels = x.shape
    if channels != params.channels:
        raise ShapeError(
            f"sequence channels {channels} do not match params {params.channels}"
        )
    q = matmul(x, params.wq)
    k = matmul(x, params.wk)
    v = matmul(x, params.wv)
    dh = channels // params.heads
    scale = 1.0 / math.sqrt(dh)

    ctx = np.empty_like(x)
    for b in range(batch):
        row_bias = None
        if bias is not None:
            row_bias = bias[b] if np.ndim(bias) == 2 else bias
        for h in range(params.heads):
            sl = slice(h * dh, (h + 1) * dh)
            ctx[b, :, sl] = _attention_rows(q[b, :, sl], k[b, :, sl], v[b, :, sl],
                                            row_bias, scale)
    return matmul(ctx, params.wo)


def mlp(x: np.ndarray, params: BlockParams) -> np.ndarray:
    """Token-wise two-layer MLP with GELU."""
    return matmul(gelu(matmul(x, params.w1)), params.w2)


def oracle_block(seq: TokenSequence, params: BlockParams,
                 timings: dict | None = None) -> TokenSequence:
    """Full unmerged attention + MLP block; reference for all error metrics."""
    x = seq.tokens
    if timings is None:
        h = x + attention(x, params)
        y = h + mlp(h, params)
        return TokenSequence(layout=seq.layout, tokens=y)
    t0 = time.perf_counter()
    a = attention(x, params)
    t1 = time.perf_counter()
    timings["attention"] = timings.get("attention", 0.0) + (t1 - t0)
    h = x + a
    t2 = time.perf_counter()
    f = mlp(h, params)
    timings["mlp"] = timings.get("mlp", 0.0) + (time.perf_counter() - t2)
    return TokenSequence(layout=seq.layout, tokens=h + f)


def merged_block(
    seq: TokenSequence,
    mask: MergeMask,
    params: BlockParams,
    bias_correction: bool = True,
    strategy: str = STRATEGY_AVERAGE,
    rng: np.random.Generator | None = None,
    timings: dict | None = None,
) -> TokenSequence:
    """Attention + MLP evaluated on the merged sequence.

    Residuals are applied at full resolution, so merging only approximates
    the attention and MLP deltas.  With an all-false mask the result is
    bitwise identical to oracle_block.
    """
    x = seq.tokens

    def clocked(key, fn, *args, **kwargs):
        if timings is None:
            return fn(*args, **kwargs)
        t0 = time.perf_counter()
        result = fn(*args, **kwargs)
        timings[key] = timings.get(key, 0.0) + (time.perf_counter() - t0)
        return result

    m1 = clocked("merge_split", merge, seq, mask, strategy, rng)
    bias = None
    if bias_correction and strategy != STRATEGY_DROP_ALL and mask.merged_count > 0:
        bias = attention_bias(mask)
    a_m = clocked("attention", attention, m1.tokens, params, bias)
    a = clocked(
        "merge_split", split, MergedSequence(tokens=a_m, mask=mask, strategy=strategy)
    )
    h = TokenSequence(layout=seq.layout, tokens=x + a.tokens)

    m2 = clocked("merge_split", merge, h, mask, strategy, rng)
    f_m = clocked("mlp", mlp, m2.tokens, params)
    f = clocked(
        "merge_split", split, MergedSequence(tokens=f_m, mask=mask, strategy=strategy)
    )
    return TokenSequence(layout=seq.layout, tokens=h.tokens + f.tokens)


@dataclass(frozen=True)
class FlopCount:
    attention: int
    mlp: int

    @property
    def total(self) -> int:
        return self.attention + self.mlp


def flop_count(
    layout: LayoutDescriptor,
    mask: MergeMask | None,
    params: BlockParams,
    strategy: str = STRATEGY_AVERAGE,
) -> FlopCount:
    """Analytic FLOPs of one block at the (possibly merged) sequence length."""
    n = layout.total_tokens
    if mask is not None:
        if strategy == STRATEGY_DROP_ALL:
            n = layout.total_tokens - mask.merged_count * layout.group_size
        else:
            n = mask.merged_length
    d = params.channels
    attn = 4 * n * n * d + 8 * n * d * d
    ff = 4 * n * d * params.d_ff
    return FlopCount(attention=int(attn), mlp=int(ff))
