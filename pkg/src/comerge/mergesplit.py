"""Merge and split operators.

Merging writes every input token through the precompiled index map, so no
concatenation of variable-length pieces is needed: unflagged tokens and
specials are copied verbatim into their slot, flagged groups collapse to one
slot holding their mean.  Splitting is the inverse gather, replicating each
merged slot back over the group's original positions.

Two alternative coalescing strategies are provided for ablations:
``pick-one`` keeps a uniformly chosen member of each flagged group and
``drop-all`` removes flagged groups entirely (split restores zeros there).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .layout import TokenSequence
from .maskgen import MergeMask
from .tensors import DTYPE

STRATEGY_AVERAGE = "average"
STRATEGY_PICK_ONE = "pick-one"
STRATEGY_DROP_ALL = "drop-all"
STRATEGIES = (STRATEGY_AVERAGE, STRATEGY_PICK_ONE, STRATEGY_DROP_ALL)


@dataclass
class MergedSequence:
    tokens: np.ndarray  # (batch, merged_length, channels)
    mask: MergeMask
    strategy: str = STRATEGY_AVERAGE

    @property
    def merged_length(self) -> int:
        return self.tokens.shape[1]


def _check_compatible(seq: TokenSequence, mask: MergeMask) -> None:
    if mask.layout != seq.layout:
        raise ShapeError("mask was compiled for a different layout")
    if mask.flags.shape[0] != seq.batch:
        raise ShapeError(
            f"mask batch {mask.flags.shape[0]} does not match sequence batch {seq.batch}"
        )


def _kept_token_ids(mask: MergeMask, sample: int) -> np.ndarray:
    """Token ids surviving drop-all for one sample (specials + unflagged)."""
    layout = mask.layout
    group_of = layout.token_group_ids()
    dropped = np.zeros(layout.total_tokens, dtype=bool)
    grouped = group_of >= 0
    dropped[grouped] = mask.flags[sample, group_of[grouped]]
    return np.flatnonzero(~dropped)


def merge(
    seq: TokenSequence,
    mask: MergeMask,
    strategy: str = STRATEGY_AVERAGE,
    rng: np.random.Generator | None = None,
) -> MergedSequence:
    _check_compatible(seq, mask)
    if strategy not in STRATEGIES:
        raise ParameterError(f"unknown merge strategy: {strategy!r}")

    batch, total, channels = seq.tokens.shape
    if strategy == STRATEGY_DROP_ALL:
        kept = [_kept_token_ids(mask, b) for b in range(batch)]
        merged = np.stack([seq.tokens[b, ids] for b, ids in enumerate(kept)])
        return MergedSequence(tokens=merged, mask=mask, strategy=strategy)

    merged_length = mask.merged_length
    out = np.empty((batch, merged_length, channels), dtype=DTYPE)
    if strategy == STRATEGY_AVERAGE:
        # Slots are contiguous token runs, so a reduceat over the slot starts
        # sums each run; float64 keeps count-1 slots a bitwise copy.
        for b in range(batch):
            sums = np.add.reduceat(seq.tokens[b].astype(np.float64),
                                   mask.slot_starts[b], axis=0)
            out[b] = (sums / mask.inverse_counts[b][:, None]).astype(DTYPE)
        return MergedSequence(tokens=out, mask=mask, strategy=strategy)

    # pick-one: every slot takes a single source token; merged slots take a
    # uniformly chosen member instead of the group head.
    if rng is None:
        raise ParameterError("pick-one strategy requires an rng")
    layout = mask.layout
    members = layout.group_members()
    n = layout.group_size
    for b in range(batch):
        source = mask.slot_starts[b].copy()
        flagged_groups = np.flatnonzero(mask.flags[b])
        if flagged_groups.size:
            picks = rng.integers(0, n, size=flagged_groups.size)
            chosen = members[flagged_groups, picks]
            source[mask.index_map[b, members[flagged_groups, 0]]] = chosen
        out[b] = seq.tokens[b, source]
    return MergedSequence(tokens=out, mask=mask, strategy=strategy)


def split(mseq: MergedSequence) -> TokenSequence:
    mask = mseq.mask
    layout = mask.layout
    batch = mseq.tokens.shape[0]
    channels = mseq.tokens.shape[2]

    if mseq.strategy == STRATEGY_DROP_ALL:
        out = np.zeros((batch, layout.total_tokens, channels), dtype=DTYPE)
        for b in range(batch):
            out[b, _kept_token_ids(mask, b)] = mseq.tokens[b]
        return TokenSequence(layout=layout, tokens=out)

    if mseq.tokens.shape[1] != mask.merged_length:
        raise ShapeError(
            f"merged length {mseq.tokens.shape[1]} does not match mask "
            f"merged length {mask.merged_length}"
        )
    out = np.empty((batch, layout.total_tokens, channels), dtype=DTYPE)
    for b in range(batch):
        out[b] = mseq.tokens[b, mask.index_map[b]]
    return TokenSequence(layout=layout, tokens=out)
