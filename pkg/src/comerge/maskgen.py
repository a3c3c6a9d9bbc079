"""Merge-mask generation.

Per-token confidence is pooled into per-group averages; the k = floor(p * G)
lowest-scoring groups of each sample are flagged for merging, with ties broken
toward the lower group index.  Because k depends only on (p, G), every sample
in a batch ends up with the same merged length, which keeps batched inference
shapes uniform.

The flags are compiled once into an index map by an exclusive scan over a
"starts new output slot" indicator; the compiled map is immutable and reused
by every subsequent merge/split call site.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ParameterError, ShapeError
from .layout import LayoutDescriptor, TokenSequence

SOURCE_TEACHER = "teacher"
SOURCE_PREDICTOR = "predictor"

# Special tokens carry +inf so no percentile selection can ever pick them.
SPECIAL_SENTINEL = np.inf


@dataclass
class ConfidenceMap:
    """Per-token confidence, (batch, total_tokens); specials hold +inf."""

    values: np.ndarray
    source: str = SOURCE_TEACHER

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ShapeError("confidence values must be (batch, total_tokens)")
        if self.source not in (SOURCE_TEACHER, SOURCE_PREDICTOR):
            raise ParameterError(f"unknown confidence source: {self.source!r}")
        if np.isnan(self.values).any() or np.isneginf(self.values).any():
            raise DomainError("confidence values must be finite or +inf sentinels")

    @classmethod
    def from_patch_values(
        cls, layout: LayoutDescriptor, patch_values: np.ndarray, source: str = SOURCE_TEACHER
    ) -> "ConfidenceMap":
        """Build a full map from per-patch values (batch, frames*patches)."""
        patch_values = np.asarray(patch_values, dtype=np.float32)
        if patch_values.ndim != 2 or patch_values.shape[1] != layout.frames * layout.patches_per_frame:
            raise ShapeError(
                f"patch values must be (batch, {layout.frames * layout.patches_per_frame})"
            )
        batch = patch_values.shape[0]
        values = np.full((batch, layout.total_tokens), SPECIAL_SENTINEL, dtype=np.float32)
        values[:, layout.image_token_ids()] = patch_values
        return cls(values=values, source=source)

    def patch_values(self, layout: LayoutDescriptor) -> np.ndarray:
        return self.values[:, layout.image_token_ids()]


@dataclass
class MergeMask:
    """Compiled per-sample merge decisions.

    flags          -- (batch, total_groups) bool
    merged_count   -- k, identical for every sample in the batch
    index_map      -- (batch, total_tokens) output slot of each input token
    inverse_counts -- (batch, merged_length) tokens represented by each slot
    slot_starts    -- (batch, merged_length) first input token of each slot
    """

    layout: LayoutDescriptor
    flags: np.ndarray
    merged_count: int
    index_map: np.ndarray = field(repr=False)
    inverse_counts: np.ndarray = field(repr=False)
    slot_starts: np.ndarray = field(repr=False)

    @property
    def batch(self) -> int:
        return self.flags.shape[0]

    @property
    def merged_length(self) -> int:
        return self.layout.total_tokens - self.merged_count * (self.layout.group_size - 1)


def group_confidence(conf: ConfidenceMap, layout: LayoutDescriptor) -> np.ndarray:
    """(batch, total_groups) arithmetic mean of member-token confidences."""
    if conf.values.shape[1] != layout.total_tokens:
        raise ShapeError(
            f"confidence token axis {conf.values.shape[1]} does not match layout"
        )
    members = layout.group_members()
    grouped = conf.values[:, members].astype(np.float64)
    return grouped.mean(axis=2).astype(np.float32)


def merged_count_for(p: float, total_groups: int) -> int:
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"merge ratio must lie in [0, 1), got {p}")
    return int(np.floor(p * total_groups))


def flags_for_lowest(scores: np.ndarray, k: int) -> np.ndarray:
    """Flag the k lowest scores per row, ties broken toward lower index."""
    batch, groups = scores.shape
    flags = np.zeros((batch, groups), dtype=bool)
    if k == 0:
        return flags
    order = np.argsort(scores, axis=1, kind="stable")
    rows = np.repeat(np.arange(batch), k)
    flags[rows, order[:, :k].reshape(-1)] = True
    return flags


def build_mask(group_conf: np.ndarray, p: float, layout: LayoutDescriptor) -> MergeMask:
    """Flag the floor(p*G) lowest-confidence groups of each sample."""
    group_conf = np.asarray(group_conf)
    if group_conf.ndim != 2 or group_conf.shape[1] != layout.total_groups:
        raise ShapeError(
            f"group confidences must be (batch, {layout.total_groups})"
        )
    if layout.total_groups < 1:
        raise DomainError("layout has no groups to select from")
    k = merged_count_for(p, layout.total_groups)
    flags = flags_for_lowest(group_conf, k)
    return compile_mask(flags, layout)


def compile_mask(flags: np.ndarray, layout: LayoutDescriptor) -> MergeMask:
    """Compile per-sample group flags into a MergeMask."""
    flags = np.asarray(flags, dtype=bool)
    if flags.ndim != 2 or flags.shape[1] != layout.total_groups:
        raise ShapeError(f"flags must be (batch, {layout.total_groups})")
    counts = flags.sum(axis=1)
    if counts.size and not np.all(counts == counts[0]):
        raise ShapeError("every sample in a batch must flag the same number of groups")
    k = int(counts[0]) if counts.size else 0
    index_map, inverse_counts = compile_index_map(flags, layout)
    batch = flags.shape[0]
    merged_length = inverse_counts.shape[1]
    changed = np.ones((batch, layout.total_tokens), dtype=bool)
    changed[:, 1:] = np.diff(index_map, axis=1) != 0
    slot_starts = np.nonzero(changed)[1].reshape(batch, merged_length)
    return MergeMask(
        layout=layout,
        flags=flags,
        merged_count=k,
        index_map=index_map,
        inverse_counts=inverse_counts,
        slot_starts=slot_starts,
    )


def compile_index_map(
    flags: np.ndarray, layout: LayoutDescriptor
) -> tuple[np.ndarray, np.ndarray]:
    """Exclusive scan of a per-token "starts a new output slot" indicator.

    Specials and unmerged image tokens each open one slot; a flagged group
    opens a single slot at its first member.  Returns the per-token slot map
    and the per-slot multiplicities (1, or group_size for merged slots).
    """
    flags = np.asarray(flags, dtype=bool)
    batch = flags.shape[0]
    total = layout.total_tokens
    group_of = layout.token_group_ids()
    grouped = group_of >= 0

    token_flagged = np.zeros((batch, total), dtype=bool)
    if layout.total_groups:
        token_flagged[:, grouped] = flags[:, group_of[grouped]]

    is_head = np.zeros(total, dtype=bool)
    if layout.total_groups:
        is_head[layout.group_members()[:, 0]] = True

    starts_slot = ~token_flagged | is_head[None, :]
    # exclusive scan: slot of token t = number of slot-openers strictly before
    # it, which equals inclusive cumsum - 1 because every mapped token lies at
    # or after its own slot opener.
    index_map = np.cumsum(starts_slot, axis=1, dtype=np.int64) - 1
    merged_lengths = index_map[:, -1] + 1 if total else np.zeros(batch, dtype=np.int64)
    if total and not np.all(merged_lengths == merged_lengths[0]):
        raise ShapeError("inconsistent merged lengths across batch")
    merged_length = int(merged_lengths[0]) if total else 0

    inverse_counts = np.zeros((batch, merged_length), dtype=np.int64)
    rows = np.repeat(np.arange(batch), total)
    np.add.at(inverse_counts, (rows, index_map.reshape(-1)), 1)
    return index_map.astype(np.int64), inverse_counts


def similarity_mask(seq: TokenSequence, p: float) -> MergeMask:
    """Flag the most self-similar groups.

    A group's score is the mean pairwise cosine similarity among its members
    (1.0 for single-member groups); the k = floor(p*G) highest-scoring groups
    are flagged (those above the (1-p) percentile), ties broken toward lower
    group index.  Zero-norm vectors are treated as similarity 0 to everything.
    """
    layout = seq.layout
    if seq.channels < 1:
        raise ShapeError("similarity_mask requires at least one channel")
    if layout.total_groups < 1:
        raise DomainError("layout has no groups to select from")
    k = merged_count_for(p, layout.total_groups)
    members = layout.group_members()
    n = layout.group_size
    grouped = seq.tokens[:, members].astype(np.float64)  # (B, G, n, C)
    norms = np.linalg.norm(grouped, axis=3, keepdims=True)
    unit = np.divide(grouped, norms, out=np.zeros_like(grouped), where=norms > 0)
    if n == 1:
        scores = (norms[..., 0, 0] > 0).astype(np.float64)
    else:
        gram = np.einsum("bgnc,bgmc->bgnm", unit, unit)
        diag = np.einsum("bgnn->bgn", gram).sum(axis=2)
        scores = (gram.sum(axis=(2, 3)) - diag) / (n * (n - 1))
    # Highest similarity first; stable sort keeps lower indices first on ties.
    flags = flags_for_lowest(-scores, k)
    return compile_mask(flags, layout)


def mask_iou(a: MergeMask, b: MergeMask) -> float:
    """Intersection-over-union of two masks' flags; 1.0 when both are empty."""
    if a.flags.shape != b.flags.shape:
        raise ShapeError(
            f"group flag shapes differ: {a.flags.shape} vs {b.flags.shape}"
        )
    union = np.logical_or(a.flags, b.flags).sum()
    if union == 0:
        return 1.0
    inter = np.logical_and(a.flags, b.flags).sum()
    return float(inter / union)
