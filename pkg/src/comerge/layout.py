"""Batched token sequence layout.

Each frame stores its special tokens first, followed by its image tokens in
spatial raster order.  Image tokens are partitioned into fixed-size groups of
consecutive tokens; groups never span frame boundaries, so a trailing partial
group is rejected at construction instead of padded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .tensors import DTYPE


@dataclass(frozen=True)
class LayoutDescriptor:
    frames: int
    special_per_frame: int
    patches_per_frame: int
    group_size: int

    def __post_init__(self):
        if self.frames < 1:
            raise ParameterError("frames must be >= 1")
        if self.special_per_frame < 0:
            raise ParameterError("special_per_frame must be >= 0")
        if self.patches_per_frame < 0:
            raise ParameterError("patches_per_frame must be >= 0")
        if self.group_size < 1:
            raise ParameterError("group_size must be >= 1")
        if self.patches_per_frame % self.group_size != 0:
            raise ParameterError(
                f"patches_per_frame={self.patches_per_frame} is not divisible "
                f"by group_size={self.group_size}"
            )

    @property
    def tokens_per_frame(self) -> int:
        return self.special_per_frame + self.patches_per_frame

    @property
    def total_tokens(self) -> int:
        return self.frames * self.tokens_per_frame

    @property
    def groups_per_frame(self) -> int:
        return self.patches_per_frame // self.group_size

    @property
    def total_groups(self) -> int:
        return self.frames * self.groups_per_frame

    def group_index(self, group_id: int) -> range:
        """Contiguous token range of one group; ranges are disjoint and cover
        all image tokens in order."""
        if not 0 <= group_id < self.total_groups:
            raise ParameterError(
                f"group_id {group_id} out of range [0, {self.total_groups})"
            )
        frame, slot = divmod(group_id, self.groups_per_frame)
        start = (
            frame * self.tokens_per_frame
            + self.special_per_frame
            + slot * self.group_size
        )
        return range(start, start + self.group_size)

    def is_special(self, token_id: int) -> bool:
        if not 0 <= token_id < self.total_tokens:
            raise ParameterError(
                f"token_id {token_id} out of range [0, {self.total_tokens})"
            )
        return token_id % self.tokens_per_frame < self.special_per_frame

    def special_token_ids(self) -> np.ndarray:
        base = np.arange(self.frames) * self.tokens_per_frame
        offs = np.arange(self.special_per_frame)
        return (base[:, None] + offs[None, :]).reshape(-1)

    def image_token_ids(self) -> np.ndarray:
        base = np.arange(self.frames) * self.tokens_per_frame
        offs = self.special_per_frame + np.arange(self.patches_per_frame)
        return (base[:, None] + offs[None, :]).reshape(-1)

    def group_members(self) -> np.ndarray:
        """(total_groups, group_size) token ids of every group."""
        return self.image_token_ids().reshape(self.total_groups, self.group_size)

    def token_group_ids(self) -> np.ndarray:
        """(total_tokens,) group id per token, -1 for special tokens."""
        out = np.full(self.total_tokens, -1, dtype=np.int64)
        members = self.group_members()
        out[members.reshape(-1)] = np.repeat(
            np.arange(self.total_groups), self.group_size
        )
        return out


@dataclass
class TokenSequence:
    """Batched token tensor of shape (batch, total_tokens, channels)."""

    layout: LayoutDescriptor
    tokens: np.ndarray

    def __post_init__(self):
        self.tokens = np.ascontiguousarray(self.tokens, dtype=DTYPE)
        if self.tokens.ndim != 3:
            raise ShapeError(
                f"token tensor must be (batch, tokens, channels), got {self.tokens.shape}"
            )
        if self.tokens.shape[1] != self.layout.total_tokens:
            raise ShapeError(
                f"token axis {self.tokens.shape[1]} does not match layout "
                f"total_tokens {self.layout.total_tokens}"
            )

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def channels(self) -> int:
        return self.tokens.shape[2]
