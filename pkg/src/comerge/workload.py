"""Synthetic workloads.

The "smooth" workload builds spatially smooth per-frame feature fields with
three kinds of regions:

* background: a low-norm base vector plus tiny jitter, the featureless-sky
  analog.  Genuinely redundant -- merging it is nearly free -- but its
  pairwise cosine is unremarkable, so similarity-guided selection
  undervalues it.
* ramp: a fixed direction scaled by a smoothly oscillating magnitude.
  Members of a group are exactly colinear (cosine similarity 1) yet far
  apart, so similarity-guided selection is drawn to them while
  mean-replacement is costly there.
* detail: low-frequency mixtures with spatially varying direction.

The redundancy confidence scores each patch by how much its features deviate
from the local 3x3 neighborhood mean, so low confidence marks exactly the
regions whose tokens are interchangeable.

The "highfreq" workload flips feature direction patch to patch (thin
high-frequency structure), the known failure mode for merging.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .layout import LayoutDescriptor, TokenSequence
from .maskgen import ConfidenceMap, SOURCE_TEACHER
from .tensors import DTYPE, make_rng

WORKLOAD_SMOOTH = "smooth"
WORKLOAD_HIGHFREQ = "highfreq"
WORKLOADS = (WORKLOAD_SMOOTH, WORKLOAD_HIGHFREQ)


def default_grid(patches_per_frame: int) -> tuple[int, int]:
    """Most-square (h, w) factorization of the patch count."""
    h = int(np.sqrt(patches_per_frame))
    while h > 1 and patches_per_frame % h != 0:
        h -= 1
    return h, patches_per_frame // h


def _unit(rng: np.random.Generator, channels: int) -> np.ndarray:
    v = rng.normal(size=channels)
    return v / np.linalg.norm(v)


def _smooth_field(rng: np.random.Generator, h: int, w: int,
                  components: int = 3) -> np.ndarray:
    """Low-frequency scalar field on an (h, w) grid, roughly in [-1, 1]."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.zeros((h, w))
    for _ in range(components):
        fy = rng.uniform(0.2, 1.5) / max(h, 1)
        fx = rng.uniform(0.2, 1.5) / max(w, 1)
        phase = rng.uniform(0, 2 * np.pi)
        out += rng.uniform(0.3, 1.0) * np.cos(2 * np.pi * (fy * ys + fx * xs) + phase)
    return out / components


def smooth_tokens(layout: LayoutDescriptor, channels: int,
                  rng: np.random.Generator, grid: tuple[int, int] | None = None,
                  batch: int = 1, jitter: float = 0.03,
                  background_scale: float = 0.1,
                  ramp_cycles: float = 3.0) -> TokenSequence:
    """Smooth feature field with background / ramp / detail regions.

    Background tokens are low-norm (background_scale) with jitter-sized
    noise: nearly interchangeable, yet their pairwise cosine is mediocre, so
    similarity-guided selection undervalues them.  Ramp tokens are exactly
    colinear with a smoothly oscillating magnitude (ramp_cycles per frame
    width): cosine similarity 1.0 but large within-group spread.
    """
    if grid is None:
        grid = default_grid(layout.patches_per_frame)
    h, w = grid
    if h * w != layout.patches_per_frame:
        raise ShapeError("grid does not tile patches_per_frame")
    tokens = np.zeros((batch, layout.total_tokens, channels), dtype=DTYPE)
    img_ids = layout.image_token_ids().reshape(layout.frames, layout.patches_per_frame)
    for b in range(batch):
        for f in range(layout.frames):
            base = _unit(rng, channels)
            ramp_dir = _unit(rng, channels)
            detail_a = _unit(rng, channels)
            detail_b = _unit(rng, channels)

            region = _smooth_field(rng, h, w)
            lo, hi = np.quantile(region, [0.55, 0.8])
            is_ramp = (region >= lo) & (region < hi)
            is_detail = region >= hi

            ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
            phase = rng.uniform(0, 2 * np.pi)
            magnitude = 1.0 + 0.9 * np.cos(2 * np.pi * ramp_cycles * xs / max(w, 1) + phase)
            mix = _smooth_field(rng, h, w)

            patches = np.empty((h, w, channels))
            patches[:] = background_scale * base
            patches += jitter * rng.normal(size=(h, w, channels))
            ramp = magnitude[..., None] * ramp_dir
            patches[is_ramp] = ramp[is_ramp]
            detail = (
                (1.2 + mix)[..., None] * detail_a
                + (1.2 - mix)[..., None] * detail_b
            )
            patches[is_detail] = detail[is_detail]

            tokens[b, img_ids[f]] = patches.reshape(-1, channels).astype(DTYPE)
        specials = layout.special_token_ids()
        if specials.size:
            tokens[b, specials] = rng.normal(0.0, 0.1, (specials.size, channels)).astype(DTYPE)
    return TokenSequence(layout=layout, tokens=tokens)


def highfreq_tokens(layout: LayoutDescriptor, channels: int,
                    rng: np.random.Generator, grid: tuple[int, int] | None = None,
                    batch: int = 1) -> TokenSequence:
    """Thin high-frequency structure: direction alternates patch to patch."""
    if grid is None:
        grid = default_grid(layout.patches_per_frame)
    h, w = grid
    if h * w != layout.patches_per_frame:
        raise ShapeError("grid does not tile patches_per_frame")
    tokens = np.zeros((batch, layout.total_tokens, channels), dtype=DTYPE)
    img_ids = layout.image_token_ids().reshape(layout.frames, layout.patches_per_frame)
    for b in range(batch):
        for f in range(layout.frames):
            d1 = _unit(rng, channels)
            d2 = _unit(rng, channels)
            ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
            stripe = ((xs + ys) % 2).astype(np.float64)[..., None]
            patches = stripe * d1 + (1.0 - stripe) * d2
            patches += 0.05 * rng.normal(size=(h, w, channels))
            tokens[b, img_ids[f]] = patches.reshape(-1, channels).astype(DTYPE)
        specials = layout.special_token_ids()
        if specials.size:
            tokens[b, specials] = rng.normal(0.0, 0.1, (specials.size, channels)).astype(DTYPE)
    return TokenSequence(layout=layout, tokens=tokens)


def make_tokens(kind: str, layout: LayoutDescriptor, channels: int,
                rng: np.random.Generator, grid: tuple[int, int] | None = None,
                batch: int = 1) -> TokenSequence:
    if kind == WORKLOAD_SMOOTH:
        return smooth_tokens(layout, channels, rng, grid=grid, batch=batch)
    if kind == WORKLOAD_HIGHFREQ:
        return highfreq_tokens(layout, channels, rng, grid=grid, batch=batch)
    raise ParameterError(f"unknown workload {kind!r}")


def redundancy_confidence(seq: TokenSequence,
                          grid: tuple[int, int] | None = None) -> ConfidenceMap:
    """Teacher-style confidence: deviation from the local neighborhood mean.

    Patches whose features match their 3x3 surroundings score low (redundant);
    boundaries and varied regions score high.
    """
    layout = seq.layout
    if grid is None:
        grid = default_grid(layout.patches_per_frame)
    h, w = grid
    if h * w != layout.patches_per_frame:
        raise ShapeError("grid does not tile patches_per_frame")
    batch = seq.batch
    img = seq.tokens[:, layout.image_token_ids()].astype(np.float64)
    fields = img.reshape(batch, layout.frames, h, w, seq.channels)

    padded = np.zeros((batch, layout.frames, h + 2, w + 2, seq.channels))
    padded[:, :, 1:-1, 1:-1] = fields
    counts = np.zeros((h + 2, w + 2))
    counts[1:-1, 1:-1] = 1.0
    total = np.zeros_like(fields)
    weight = np.zeros((h, w))
    for i in range(3):
        for j in range(3):
            total += padded[:, :, i:i + h, j:j + w]
            weight += counts[i:i + h, j:j + w]
    local_mean = total / weight[None, None, :, :, None]
    deviation = np.linalg.norm(fields - local_mean, axis=4)
    patch_conf = deviation.reshape(batch, -1)
    return ConfidenceMap.from_patch_values(layout, patch_conf, source=SOURCE_TEACHER)


@dataclass
class SyntheticTeacher:
    """Streaming (features, per-patch confidence) sampler for distillation.

    The confidence is a fixed seeded linear functional of the patch features
    plus a small amount of per-sample noise, so the ranking is learnable but
    not exactly recoverable.
    """

    layout: LayoutDescriptor
    channels: int
    batch: int = 1
    noise: float = 0.01
    jitter: float = 0.05
    seed: int = 0
    grid: tuple[int, int] | None = None  # defaults to the squarest factorization
    _direction: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.grid is None:
            self.grid = default_grid(self.layout.patches_per_frame)
        h, w = self.grid
        if h * w != self.layout.patches_per_frame:
            raise ShapeError("grid does not tile patches_per_frame")
        self._direction = _unit(make_rng(self.seed), self.channels)

    def sample(self, rng: np.random.Generator) -> tuple[TokenSequence, np.ndarray]:
        seq = smooth_tokens(self.layout, self.channels, rng,
                            grid=self.grid, batch=self.batch, jitter=self.jitter)
        img = seq.tokens[:, self.layout.image_token_ids()].astype(np.float64)
        conf = img @ self._direction
        if self.noise:
            conf = conf + self.noise * rng.normal(size=conf.shape)
        return seq, conf
