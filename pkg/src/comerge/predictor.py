"""Distilled confidence predictor.

A small projection -> single-head attention -> 3x3 conv head maps encoder
features to one confidence score per image patch.  It is trained against a
synthetic teacher with a pairwise logistic ranking loss: only the relative
ordering of patch confidences matters for mask generation, so supervision is
relaxed to ordered pairs.  Gradients are hand-derived and checked against
central finite differences in the test suite.

All predictor math runs in float64 so analytic gradients stay tight against
finite differences; parameters serialize to the float32 tensor-dump pack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ParameterError, ShapeError, TrainingDivergedError
from .layout import LayoutDescriptor, TokenSequence
from .maskgen import ConfidenceMap, SOURCE_PREDICTOR, build_mask, group_confidence, mask_iou
from .tensors import make_rng
from . import fileio

_PARAM_FIELDS = ("proj_w", "proj_b", "wq", "wk", "wv", "conv_w", "conv_b")


@dataclass
class PredictorParams:
    proj_w: np.ndarray  # (channels, latent)
    proj_b: np.ndarray  # (latent,)
    wq: np.ndarray      # (latent, latent)
    wk: np.ndarray
    wv: np.ndarray
    conv_w: np.ndarray  # (3, 3, latent)
    conv_b: np.ndarray  # scalar array

    def __post_init__(self):
        for name in _PARAM_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        latent = self.proj_w.shape[1]
        if latent < 1:
            raise ParameterError("latent dimension must be >= 1")
        if self.proj_b.shape != (latent,):
            raise ShapeError("proj_b must be (latent,)")
        for name in ("wq", "wk", "wv"):
            if getattr(self, name).shape != (latent, latent):
                raise ShapeError(f"{name} must be (latent, latent)")
        if self.conv_w.shape != (3, 3, latent):
            raise ShapeError("conv_w must be (3, 3, latent)")
        self.conv_b = self.conv_b.reshape(())
        for name in _PARAM_FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise DomainError(f"{name} contains non-finite values")

    @property
    def channels(self) -> int:
        return self.proj_w.shape[0]

    @property
    def latent(self) -> int:
        return self.proj_w.shape[1]

    @classmethod
    def random(
        cls, channels: int, latent: int = 32,
        rng: np.random.Generator | None = None, scale: float = 1.0,
    ) -> "PredictorParams":
        if rng is None:
            raise ParameterError("PredictorParams.random requires an rng")
        sp = scale / math.sqrt(channels)
        sl = scale / math.sqrt(latent)
        return cls(
            proj_w=rng.normal(0.0, sp, (channels, latent)),
            proj_b=np.zeros(latent),
            wq=rng.normal(0.0, sl, (latent, latent)),
            wk=rng.normal(0.0, sl, (latent, latent)),
            wv=rng.normal(0.0, sl, (latent, latent)),
            conv_w=rng.normal(0.0, scale / 3.0, (3, 3, latent)),
            conv_b=np.zeros(()),
        )

    def save(self, path) -> None:
        fileio.write_tensor_pack(path, {name: getattr(self, name) for name in _PARAM_FIELDS})

    @classmethod
    def load(cls, path) -> "PredictorParams":
        pack = fileio.read_tensor_pack(path)
        return cls(**{name: pack[name] for name in _PARAM_FIELDS})


@dataclass
class PredictorGrads:
    proj_w: np.ndarray
    proj_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    conv_w: np.ndarray
    conv_b: np.ndarray


def _check_grid(layout: LayoutDescriptor, grid: tuple[int, int]) -> tuple[int, int]:
    h, w = grid
    if h * w != layout.patches_per_frame:
        raise ShapeError(
            f"grid {h}x{w} does not tile patches_per_frame={layout.patches_per_frame}"
        )
    return h, w


def _conv3x3(z: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 valid conv over (B, F, H, W, L) -> (B, F, H, W)."""
    b, f, h, w, latent = z.shape
    padded = np.zeros((b, f, h + 2, w + 2, latent))
    padded[:, :, 1:-1, 1:-1] = z
    out = np.zeros((b, f, h, w))
    for i in range(3):
        for j in range(3):
            out += np.einsum("bfhwl,l->bfhw", padded[:, :, i:i + h, j:j + w], kernel[i, j])
    return out


def _forward_cache(features: TokenSequence, params: PredictorParams,
                   grid: tuple[int, int]) -> dict:
    layout = features.layout
    h, w = _check_grid(layout, grid)
    if features.channels != params.channels:
        raise ShapeError(
            f"feature channels {features.channels} do not match params {params.channels}"
        )
    x = features.tokens[:, layout.image_token_ids()].astype(np.float64)
    z0 = x @ params.proj_w + params.proj_b
    scale = 1.0 / math.sqrt(params.latent)
    q = z0 @ params.wq
    k = z0 @ params.wk
    v = z0 @ params.wv
    s = np.einsum("bpl,bql->bpq", q, k) * scale
    s = s - s.max(axis=2, keepdims=True)
    e = np.exp(s)
    attn = e / e.sum(axis=2, keepdims=True)
    u = attn @ v
    z1 = z0 + u
    zgrid = z1.reshape(x.shape[0], layout.frames, h, w, params.latent)
    conf = _conv3x3(zgrid, params.conv_w) + params.conv_b
    return {
        "x": x, "z0": z0, "q": q, "k": k, "v": v, "attn": attn, "z1": z1,
        "zgrid": zgrid, "conf": conf, "grid": (h, w), "scale": scale,
    }


def predictor_forward(features: TokenSequence, params: PredictorParams,
                      grid: tuple[int, int]) -> ConfidenceMap:
    """One confidence score per image patch; specials get the +inf sentinel."""
    cache = _forward_cache(features, params, grid)
    batch = features.tokens.shape[0]
    patch = cache["conf"].reshape(batch, -1)
    return ConfidenceMap.from_patch_values(features.layout, patch, source=SOURCE_PREDICTOR)


def backprop(features: TokenSequence, params: PredictorParams,
             grid: tuple[int, int], upstream: np.ndarray,
             cache: dict | None = None) -> PredictorGrads:
    """Parameter gradients given d(loss)/d(patch confidence).

    upstream has shape (batch, frames*patches) or (batch, frames, H, W).
    """
    if cache is None:
        cache = _forward_cache(features, params, grid)
    h, w = cache["grid"]
    layout = features.layout
    batch = cache["x"].shape[0]
    dconf = np.asarray(upstream, dtype=np.float64).reshape(batch, layout.frames, h, w)

    # conv head
    dconv_b = dconf.sum()
    b, f = batch, layout.frames
    padded = np.zeros((b, f, h + 2, w + 2, params.latent))
    padded[:, :, 1:-1, 1:-1] = cache["zgrid"]
    dconv_w = np.zeros_like(params.conv_w)
    dpadded = np.zeros_like(padded)
    for i in range(3):
        for j in range(3):
            window = padded[:, :, i:i + h, j:j + w]
            dconv_w[i, j] = np.einsum("bfhw,bfhwl->l", dconf, window)
            dpadded[:, :, i:i + h, j:j + w] += dconf[..., None] * params.conv_w[i, j]
    dz1 = dpadded[:, :, 1:-1, 1:-1].reshape(batch, -1, params.latent)

    # attention with residual: z1 = z0 + softmax(q k^T s) v
    attn, v, q, k, z0 = cache["attn"], cache["v"], cache["q"], cache["k"], cache["z0"]
    scale = cache["scale"]
    du = dz1
    dz0 = dz1.copy()
    dv = np.einsum("bpq,bpl->bql", attn, du)
    dattn = np.einsum("bpl,bql->bpq", du, v)
    ds = attn * (dattn - (dattn * attn).sum(axis=2, keepdims=True))
    dq = np.einsum("bpq,bql->bpl", ds, k) * scale
    dk = np.einsum("bpq,bpl->bql", ds, q) * scale
    dwq = np.einsum("bpl,bpm->lm", z0, dq)
    dwk = np.einsum("bpl,bpm->lm", z0, dk)
    dwv = np.einsum("bpl,bpm->lm", z0, dv)
    dz0 += dq @ params.wq.T + dk @ params.wk.T + dv @ params.wv.T

    # projection
    x = cache["x"]
    dproj_w = np.einsum("bpc,bpl->cl", x, dz0)
    dproj_b = dz0.sum(axis=(0, 1))
    return PredictorGrads(
        proj_w=dproj_w, proj_b=dproj_b, wq=dwq, wk=dwk, wv=dwv,
        conv_w=dconv_w, conv_b=np.asarray(dconv_b),
    )


@dataclass
class RankingPairSet:
    """Ordered patch pairs (i, j) where the teacher ranks i above j."""

    pairs: np.ndarray  # (m, 2) int

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if np.any(self.pairs[:, 0] == self.pairs[:, 1]):
            raise DomainError("ranking pairs must have i != j")
        if len(np.unique(self.pairs, axis=0)) != len(self.pairs):
            raise DomainError("duplicate ordered pairs are not allowed")

    def __len__(self) -> int:
        return len(self.pairs)


def make_pairs(teacher_conf: np.ndarray, budget: int,
               rng: np.random.Generator) -> RankingPairSet:
    """Sample up to `budget` ordered pairs from one sample's patch scores."""
    teacher_conf = np.asarray(teacher_conf, dtype=np.float64).reshape(-1)
    n = teacher_conf.size
    if n < 2:
        raise DomainError("need at least two patches to form ranking pairs")
    a = rng.integers(0, n, size=budget)
    b = rng.integers(0, n, size=budget)
    keep = teacher_conf[a] != teacher_conf[b]
    a, b = a[keep], b[keep]
    swap = teacher_conf[a] < teacher_conf[b]
    hi = np.where(swap, b, a)
    lo = np.where(swap, a, b)
    pairs = np.unique(np.stack([hi, lo], axis=1), axis=0)
    if pairs.size == 0:
        raise DomainError("teacher confidences produced no ordered pairs")
    return RankingPairSet(pairs=pairs)


def ranking_loss(pred: np.ndarray, pairs: RankingPairSet) -> float:
    """(1/|P|) sum log(1 + exp(c_j - c_i)); log1p/exp-stable at any margin."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    if len(pairs) == 0:
        raise DomainError("ranking loss needs a non-empty pair set")
    margins = pred[pairs.pairs[:, 1]] - pred[pairs.pairs[:, 0]]
    return float(np.mean(np.logaddexp(0.0, margins)))


def ranking_loss_grad(pred: np.ndarray, pairs: RankingPairSet) -> np.ndarray:
    """d(loss)/d(pred): sigma(c_j - c_i)/|P| pushed onto each pair endpoint."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    if len(pairs) == 0:
        raise DomainError("ranking loss needs a non-empty pair set")
    i = pairs.pairs[:, 0]
    j = pairs.pairs[:, 1]
    margins = pred[j] - pred[i]
    # overflow-free logistic: exp only ever sees non-positive arguments
    pos = margins >= 0
    e = np.exp(-np.abs(margins))
    sig = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))
    grad = np.zeros_like(pred)
    np.add.at(grad, j, sig)
    np.add.at(grad, i, -sig)
    return grad / len(pairs)


def mse_loss(pred: np.ndarray, teacher: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over patches and its gradient 2(pred-teacher)/N."""
    pred = np.asarray(pred, dtype=np.float64)
    teacher = np.asarray(teacher, dtype=np.float64)
    if pred.shape != teacher.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {teacher.shape}")
    diff = pred - teacher
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-2
    seed: int = 0
    latent: int = 32
    pair_budget: int = 4096
    dataset_samples: int = 4
    loss_kind: str = "ranking"  # or "mse"
    eval_every: int = 200
    holdout_ratio: float = 0.5
    holdout_samples: int = 4
    init_scale: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")
        if self.lr < 0:
            raise ParameterError("lr must be >= 0")
        if self.dataset_samples < 1:
            raise ParameterError("dataset_samples must be >= 1")
        if self.loss_kind not in ("ranking", "mse"):
            raise ParameterError(f"unknown loss kind {self.loss_kind!r}")


@dataclass
class TrainResult:
    params: PredictorParams
    losses: np.ndarray
    holdout_steps: list[int] = field(default_factory=list)
    holdout_ious: list[float] = field(default_factory=list)

    @property
    def final_holdout_iou(self) -> float:
        return self.holdout_ious[-1] if self.holdout_ious else float("nan")

    def trace_csv(self) -> str:
        """CSV trace: step, loss, holdout_iou (blank between evaluations)."""
        eval_at = dict(zip(self.holdout_steps, self.holdout_ious))
        lines = ["step,loss,holdout_iou"]
        for step, loss in enumerate(self.losses):
            iou = eval_at.get(step)
            lines.append(f"{step},{loss:.10g},{'' if iou is None else f'{iou:.6f}'}")
        return "\n".join(lines) + "\n"


def holdout_iou(teacher, params: PredictorParams, grid: tuple[int, int],
                ratio: float, rng: np.random.Generator, samples: int = 8) -> float:
    """Mean IoU between predictor and teacher top-`ratio` masks on held-out
    samples drawn from `rng`."""
    scores = []
    for _ in range(samples):
        seq, teacher_conf = teacher.sample(rng)
        layout = seq.layout
        pred = predictor_forward(seq, params, grid)
        teacher_map = ConfidenceMap.from_patch_values(layout, teacher_conf)
        mask_t = build_mask(group_confidence(teacher_map, layout), ratio, layout)
        mask_p = build_mask(group_confidence(pred, layout), ratio, layout)
        scores.append(mask_iou(mask_t, mask_p))
    return float(np.mean(scores))


def train(teacher, config: TrainConfig) -> TrainResult:
    """Full-batch gradient descent on a fixed synthetic dataset.

    `teacher` provides .layout, .channels, .grid and .sample(rng) ->
    (TokenSequence, per-patch teacher confidences).  The dataset, the
    ranking pairs, and the parameter init are all drawn once from
    config.seed, so the loss trace is bitwise reproducible and lr=0 leaves
    it constant.  Held-out IoU is measured on fresh samples from a separate
    stream every eval_every steps.
    """
    rng = make_rng(config.seed)
    holdout_rng = make_rng(config.seed + 0x9E3779B9)
    grid = teacher.grid
    params = PredictorParams.random(
        teacher.channels, config.latent, rng=rng, scale=config.init_scale
    )

    dataset = []
    for _ in range(config.dataset_samples):
        seq, teacher_conf = teacher.sample(rng)
        pair_sets = None
        if config.loss_kind == "ranking":
            pair_sets = [
                make_pairs(teacher_conf[b], config.pair_budget, rng)
                for b in range(teacher_conf.shape[0])
            ]
        dataset.append((seq, teacher_conf, pair_sets))

    losses = np.zeros(config.steps)
    holdout_steps: list[int] = []
    holdout_ious: list[float] = []

    for step in range(config.steps):
        loss = 0.0
        rows = 0
        grads_total = None
        for seq, teacher_conf, pair_sets in dataset:
            cache = _forward_cache(seq, params, grid)
            batch = cache["conf"].shape[0]
            pred = cache["conf"].reshape(batch, -1)
            upstream = np.zeros_like(pred)
            for b in range(batch):
                if config.loss_kind == "ranking":
                    loss += ranking_loss(pred[b], pair_sets[b])
                    upstream[b] = ranking_loss_grad(pred[b], pair_sets[b])
                else:
                    l, g = mse_loss(pred[b], teacher_conf[b])
                    loss += l
                    upstream[b] = g
            rows += batch
            grads = backprop(seq, params, grid, upstream, cache=cache)
            if grads_total is None:
                grads_total = grads
            else:
                for name in _PARAM_FIELDS:
                    getattr(grads_total, name)[...] += getattr(grads, name)
        loss /= rows
        if not math.isfinite(loss):
            raise TrainingDivergedError(step)
        losses[step] = loss

        for name in _PARAM_FIELDS:
            getattr(params, name)[...] -= (config.lr / rows) * getattr(grads_total, name)

        if config.eval_every and (step + 1) % config.eval_every == 0:
            holdout_steps.append(step)
            holdout_ious.append(
                holdout_iou(teacher, params, grid, config.holdout_ratio,
                            holdout_rng, samples=config.holdout_samples)
            )

    return TrainResult(
        params=params, losses=losses,
        holdout_steps=holdout_steps, holdout_ious=holdout_ious,
    )
