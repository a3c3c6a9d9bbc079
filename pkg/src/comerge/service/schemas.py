"""Request/response models for the service endpoints."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class LayoutModel(BaseModel):
    frames: int = 1
    special_per_frame: int = 0
    patches_per_frame: int = 256
    group_size: int = 4


class SweepRequest(BaseModel):
    ratios: list[float] = Field(default_factory=lambda: [0.0, 0.5])
    group_sizes: list[int] = Field(default_factory=lambda: [4])
    frames: list[int] = Field(default_factory=lambda: [1])
    patches_per_frame: int = 256
    special_per_frame: int = 2
    channels: int = 32
    d_ff: int | None = None
    layers: int = 2
    seed: int = 0
    strategy: str = "confidence"
    bias: bool = True
    repetitions: int = 5
    batch: int = 1
    workload: str = "smooth"


class BenchRecordModel(BaseModel):
    ratio: float
    group_size: int
    frames: int
    total_tokens: int
    merged_tokens: int
    strategy: str
    bias: bool
    flops_oracle: int
    flops_merged: int
    flop_ratio: float
    oracle_seconds: float
    oracle_iqr: float
    merged_seconds: float
    merged_iqr: float
    speedup: float
    retained_l1: float
    status: str
    error: str


class SweepResponse(BaseModel):
    records: list[BenchRecordModel]


class TradeoffRequest(SweepRequest):
    strategies: list[str] = Field(
        default_factory=lambda: ["confidence", "similarity", "pick-one", "drop-all"]
    )
    match_speedup: bool = True


class TradeoffRowModel(BaseModel):
    strategy: str
    ratio: float
    merged_tokens: int
    flop_ratio: float
    speedup: float
    retained_l1: float


class TradeoffResponse(BaseModel):
    rows: list[TradeoffRowModel]


class BreakdownRequest(BaseModel):
    frames: int = 1
    patches_per_frame: int = 256
    special_per_frame: int = 0
    ratio: float = 0.5
    group_size: int = 4
    channels: int = 16
    d_ff: int | None = None
    layers: int = 1
    seed: int = 0
    bias: bool = True
    batch: int = 1
    repetitions: int = 3
    workload: str = "smooth"
    dump_activations: str | None = None


class BreakdownResponse(BaseModel):
    seconds: dict[str, float]
    shares: dict[str, float]
    total_seconds: float
    overhead_share: float


class MaskRequest(BaseModel):
    layout: LayoutModel
    patch_confidence: list[list[float]]  # (batch, frames * patches_per_frame)
    ratio: float


class MaskResponse(BaseModel):
    flags: list[list[bool]]
    merged_count: int
    merged_length: int
    index_map: list[list[int]]
    inverse_counts: list[list[int]]


class DepthMetricsRequest(BaseModel):
    pred: list[list[float]]
    gt: list[list[float]]
    pred_validity: list[list[bool]] | None = None
    gt_validity: list[list[bool]] | None = None
    align: bool = True
    exclude: list[list[bool]] | None = None


class DepthMetricsResponse(BaseModel):
    l1: float
    delta_125: float
    scale: float


class PoseModel(BaseModel):
    rotation: list[list[float]]
    translation: list[float]


class PoseAucRequest(BaseModel):
    pred: list[PoseModel]
    gt: list[PoseModel]


class PoseAucResponse(BaseModel):
    auc_r30: float
    auc_t30: float


class ChamferRequest(BaseModel):
    pred_points: list[list[float]]
    gt_points: list[list[float]]
    method: str = "auto"


class ChamferResponse(BaseModel):
    completeness: float
    accuracy: float


class UmeyamaRequest(BaseModel):
    src_points: list[list[float]]
    dst_points: list[list[float]]


class UmeyamaResponse(BaseModel):
    scale: float
    rotation: list[list[float]]
    translation: list[float]


class TrainRequest(BaseModel):
    frames: int = 2
    patches_per_frame: int = 64
    special_per_frame: int = 1
    channels: int = 16
    latent: int = 16
    steps: int = 300
    lr: float = 1e-2
    seed: int = 0
    pair_budget: int = 4096
    loss_kind: str = "ranking"
    eval_every: int = 100
    teacher_noise: float = 0.01
    holdout_ratio: float = 0.5


class TrainResponse(BaseModel):
    initial_loss: float
    final_loss: float
    holdout_iou: float
    losses: list[float]
