"""Confidence-guided token merging engine.

Core pieces: token layout and merge masks (maskgen), merge/split operators
(mergesplit), the bias-corrected transformer block and its exact oracle
(block), a distilled confidence predictor (predictor), 3D evaluation metrics
(metrics), and a benchmark harness (bench) exposed through a FastAPI service
(service) with a thin `bench` CLI client.
"""

__version__ = "0.1.0"

from .layout import LayoutDescriptor, TokenSequence
from .maskgen import ConfidenceMap, MergeMask, build_mask, group_confidence, mask_iou, similarity_mask
from .mergesplit import MergedSequence, merge, split
from .block import BlockParams, FlopCount, flop_count, merged_block, oracle_block
from .predictor import PredictorParams, RankingPairSet, TrainConfig, predictor_forward, ranking_loss, train
from .metrics import DepthMap, PointCloud, PoseSet, auc_at_30, chamfer, depth_metrics, umeyama_sim3
from .bench import BenchRecord, BreakdownConfig, SweepConfig, run_sweep, runtime_breakdown, tradeoff_table

__all__ = [
    "LayoutDescriptor", "TokenSequence",
    "ConfidenceMap", "MergeMask", "build_mask", "group_confidence",
    "mask_iou", "similarity_mask",
    "MergedSequence", "merge", "split",
    "BlockParams", "FlopCount", "flop_count", "merged_block", "oracle_block",
    "PredictorParams", "RankingPairSet", "TrainConfig", "predictor_forward",
    "ranking_loss", "train",
    "DepthMap", "PointCloud", "PoseSet", "auc_at_30", "chamfer",
    "depth_metrics", "umeyama_sim3",
    "BenchRecord", "BreakdownConfig", "SweepConfig", "run_sweep",
    "runtime_breakdown", "tradeoff_table",
]
