"""Benchmark harness: sweeps merged vs oracle pipelines on synthetic
workloads and reports speedup, analytic FLOPs, and retained-region error.

Timing protocol: one warmup run is discarded, then the median (and IQR) of
the remaining repetitions is reported; each point runs single-threaded in
one process (BLAS pools pinned to one thread inside timed sections) so
timings stay comparable.  Masks are generated once per point and reused
across the pipeline's layers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np
from threadpoolctl import threadpool_limits

from .block import BlockParams, flop_count, merged_block, oracle_block
from .errors import ComergeError, ParameterError
from .layout import LayoutDescriptor, TokenSequence
from .maskgen import (
    MergeMask,
    build_mask,
    compile_mask,
    flags_for_lowest,
    group_confidence,
    merged_count_for,
    similarity_mask,
)
from .mergesplit import STRATEGY_AVERAGE, STRATEGY_DROP_ALL, STRATEGY_PICK_ONE
from .tensors import make_rng
from .workload import WORKLOADS, WORKLOAD_SMOOTH, make_tokens, redundancy_confidence
from . import fileio

STRATEGY_CONFIDENCE = "confidence"
STRATEGY_SIMILARITY = "similarity"
SWEEP_STRATEGIES = (
    STRATEGY_CONFIDENCE,
    STRATEGY_SIMILARITY,
    STRATEGY_PICK_ONE,
    STRATEGY_DROP_ALL,
)


@dataclass
class SweepConfig:
    ratios: list[float] = field(default_factory=lambda: [0.0, 0.5])
    group_sizes: list[int] = field(default_factory=lambda: [4])
    frames: list[int] = field(default_factory=lambda: [1])
    patches_per_frame: int = 256
    special_per_frame: int = 2
    channels: int = 32
    d_ff: int | None = None
    layers: int = 2
    seed: int = 0
    strategy: str = STRATEGY_CONFIDENCE
    bias: bool = True
    repetitions: int = 5
    batch: int = 1
    workload: str = WORKLOAD_SMOOTH

    def __post_init__(self):
        if not self.ratios or not self.group_sizes or not self.frames:
            raise ParameterError("ratios, group_sizes and frames must be non-empty")
        for p in self.ratios:
            if not 0.0 <= p < 1.0:
                raise ParameterError(f"merge ratio {p} outside [0, 1)")
        if self.repetitions < 3:
            raise ParameterError("repetitions must be >= 3")
        if self.strategy not in SWEEP_STRATEGIES:
            raise ParameterError(f"unknown strategy {self.strategy!r}")
        if self.workload not in WORKLOADS:
            raise ParameterError(f"unknown workload {self.workload!r}")
        if self.d_ff is None:
            self.d_ff = 4 * self.channels


@dataclass
class BenchRecord:
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
    status: str = "ok"
    error: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _coalescing(strategy: str) -> str:
    if strategy == STRATEGY_PICK_ONE:
        return STRATEGY_PICK_ONE
    if strategy == STRATEGY_DROP_ALL:
        return STRATEGY_DROP_ALL
    return STRATEGY_AVERAGE


def build_strategy_mask(
    seq: TokenSequence,
    strategy: str,
    ratio: float,
    merged_count: int | None = None,
) -> MergeMask:
    """Selection step of a strategy: which groups get coalesced.

    similarity ranks groups by self-similarity; every other strategy uses the
    redundancy confidence.  merged_count, when given, overrides floor(p*G)
    so strategies can be compared at matched merged length.
    """
    layout = seq.layout
    if strategy == STRATEGY_SIMILARITY:
        if merged_count is not None:
            raise ParameterError("matched merged_count only applies to "
                                 "confidence-selected strategies")
        return similarity_mask(seq, ratio)
    scores = group_confidence(redundancy_confidence(seq), layout)
    if merged_count is None:
        return build_mask(scores, ratio, layout)
    flags = flags_for_lowest(scores, merged_count)
    return compile_mask(flags, layout)


def _timed_runs(fn, repetitions: int) -> tuple[float, float]:
    """Median and IQR of `repetitions` timed runs after one discarded warmup."""
    with threadpool_limits(limits=1):
        fn()
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
    q25, q50, q75 = np.percentile(times, [25, 50, 75])
    return float(q50), float(q75 - q25)


def _run_oracle(seq: TokenSequence, params: list[BlockParams]) -> TokenSequence:
    out = seq
    for p in params:
        out = oracle_block(out, p)
    return out


def _run_merged(
    seq: TokenSequence,
    mask: MergeMask,
    params: list[BlockParams],
    bias: bool,
    strategy: str,
    rng: np.random.Generator | None,
    timings: dict | None = None,
) -> TokenSequence:
    # An empty mask makes merged blocks bitwise-identical to the oracle, so
    # skip the merge/split machinery entirely.
    if mask.merged_count == 0:
        return _run_oracle(seq, params)
    out = seq
    coal = _coalescing(strategy)
    for p in params:
        out = merged_block(out, mask, p, bias_correction=bias,
                           strategy=coal, rng=rng, timings=timings)
    return out


def _retained_token_ids(mask: MergeMask, sample: int) -> np.ndarray:
    layout = mask.layout
    group_of = layout.token_group_ids()
    merged = np.zeros(layout.total_tokens, dtype=bool)
    grouped = group_of >= 0
    merged[grouped] = mask.flags[sample, group_of[grouped]]
    return np.flatnonzero(~merged)


def retained_l1(merged_out: TokenSequence, oracle_out: TokenSequence,
                mask: MergeMask) -> float:
    """Mean |merged - oracle| over tokens outside flagged groups."""
    diff = np.abs(merged_out.tokens.astype(np.float64)
                  - oracle_out.tokens.astype(np.float64))
    per_sample = []
    for b in range(diff.shape[0]):
        ids = _retained_token_ids(mask, b)
        per_sample.append(diff[b, ids].mean() if ids.size else 0.0)
    return float(np.mean(per_sample))


def _point_record(config: SweepConfig, ratio: float, group_size: int,
                  frames: int) -> BenchRecord:
    layout = LayoutDescriptor(
        frames=frames,
        special_per_frame=config.special_per_frame,
        patches_per_frame=config.patches_per_frame,
        group_size=group_size,
    )
    rng = make_rng(config.seed)
    seq = make_tokens(config.workload, layout, config.channels, rng, batch=config.batch)
    params = [
        BlockParams.random(config.channels, config.d_ff, rng=rng)
        for _ in range(config.layers)
    ]
    mask = build_strategy_mask(seq, config.strategy, ratio)
    coal = _coalescing(config.strategy)

    oracle_fl = flop_count(layout, None, params[0]).total * config.layers
    merged_fl = flop_count(layout, mask, params[0], strategy=coal).total * config.layers

    oracle_out = _run_oracle(seq, params)
    merged_out = _run_merged(seq, mask, params, config.bias, config.strategy,
                             make_rng(config.seed + 1))
    err = retained_l1(merged_out, oracle_out, mask)

    t_oracle, iqr_oracle = _timed_runs(lambda: _run_oracle(seq, params),
                                       config.repetitions)
    timing_rng = make_rng(config.seed + 1)

    def merged_run():
        if ratio == 0.0:
            _run_oracle(seq, params)
            return
        m = build_strategy_mask(seq, config.strategy, ratio)
        _run_merged(seq, m, params, config.bias, config.strategy, timing_rng)

    t_merged, iqr_merged = _timed_runs(merged_run, config.repetitions)

    merged_tokens = (layout.total_tokens - mask.merged_count * layout.group_size
                     if coal == STRATEGY_DROP_ALL else mask.merged_length)
    return BenchRecord(
        ratio=ratio,
        group_size=group_size,
        frames=frames,
        total_tokens=layout.total_tokens,
        merged_tokens=merged_tokens,
        strategy=config.strategy,
        bias=config.bias,
        flops_oracle=oracle_fl,
        flops_merged=merged_fl,
        flop_ratio=oracle_fl / merged_fl,
        oracle_seconds=t_oracle,
        oracle_iqr=iqr_oracle,
        merged_seconds=t_merged,
        merged_iqr=iqr_merged,
        speedup=t_oracle / t_merged,
        retained_l1=err,
    )


def run_sweep(config: SweepConfig) -> list[BenchRecord]:
    """One BenchRecord per (group_size, frames, ratio) grid point.

    A point that exhausts resources becomes a failure record instead of
    aborting the sweep.
    """
    records = []
    for group_size in config.group_sizes:
        for frames in config.frames:
            for ratio in config.ratios:
                try:
                    records.append(_point_record(config, ratio, group_size, frames))
                except (MemoryError, ComergeError, ValueError) as exc:
                    records.append(BenchRecord(
                        ratio=ratio, group_size=group_size, frames=frames,
                        total_tokens=0, merged_tokens=0,
                        strategy=config.strategy, bias=config.bias,
                        flops_oracle=0, flops_merged=0, flop_ratio=0.0,
                        oracle_seconds=0.0, oracle_iqr=0.0,
                        merged_seconds=0.0, merged_iqr=0.0,
                        speedup=0.0, retained_l1=float("nan"),
                        status="failed", error=f"{type(exc).__name__}: {exc}",
                    ))
    return records


@dataclass
class TradeoffRow:
    strategy: str
    ratio: float
    merged_tokens: int
    flop_ratio: float
    speedup: float
    retained_l1: float


def tradeoff_table(config: SweepConfig, strategies: list[str],
                   match_speedup: bool = True) -> list[TradeoffRow]:
    """Strategy x ratio grid of (speedup, retained-region error).

    With match_speedup, drop-all coalesces fewer groups so its merged length
    equals the averaging strategies' length at the same ratio, keeping the
    comparison at matched compute.
    """
    for s in strategies:
        if s not in SWEEP_STRATEGIES:
            raise ParameterError(f"unknown strategy {s!r}")
    group_size = config.group_sizes[0]
    frames = config.frames[0]
    layout = LayoutDescriptor(
        frames=frames,
        special_per_frame=config.special_per_frame,
        patches_per_frame=config.patches_per_frame,
        group_size=group_size,
    )
    rng = make_rng(config.seed)
    seq = make_tokens(config.workload, layout, config.channels, rng, batch=config.batch)
    params = [
        BlockParams.random(config.channels, config.d_ff, rng=rng)
        for _ in range(config.layers)
    ]
    oracle_out = _run_oracle(seq, params)
    t_oracle, _ = _timed_runs(lambda: _run_oracle(seq, params), config.repetitions)
    oracle_fl = flop_count(layout, None, params[0]).total * config.layers

    rows = []
    for ratio in config.ratios:
        k = merged_count_for(ratio, layout.total_groups)
        for strategy in strategies:
            coal = _coalescing(strategy)
            k_strategy = None
            if match_speedup and coal == STRATEGY_DROP_ALL and group_size > 0:
                k_strategy = round(k * (group_size - 1) / group_size)
            mask = build_strategy_mask(seq, strategy, ratio, merged_count=k_strategy)
            merged_out = _run_merged(seq, mask, params, config.bias, strategy,
                                     make_rng(config.seed + 1))
            err = retained_l1(merged_out, oracle_out, mask)
            timing_rng = make_rng(config.seed + 1)
            t_merged, _ = _timed_runs(
                lambda: _run_merged(seq, mask, params, config.bias, strategy,
                                    timing_rng),
                config.repetitions,
            )
            merged_fl = flop_count(layout, mask, params[0], strategy=coal).total \
                * config.layers
            merged_tokens = (
                layout.total_tokens - mask.merged_count * layout.group_size
                if coal == STRATEGY_DROP_ALL else mask.merged_length
            )
            rows.append(TradeoffRow(
                strategy=strategy, ratio=ratio, merged_tokens=merged_tokens,
                flop_ratio=oracle_fl / merged_fl,
                speedup=t_oracle / t_merged, retained_l1=err,
            ))
    return rows


@dataclass
class BreakdownConfig:
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
    workload: str = WORKLOAD_SMOOTH

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ParameterError(f"merge ratio {self.ratio} outside [0, 1)")
        if self.repetitions < 1:
            raise ParameterError("repetitions must be >= 1")
        if self.d_ff is None:
            self.d_ff = 4 * self.channels


@dataclass
class BreakdownResult:
    seconds: dict[str, float]
    shares: dict[str, float]
    total_seconds: float

    @property
    def overhead_share(self) -> float:
        return self.shares["mask_gen"] + self.shares["merge_split"]


def runtime_breakdown(cfg: BreakdownConfig, dump_dir=None) -> BreakdownResult:
    """Wall-time shares of mask generation, attention, MLP, and merge/split
    inside the merged pipeline; shares are normalized to sum to 1."""
    layout = LayoutDescriptor(
        frames=cfg.frames,
        special_per_frame=cfg.special_per_frame,
        patches_per_frame=cfg.patches_per_frame,
        group_size=cfg.group_size,
    )
    rng = make_rng(cfg.seed)
    seq = make_tokens(cfg.workload, layout, cfg.channels, rng, batch=cfg.batch)
    params = [
        BlockParams.random(cfg.channels, cfg.d_ff, rng=rng)
        for _ in range(cfg.layers)
    ]

    timings = {"mask_gen": 0.0, "attention": 0.0, "mlp": 0.0, "merge_split": 0.0}
    # A ratio of zero (or a group-less layout) selects nothing, so the
    # pipeline short-circuits past the mask machinery entirely.
    trivial = cfg.ratio == 0.0 or layout.total_groups == 0
    mask = None
    with threadpool_limits(limits=1):
        for _ in range(cfg.repetitions):
            if not trivial:
                t0 = time.perf_counter()
                conf = redundancy_confidence(seq)
                mask = build_mask(group_confidence(conf, layout), cfg.ratio, layout)
                timings["mask_gen"] += time.perf_counter() - t0
            out = seq
            for p in params:
                if mask is None or mask.merged_count == 0:
                    out = oracle_block(out, p, timings=timings)
                else:
                    out = merged_block(out, mask, p, bias_correction=cfg.bias,
                                       timings=timings)

    if dump_dir is not None:
        from pathlib import Path
        dump = Path(dump_dir)
        dump.mkdir(parents=True, exist_ok=True)
        fileio.write_tensor(dump / "pre_merge.come", seq.tokens)
        if mask is None:
            mask = compile_mask(
                np.zeros((cfg.batch, layout.total_groups), dtype=bool), layout
            )
        from .mergesplit import merge as _merge
        fileio.write_tensor(dump / "post_merge.come", _merge(seq, mask).tokens)
        (dump / "layout.txt").write_text(fileio.layout_header(layout) + "\n")

    total = sum(timings.values())
    shares = {k: (v / total if total > 0 else 0.0) for k, v in timings.items()}
    return BreakdownResult(seconds=dict(timings), shares=shares, total_seconds=total)


# ---------------------------------------------------------------------------
# output formats

def records_to_json(records: list[BenchRecord]) -> list[dict]:
    return [r.to_dict() for r in records]


def records_to_csv(records: list[BenchRecord]) -> str:
    cols = list(BenchRecord.__dataclass_fields__)
    lines = [",".join(cols)]
    for r in records:
        d = r.to_dict()
        lines.append(",".join(str(d[c]) for c in cols))
    return "\n".join(lines) + "\n"


def tradeoff_to_csv(rows: list[TradeoffRow]) -> str:
    cols = list(TradeoffRow.__dataclass_fields__)
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(str(getattr(r, c)) for c in cols))
    return "\n".join(lines) + "\n"


def summary_table(records: list[BenchRecord]) -> str:
    header = (
        f"{'p':>5} {'n':>3} {'frames':>6} {'tokens':>8} {'merged':>8} "
        f"{'flop_x':>7} {'speedup':>8} {'retained_l1':>12} {'status':>7}"
    )
    lines = [header, "-" * len(header)]
    for r in records:
        lines.append(
            f"{r.ratio:>5.2f} {r.group_size:>3d} {r.frames:>6d} "
            f"{r.total_tokens:>8d} {r.merged_tokens:>8d} {r.flop_ratio:>7.2f} "
            f"{r.speedup:>8.2f} {r.retained_l1:>12.3e} {r.status:>7}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# plain-text config files: `key = value`, list keys may repeat or take
# comma-separated values.

_LIST_KEYS = {
    "ratio": "ratios", "ratios": "ratios",
    "group": "group_sizes", "groups": "group_sizes", "group_sizes": "group_sizes",
    "frames": "frames", "frame": "frames",
}
_SCALAR_KEYS = {
    "patches": "patches_per_frame", "patches_per_frame": "patches_per_frame",
    "special": "special_per_frame", "special_per_frame": "special_per_frame",
    "channels": "channels", "d_ff": "d_ff", "layers": "layers", "seed": "seed",
    "strategy": "strategy", "bias": "bias", "repetitions": "repetitions",
    "batch": "batch", "workload": "workload",
}


def parse_config_text(text: str) -> SweepConfig:
    lists: dict[str, list] = {}
    scalars: dict[str, object] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"bad config line (expected key = value): {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in _LIST_KEYS:
            dest = _LIST_KEYS[key]
            parts = [v.strip() for v in value.split(",") if v.strip()]
            cast = float if dest == "ratios" else int
            lists.setdefault(dest, []).extend(cast(v) for v in parts)
        elif key in _SCALAR_KEYS:
            dest = _SCALAR_KEYS[key]
            if dest in ("strategy", "workload"):
                scalars[dest] = value
            elif dest == "bias":
                scalars[dest] = value.lower() in ("1", "on", "true", "yes")
            else:
                scalars[dest] = int(value)
        else:
            raise ParameterError(f"unknown config key {key!r}")
    return SweepConfig(**lists, **scalars)
