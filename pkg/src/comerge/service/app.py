"""FastAPI service wrapping the engine.

Long-running work (sweeps, training) executes inside the request; the CLI is
a thin client that talks to either an in-process app or a remote server.
Engine errors surface as HTTP 422 with the error message.
"""

from __future__ import annotations

import math

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import __version__, bench, metrics, predictor, workload
from ..errors import ComergeError
from ..layout import LayoutDescriptor
from ..maskgen import ConfidenceMap, build_mask, group_confidence
from . import schemas


def _layout_from(model: schemas.LayoutModel) -> LayoutDescriptor:
    return LayoutDescriptor(
        frames=model.frames,
        special_per_frame=model.special_per_frame,
        patches_per_frame=model.patches_per_frame,
        group_size=model.group_size,
    )


def create_app() -> FastAPI:
    app = FastAPI(title="comerge", version=__version__)

    @app.exception_handler(ComergeError)
    async def _engine_error(request, exc: ComergeError):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/bench/sweep", response_model=schemas.SweepResponse)
    def bench_sweep(req: schemas.SweepRequest):
        config = bench.SweepConfig(**req.model_dump())
        records = bench.run_sweep(config)
        return schemas.SweepResponse(
            records=[schemas.BenchRecordModel(**r.to_dict()) for r in records]
        )

    @app.post("/bench/tradeoff", response_model=schemas.TradeoffResponse)
    def bench_tradeoff(req: schemas.TradeoffRequest):
        payload = req.model_dump()
        strategies = payload.pop("strategies")
        match_speedup = payload.pop("match_speedup")
        config = bench.SweepConfig(**payload)
        rows = bench.tradeoff_table(config, strategies, match_speedup=match_speedup)
        return schemas.TradeoffResponse(
            rows=[schemas.TradeoffRowModel(**row.__dict__) for row in rows]
        )

    @app.post("/bench/breakdown", response_model=schemas.BreakdownResponse)
    def bench_breakdown(req: schemas.BreakdownRequest):
        payload = req.model_dump()
        dump_dir = payload.pop("dump_activations")
        config = bench.BreakdownConfig(**payload)
        result = bench.runtime_breakdown(config, dump_dir=dump_dir)
        return schemas.BreakdownResponse(
            seconds=result.seconds,
            shares=result.shares,
            total_seconds=result.total_seconds,
            overhead_share=result.overhead_share,
        )

    @app.post("/mask/build", response_model=schemas.MaskResponse)
    def mask_build(req: schemas.MaskRequest):
        layout = _layout_from(req.layout)
        values = np.asarray(req.patch_confidence, dtype=np.float32)
        conf = ConfidenceMap.from_patch_values(layout, values)
        mask = build_mask(group_confidence(conf, layout), req.ratio, layout)
        return schemas.MaskResponse(
            flags=mask.flags.tolist(),
            merged_count=mask.merged_count,
            merged_length=mask.merged_length,
            index_map=mask.index_map.tolist(),
            inverse_counts=mask.inverse_counts.tolist(),
        )

    @app.post("/metrics/depth", response_model=schemas.DepthMetricsResponse)
    def metrics_depth(req: schemas.DepthMetricsRequest):
        pred = metrics.DepthMap(
            values=np.asarray(req.pred, dtype=np.float64),
            validity=None if req.pred_validity is None else np.asarray(req.pred_validity),
        )
        gt = metrics.DepthMap(
            values=np.asarray(req.gt, dtype=np.float64),
            validity=None if req.gt_validity is None else np.asarray(req.gt_validity),
        )
        scale = 1.0
        if req.align:
            scale = metrics.align_scale(pred, gt)
            pred = metrics.DepthMap(values=scale * pred.values, validity=pred.validity)
        exclude = None if req.exclude is None else np.asarray(req.exclude, dtype=bool)
        result = metrics.depth_metrics(pred, gt, exclude=exclude)
        return schemas.DepthMetricsResponse(
            l1=result.l1, delta_125=result.delta_125, scale=scale
        )

    @app.post("/metrics/pose-auc", response_model=schemas.PoseAucResponse)
    def metrics_pose_auc(req: schemas.PoseAucRequest):
        def to_poses(models):
            return metrics.PoseSet(
                rotations=np.asarray([m.rotation for m in models], dtype=np.float64),
                translations=np.asarray([m.translation for m in models], dtype=np.float64),
            )
        auc_r, auc_t = metrics.auc_at_30(to_poses(req.pred), to_poses(req.gt))
        return schemas.PoseAucResponse(auc_r30=auc_r, auc_t30=auc_t)

    @app.post("/metrics/chamfer", response_model=schemas.ChamferResponse)
    def metrics_chamfer(req: schemas.ChamferRequest):
        comp, acc = metrics.chamfer(
            metrics.PointCloud(points=np.asarray(req.pred_points, dtype=np.float64)),
            metrics.PointCloud(points=np.asarray(req.gt_points, dtype=np.float64)),
            method=req.method,
        )
        return schemas.ChamferResponse(completeness=comp, accuracy=acc)

    @app.post("/align/umeyama", response_model=schemas.UmeyamaResponse)
    def align_umeyama(req: schemas.UmeyamaRequest):
        sim = metrics.umeyama_sim3(
            metrics.PointCloud(points=np.asarray(req.src_points, dtype=np.float64)),
            metrics.PointCloud(points=np.asarray(req.dst_points, dtype=np.float64)),
        )
        return schemas.UmeyamaResponse(
            scale=sim.scale,
            rotation=sim.rotation.tolist(),
            translation=sim.translation.tolist(),
        )

    @app.post("/predictor/train", response_model=schemas.TrainResponse)
    def predictor_train(req: schemas.TrainRequest):
        layout = LayoutDescriptor(
            frames=req.frames,
            special_per_frame=req.special_per_frame,
            patches_per_frame=req.patches_per_frame,
            group_size=1,
        )
        teacher = workload.SyntheticTeacher(
            layout=layout, channels=req.channels,
            noise=req.teacher_noise, seed=req.seed,
        )
        config = predictor.TrainConfig(
            steps=req.steps, lr=req.lr, seed=req.seed, latent=req.latent,
            pair_budget=req.pair_budget, loss_kind=req.loss_kind,
            eval_every=req.eval_every, holdout_ratio=req.holdout_ratio,
        )
        result = predictor.train(teacher, config)
        final_iou = result.final_holdout_iou
        return schemas.TrainResponse(
            initial_loss=float(result.losses[0]),
            final_loss=float(result.losses[-1]),
            holdout_iou=final_iou if math.isfinite(final_iou) else -1.0,
            losses=[float(v) for v in result.losses],
        )

    return app
