"""Per-scene detection: frustum subset, proposals, car-model fit, then the two refinement stages."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .car_models import DEFAULT_BETA, ScoreMap, fit_best_box
from .geometry import Box3, Calibration, Detection, PointCloud, frustum_select
from .kitti_io import Detection2DInput, LabelRecord
from .priors import MeanDims, decode_dims, encode_dims
from .proposals import ProposalConfig, generate_proposals
from .refine_net.network import RefineNet
from .refine_net.targets import NoValidSolution, decode_box, expand_context, voxelize_context

STAGES = ("fit", "stage1", "stage2")


@dataclass(frozen=True)
class PipelineSettings:
    proposal: ProposalConfig = ProposalConfig()
    beta: float = DEFAULT_BETA
    per_point: bool = False
    view_origin: tuple = (0.0, 0.0, 0.0)
    min_points: int = 5
    stop_after: str = "stage2"

    def __post_init__(self):
        if self.stop_after not in STAGES:
            raise ValueError(f"stop_after must be one of {STAGES}")


@dataclass
class SceneResult:
    frame_id: str
    detections: List[Detection]
    by_stage: dict = field(default_factory=dict)
    errors: List[str] = field(default_factory=list)


def object_seed(base: int, frame_id: str, index: int) -> int:
    """Stable per-object seed; independent of processing order."""
    ss = np.random.SeedSequence([int(base) & 0xFFFFFFFF, zlib.crc32(frame_id.encode()), index])
    return int(ss.generate_state(1)[0])


def oracle_detections(labels: Sequence[LabelRecord], dim_noise: float = 0.0, seed: int = 0,
                      mean: MeanDims = MeanDims(), classes=("Car",)) -> List[Detection2DInput]:
    """2D inputs taken from the labels' own image boxes and dims.

    ``dim_noise`` is the std of Gaussian noise added to the log-ratio dimension
    code, standing in for an imperfect dimension regressor.
    """
    rng = np.random.default_rng(seed)
    out = []
    for rec in labels:
        if rec.cls not in classes or rec.truncation >= 1.0:
            continue
        dims = rec.dims
        if dim_noise > 0:
            dims = tuple(decode_dims(encode_dims(dims, mean) + rng.normal(0.0, dim_noise, 3), mean))
        out.append(Detection2DInput(rec.box2, 1.0, tuple(float(d) for d in dims)))
    return out


def fit_object(cloud: PointCloud, calib: Calibration, det2: Detection2DInput, maps: Sequence[ScoreMap],
               settings: PipelineSettings, seed: int) -> Optional[Detection]:
    """Model-fitting detection for one 2D box, or ``None`` when too few points."""
    sub = frustum_select(cloud, calib, det2.box2)
    if len(sub) < max(2, settings.min_points):
        return None
    props = generate_proposals(sub, det2.dims, settings.view_origin, replace(settings.proposal, seed=seed))
    if not props:
        return None
    det = fit_best_box(sub, props, maps, settings.view_origin, settings.beta, settings.per_point)
    return replace(det, score=float(det2.confidence))


def context_batch(cloud: PointCloud, boxes: Sequence[Box3]):
    ctxs = [expand_context(b) for b in boxes]
    if not ctxs:
        return ctxs, np.zeros((0, 54, 32, 24), dtype=np.float32)
    return ctxs, np.stack([voxelize_context(cloud, c).channels_last() for c in ctxs])


def refine_stage1(net: RefineNet, cloud: PointCloud, dets: Sequence[Detection]) -> List[Detection]:
    """Regress a corrected box per detection; keep the input box if decoding fails."""
    if not dets:
        return []
    ctxs, x = context_batch(cloud, [d.box for d in dets])
    reg, _ = net.predict(x)
    out = []
    for d, ctx, r in zip(dets, ctxs, reg):
        try:
            box = decode_box(net.anchor, ctx, r)
        except NoValidSolution:
            box = d.box
        out.append(replace(d, box=box, stage="stage1"))
    return out


def rescore_stage2(net: RefineNet, cloud: PointCloud, dets: Sequence[Detection]) -> List[Detection]:
    """Replace each score with the stage-2 car probability; boxes are passed through untouched."""
    if not dets:
        return []
    _, x = context_batch(cloud, [d.box for d in dets])
    _, prob = net.predict(x)
    return [replace(d, score=float(p), stage="stage2") for d, p in zip(dets, prob)]


def run_scene(frame_id: str, cloud: PointCloud, calib: Calibration, dets2: Sequence[Detection2DInput],
              maps: Sequence[ScoreMap], settings: PipelineSettings = PipelineSettings(),
              stage1: Optional[RefineNet] = None, stage2: Optional[RefineNet] = None) -> SceneResult:
    """All stages up to ``settings.stop_after``; a missing network ends the chain early."""
    res = SceneResult(frame_id, [])
    fits = []
    for i, d2 in enumerate(dets2):
        try:
            det = fit_object(cloud, calib, d2, maps, settings, object_seed(settings.proposal.seed, frame_id, i))
        except (ValueError, FloatingPointError) as exc:
            res.errors.append(f"{frame_id}: object {i}: {exc}")
            continue
        if det is not None:
            fits.append(det)
    res.by_stage["fit"] = fits
    cur = fits
    if settings.stop_after != "fit" and stage1 is not None:
        cur = refine_stage1(stage1, cloud, cur)
        res.by_stage["stage1"] = cur
        if settings.stop_after == "stage2" and stage2 is not None:
            cur = rescore_stage2(stage2, cloud, cur)
            res.by_stage["stage2"] = cur
    res.detections = cur
    return res
