"""Detection matching, interpolated AP and KITTI difficulty groups.

Difficulty groups are cumulative: Moderate evaluates Easy and Moderate
objects, Hard evaluates all three. Objects outside the evaluated group, and
objects of a neighbouring class such as ``Van`` when evaluating ``Car``, are
"don't care": a detection matched to one counts as neither TP nor FP.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .geometry import Box3, Calibration, Detection, iou_matrix
from .kitti_io import LabelRecord, record_to_box


class NoGroundTruth(ValueError):
    pass


class Difficulty(enum.IntEnum):
    EASY = 0
    MODERATE = 1
    HARD = 2


# (min 2D height px, max occlusion, max truncation)
DIFFICULTY_RULES = {
    Difficulty.EASY: (40.0, 0, 0.15),
    Difficulty.MODERATE: (25.0, 1, 0.30),
    Difficulty.HARD: (25.0, 2, 0.50),
}


def assign_difficulty(rec: LabelRecord) -> Optional[Difficulty]:
    """Easiest group whose thresholds the record clears; ``None`` means ignored."""
    for d in Difficulty:
        min_h, max_occ, max_trunc = DIFFICULTY_RULES[d]
        if rec.box2.height >= min_h and rec.occlusion <= max_occ and rec.truncation <= max_trunc:
            return d
    return None


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    mode: str = "bev"
    points: int = 11

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must be in (0, 1]")
        if self.mode not in ("bev", "3d"):
            raise ValueError("mode must be 'bev' or '3d'")
        if self.points not in (11, 40):
            raise ValueError("points must be 11 or 40")


@dataclass(frozen=True)
class GroundTruth:
    box: Box3
    difficulty: Optional[Difficulty] = Difficulty.EASY
    neighbour: bool = False  # e.g. a Van while evaluating Car


def ground_truth_from_labels(labels: Sequence[LabelRecord], calib: Calibration, cls: str = "Car",
                             neighbours=("Van",)) -> List[GroundTruth]:
    out = []
    for rec in labels:
        if rec.cls == cls or rec.cls in neighbours:
            out.append(GroundTruth(record_to_box(rec, calib), assign_difficulty(rec), rec.cls != cls))
    return out


@dataclass
class Matching:
    """Per-detection outcome in input order, plus the GT tally."""

    scores: np.ndarray
    tp: np.ndarray  # bool
    fp: np.ndarray  # bool; both False means ignored
    iou: np.ndarray  # IoU of the claimed GT (nan when none)
    n_gt: int
    fn: int


def _cares(g, difficulty):
    if isinstance(g, Box3):
        return True
    return (not g.neighbour) and g.difficulty is not None and g.difficulty <= difficulty


def match_detections(dets: Sequence[Detection], gts: Sequence, cfg: EvalConfig = EvalConfig(),
                     difficulty: Difficulty = Difficulty.HARD) -> Matching:
    """Greedy matching in descending score order (stable for ties).

    ``gts`` holds :class:`Box3` (always cared for) or :class:`GroundTruth`.
    Each detection claims the unclaimed cared-for GT of highest IoU when that
    IoU reaches the threshold. Failing that, a detection reaching the
    threshold on a don't-care GT is ignored; otherwise it is a false positive.
    """
    n = len(dets)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    tp = np.zeros(n, dtype=bool)
    fp = np.zeros(n, dtype=bool)
    hit = np.full(n, np.nan)
    boxes = [g if isinstance(g, Box3) else g.box for g in gts]
    care = np.array([_cares(g, difficulty) for g in gts], dtype=bool)
    n_gt = int(care.sum())
    if n == 0:
        return Matching(scores, tp, fp, hit, n_gt, n_gt)
    iou = iou_matrix([d.box for d in dets], boxes, cfg.mode) if boxes else np.zeros((n, 0))
    claimed = np.zeros(len(boxes), dtype=bool)
    thr = cfg.iou_threshold
    for i in np.argsort(-scores, kind="stable"):
        row = np.where(care & ~claimed, iou[i], -1.0)
        j = int(np.argmax(row)) if len(row) else -1
        if j >= 0 and row[j] >= thr:
            tp[i] = True
            claimed[j] = True
            hit[i] = row[j]
        elif len(row) and np.any(iou[i][~care] >= thr):
            pass
        else:
            fp[i] = True
    return Matching(scores, tp, fp, hit, n_gt, n_gt - int(claimed.sum()))


def pr_curve(matchings: Sequence[Matching]):
    """Pooled ``(recall, precision)`` over the ranked, non-ignored detections."""
    n_gt = sum(m.n_gt for m in matchings)
    if n_gt == 0:
        raise NoGroundTruth("no ground truth in the evaluated set")
    if matchings:
        scores = np.concatenate([m.scores for m in matchings])
        tp = np.concatenate([m.tp for m in matchings])
        fp = np.concatenate([m.fp for m in matchings])
    else:
        scores = tp = fp = np.zeros(0)
    keep = tp | fp
    order = np.argsort(-scores[keep], kind="stable")
    tp, fp = tp[keep][order].astype(np.float64), fp[keep][order].astype(np.float64)
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1.0)
    return recall, precision


def interpolated_ap(recall: np.ndarray, precision: np.ndarray, points: int = 11) -> float:
    """Mean over recall anchors of the best precision at recall >= anchor.

    11 points uses anchors 0, 0.1, ..., 1; 40 points uses 1/40, ..., 1.
    """
    anchors = np.linspace(0.0, 1.0, 11) if points == 11 else np.arange(1, 41) / 40.0
    total = 0.0
    for a in anchors:
        ok = recall >= a - 1e-12
        total += precision[ok].max() if ok.any() else 0.0
    return float(total / len(anchors))


def average_precision(matchings: Sequence[Matching], cfg: EvalConfig = EvalConfig()) -> float:
    r, p = pr_curve(matchings)
    return interpolated_ap(r, p, cfg.points)


@dataclass
class Frame:
    detections: List[Detection]
    ground_truth: List  # GroundTruth or Box3


@dataclass
class Report:
    ap: Dict[tuple, float] = field(default_factory=dict)  # (mode, thr, difficulty name) -> AP or nan
    curves: Dict[tuple, tuple] = field(default_factory=dict)
    mean_iou: Dict[tuple, float] = field(default_factory=dict)  # (mode, thr) -> mean IoU of TPs, hard set

    def text_table(self) -> str:
        names = [d.name.lower() for d in Difficulty]
        lines = [f"{'metric':<14}" + "".join(f"{n:>10}" for n in names)]
        for mode, thr in sorted({(k[0], k[1]) for k in self.ap}):
            cells = []
            for n in names:
                v = self.ap.get((mode, thr, n), math.nan)
                cells.append(f"{'n/a':>10}" if math.isnan(v) else f"{100.0 * v:>10.2f}")
            lines.append(f"{'AP_' + mode + '@' + format(thr, 'g'):<14}" + "".join(cells))
        return "\n".join(lines) + "\n"

    def key_values(self) -> str:
        lines = []
        for (mode, thr, n), v in sorted(self.ap.items()):
            lines.append(f"ap.{mode}.{thr:g}.{n} = {v:.6f}")
        for (mode, thr), v in sorted(self.mean_iou.items()):
            lines.append(f"mean_iou.{mode}.{thr:g} = {v:.6f}")
        return "\n".join(lines) + "\n"

    def pr_points(self) -> str:
        lines = ["# mode threshold difficulty recall precision"]
        for (mode, thr, n), (r, p) in sorted(self.curves.items()):
            lines += [f"{mode} {thr:g} {n} {a:.6f} {b:.6f}" for a, b in zip(r, p)]
        return "\n".join(lines) + "\n"


def evaluate(frames: Sequence[Frame], thresholds=(0.5, 0.7), modes=("bev", "3d"), points: int = 11) -> Report:
    """AP for every (mode, threshold, difficulty); cells without ground truth are nan."""
    rep = Report()
    for mode in modes:
        for thr in thresholds:
            cfg = EvalConfig(thr, mode, points)
            for d in Difficulty:
                ms = [match_detections(f.detections, f.ground_truth, cfg, d) for f in frames]
                key = (mode, thr, d.name.lower())
                try:
                    r, p = pr_curve(ms)
                except NoGroundTruth:
                    rep.ap[key] = math.nan
                    continue
                rep.ap[key] = interpolated_ap(r, p, points)
                rep.curves[key] = (r, p)
                if d == Difficulty.HARD:
                    ious = np.concatenate([m.iou[m.tp] for m in ms]) if ms else np.zeros(0)
                    rep.mean_iou[(mode, thr)] = float(ious.mean()) if len(ious) else math.nan
    return rep


def mean_best_iou(frames: Sequence[Frame], mode: str = "bev") -> float:
    """Mean over detections of the best IoU with any ground truth (0 when none)."""
    vals = []
    for f in frames:
        boxes = [g if isinstance(g, Box3) else g.box for g in f.ground_truth]
        if not f.detections:
            continue
        if not boxes:
            vals += [0.0] * len(f.detections)
            continue
        vals += list(iou_matrix([d.box for d in f.detections], boxes, mode).max(axis=1))
    return float(np.mean(vals)) if vals else math.nan
