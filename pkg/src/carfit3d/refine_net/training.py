"""Sample construction, labelling and minibatch SGD for the refinement stages."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

from ..geometry import Box3, PointCloud, iou_matrix
from .network import DEFAULT_TARGET_STD, NetConfig, RefineNet
from .targets import CONTEXT_GRID, CanonicalAnchor, NonPositiveWidth, encode_targets, expand_context, sparse_context

LABEL_IOU = {1: 0.5, 2: 0.7}


class EmptyDataset(ValueError):
    pass


class NoPositives(ValueError):
    pass


def assign_labels(boxes: Sequence[Box3], gts: Sequence[Box3], stage: int = 1):
    """``(labels, matched)``: 1 where the best BEV IoU reaches the stage threshold.

    ``matched`` holds the index of the best ground truth, or -1 without any.
    """
    thr = LABEL_IOU[stage]
    n = len(boxes)
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    if len(gts) == 0:
        return np.zeros(n, dtype=np.int64), np.full(n, -1, dtype=np.int64)
    iou = iou_matrix(boxes, gts, "bev")
    best = iou.argmax(axis=1)
    labels = (iou[np.arange(n), best] >= thr).astype(np.int64)
    return labels, np.where(iou.max(axis=1) > 0, best, -1)


@dataclass
class SampleSet:
    """Sparse context grids with labels and (for positives) regression targets."""

    voxels: List[np.ndarray] = field(default_factory=list)
    labels: List[int] = field(default_factory=list)
    targets: List[np.ndarray] = field(default_factory=list)
    grid: tuple = CONTEXT_GRID

    def __len__(self) -> int:
        return len(self.labels)

    def add(self, vox: np.ndarray, label: int, target=None) -> None:
        self.voxels.append(vox)
        self.labels.append(int(label))
        self.targets.append(np.full(7, np.nan) if target is None else np.asarray(target, dtype=np.float64))

    def extend(self, other: "SampleSet") -> None:
        self.voxels += other.voxels
        self.labels += other.labels
        self.targets += other.targets

    def label_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64)

    def target_array(self) -> np.ndarray:
        return np.stack(self.targets) if self.targets else np.zeros((0, 7))

    def dense(self, idx, dtype=np.float32) -> np.ndarray:
        nh, nl, nw = self.grid
        out = np.zeros((len(idx), nl * nw * nh), dtype=dtype)
        for r, i in enumerate(idx):
            out[r, self.voxels[i]] = 1
        return out.reshape(len(idx), nl, nw, nh)


def make_samples(cloud: PointCloud, candidates: Sequence[Box3], gts: Sequence[Box3], stage: int = 1,
                 anchor: Optional[CanonicalAnchor] = None) -> SampleSet:
    anchor = anchor or CanonicalAnchor.default()
    labels, matched = assign_labels(candidates, gts, stage)
    out = SampleSet()
    for b, lab, m in zip(candidates, labels, matched):
        ctx = expand_context(b)
        target = None
        if lab and stage == 1:
            try:
                target = encode_targets(anchor, ctx, gts[m])
            except NonPositiveWidth:
                continue
        out.add(sparse_context(cloud, ctx), lab, target)
    return out


def jitter_boxes(gts: Sequence[Box3], n_per_gt: int, rng: np.random.Generator, center_sigma: float = 0.3,
                 yaw_sigma: float = 0.12, dim_sigma: float = 0.08, flip_prob: float = 0.5) -> List[Box3]:
    """Perturbed copies of each ground truth; sigmas are absolute (m, rad, log)."""
    out = []
    for g in gts:
        for _ in range(n_per_gt):
            dc = rng.normal(0.0, center_sigma, 3) * (1.0, 1.0, 0.3)
            dd = np.exp(rng.normal(0.0, dim_sigma, 3))
            yaw = g.yaw + rng.normal(0.0, yaw_sigma) + (math.pi if rng.random() < flip_prob else 0.0)
            out.append(Box3(tuple(np.asarray(g.center) + dc), g.h * dd[0], g.l * dd[1], g.w * dd[2], yaw))
    return out


def background_boxes(cloud: PointCloud, gts: Sequence[Box3], n: int, rng: np.random.Generator,
                     dims=(1.53, 3.88, 1.63), tries: int = 20) -> List[Box3]:
    """Car-sized boxes on random cloud points, none touching a ground truth."""
    xyz = cloud.xyz
    out: List[Box3] = []
    if len(xyz) == 0:
        return out
    h, l, w = dims
    for _ in range(n * tries):
        if len(out) == n:
            break
        p = xyz[rng.integers(len(xyz))]
        b = Box3((p[0], p[1], p[2] + rng.uniform(-0.5, 0.5) * h), h, l, w, rng.uniform(-math.pi, math.pi))
        if gts and iou_matrix([b], gts, "bev").max() > 0:
            continue
        out.append(b)
    return out


# jitter (center m, yaw rad, log dims) per stage: stage 2 sits closer to its 0.7 cut
JITTER = {1: (0.3, 0.12, 0.08), 2: (0.15, 0.06, 0.04)}


def build_samples(scenes: Iterable, stage: int, rng: np.random.Generator, jitter_per_gt: int = 15,
                  background_per_frame: int = 8, extra: Optional[Callable] = None) -> SampleSet:
    """Samples from ``(cloud, gt boxes)`` pairs.

    Candidates are jittered ground truths, background boxes and, when given,
    ``extra(cloud, gts)`` (for example pipeline outputs on the same frame).
    """
    cs, ys, ds = JITTER[stage]
    out = SampleSet()
    for cloud, gts in scenes:
        cands = jitter_boxes(gts, jitter_per_gt, rng, cs, ys, ds)
        cands += background_boxes(cloud, gts, background_per_frame, rng)
        if extra is not None:
            cands += list(extra(cloud, gts))
        out.extend(make_samples(cloud, cands, gts, stage))
    return out


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    iterations: int = 2000
    batch_size: int = 128
    positive_fraction: float = 0.5
    learning_rate: float = 0.0005
    momentum: float = 0.0
    reg_weight: float = 1.0
    seed: int = 0
    widths: tuple = (32, 64, 128, 128)
    fc_hidden: int = 256
    log_every: int = 10

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ValueError("positive_fraction must be in [0, 1]")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


def fit_target_std(targets: np.ndarray, floor: float = 1e-3) -> tuple:
    t = targets[np.all(np.isfinite(targets), axis=1)]
    if len(t) < 2:
        return DEFAULT_TARGET_STD
    return tuple(float(v) for v in np.maximum(t.std(axis=0), floor))


def _draw(rng, pool, k):
    if k == 0:
        return pool[:0]
    return rng.choice(pool, size=k, replace=len(pool) < k)


def train(samples: SampleSet, cfg: TrainConfig = TrainConfig(), progress: Optional[Callable[[str], None]] = None,
          net: Optional[RefineNet] = None) -> RefineNet:
    """Train one stage; ``progress`` receives one JSON line per ``log_every`` steps.

    Raises:
        EmptyDataset: no samples.
        NoPositives: batches need positives and there are none.
    """
    if len(samples) == 0:
        raise EmptyDataset("no training samples")
    labels = samples.label_array()
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    n_pos = int(round(cfg.batch_size * cfg.positive_fraction))
    if len(neg) == 0:
        n_pos = cfg.batch_size
    if n_pos and len(pos) == 0:
        raise NoPositives("no positive samples to draw from")
    n_neg = cfg.batch_size - n_pos

    targets = samples.target_array()
    if net is None:
        std = fit_target_std(targets[pos]) if cfg.stage == 1 else DEFAULT_TARGET_STD
        net = RefineNet(NetConfig(cfg.stage, tuple(cfg.widths), cfg.fc_hidden), seed=cfg.seed, target_std=std)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    vel = {k: np.zeros_like(v) for k, v in net.params.items()}
    lr = np.float32(cfg.learning_rate) if net.dtype == np.float32 else cfg.learning_rate
    mom = net.dtype.type(cfg.momentum)
    for it in range(cfg.iterations):
        idx = np.concatenate([_draw(rng, pos, n_pos), _draw(rng, neg, n_neg)])
        x = samples.dense(idx, net.dtype)
        t = np.nan_to_num(targets[idx]) if cfg.stage == 1 else None
        total, parts, grads, _ = net.loss_and_grads(x, labels[idx], t, cfg.reg_weight)
        for k, g in grads.items():
            v = vel[k]
            v *= mom
            v -= lr * g.astype(net.dtype, copy=False)
            net.params[k] += v
        if progress is not None and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
            progress(json.dumps({"iter": it, "loss": round(total, 6), "cls": round(parts["cls"], 6),
                                 "reg": round(parts["reg"], 6)}))
    return net
