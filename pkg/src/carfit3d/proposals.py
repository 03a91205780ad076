"""RANSAC-style 3D box proposals from a frustum point subset.

One iteration:

1. pick a random point ``p1``; pick ``p2`` uniformly among the other points
   inside the axis-aligned cube of side ``seed_cube_factor * l`` centred at
   ``p1``;
2. the vertical plane through ``p1`` and ``p2`` is the visible car side; its
   inliers are the points closer than ``inlier_threshold``;
3. at up to ``max_seed_points`` inliers (sampled without replacement) take
   the perpendicular vertical plane; the two planes meet in a vertical line
   that is one vertical edge of the car;
4. around that edge the footprint can sit in any of 4 quadrants, with the
   length along either plane, giving 8 boxes. The 4 on the sensor side of the
   visible plane are dropped::

            sensor side (dropped)
        ----------+----------  visible plane
          q2  |   |   |  q1        q1/q2: length along the plane (l x w)
              | edge  |            or across it (w x l)
        (kept, behind the plane)

5. each kept box stands on the lowest point found within its footprint grown
   by ``ground_expand_factor`` in ``l`` and ``w`` (falling back to the lowest
   point of the subset), and is ``h`` tall.

Each iteration draws from its own RNG stream spawned from ``seed``, so the
result does not depend on how iterations are scheduled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import kernels
from .geometry import Box3, PointCloud


class DegeneratePair(ValueError):
    pass


@dataclass(frozen=True)
class VerticalPlane:
    """Plane ``normal . p = offset`` with a horizontal unit normal."""

    normal: tuple
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(n[2]) > 0 or abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("normal must be a horizontal unit vector")

    def signed_distance(self, xyz) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        return xyz[:, 0] * self.normal[0] + xyz[:, 1] * self.normal[1] - self.offset


@dataclass(frozen=True)
class ProposalConfig:
    iterations: int = 50
    inlier_threshold: float = 0.10
    max_seed_points: int = 20
    seed_cube_factor: float = 1.5
    ground_expand_factor: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if self.max_seed_points < 1:
            raise ValueError("max_seed_points must be >= 1")


def fit_vertical_plane(p1, p2) -> VerticalPlane:
    """Vertical plane through two points; the normal is the left perpendicular of ``p2 - p1``."""
    dx = float(p2[0]) - float(p1[0])
    dy = float(p2[1]) - float(p1[1])
    d = math.hypot(dx, dy)
    if d < 1e-9:
        raise DegeneratePair("points are vertically aligned")
    n = (-dy / d, dx / d, 0.0)
    return VerticalPlane(n, n[0] * float(p1[0]) + n[1] * float(p1[1]))


@dataclass
class ProposalIteration:
    """What one iteration did; kept for inspection and tests."""

    seeds: tuple  # indices of p1, p2
    plane: Optional[VerticalPlane]
    inliers: np.ndarray
    boxes: List[Box3] = field(default_factory=list)


def _iteration(xyz, dims, origin, cfg, rng):
    h, l, w = dims
    n_pts = len(xyz)
    i1 = int(rng.integers(n_pts))
    p1 = xyz[i1]
    half = 0.5 * cfg.seed_cube_factor * l
    in_cube = np.all(np.abs(xyz - p1) <= half, axis=1)
    in_cube &= np.hypot(xyz[:, 0] - p1[0], xyz[:, 1] - p1[1]) >= 1e-9
    cand = np.flatnonzero(in_cube)
    if len(cand) == 0:
        return ProposalIteration((i1, -1), None, np.zeros(0, dtype=np.int64)), None
    i2 = int(cand[rng.integers(len(cand))])
    plane = fit_vertical_plane(p1, xyz[i2])
    n = np.array(plane.normal[:2])
    s_origin = float(plane.signed_distance(origin)[0])
    inliers = np.flatnonzero(np.abs(plane.signed_distance(xyz)) < cfg.inlier_threshold)
    rec = ProposalIteration((i1, i2), plane, inliers)
    if abs(s_origin) < 1e-9 or len(inliers) == 0:
        return rec, None
    k = min(cfg.max_seed_points, len(inliers))
    chosen = rng.choice(inliers, size=k, replace=False)
    away = -math.copysign(1.0, s_origin) * n
    along = np.array([-n[1], n[0]])
    rows = []
    for q in xyz[chosen]:
        edge = q[:2] - (float(np.dot(n, q[:2])) - plane.offset) * n
        for a_len, b_len, axis in ((l, w, along), (w, l, away)):
            for sgn in (1.0, -1.0):
                c = edge + sgn * 0.5 * a_len * along + 0.5 * b_len * away
                ax = axis * sgn if axis is along else axis
                rows.append((c[0], c[1], math.atan2(ax[1], ax[0])))
    return rec, np.array(rows)


def generate_proposals_detailed(subset: PointCloud, est_dims, view_origin, cfg: ProposalConfig = ProposalConfig()):
    """Like :func:`generate_proposals` but returns per-iteration records."""
    h, l, w = (float(d) for d in est_dims)
    if not (h > 0 and l > 0 and w > 0):
        raise ValueError("estimated dims must be positive")
    xyz = subset.xyz
    if len(xyz) < 2:
        return []
    origin = np.asarray(view_origin, dtype=np.float64)
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.iterations)
    records, placements = [], []
    for ss in streams:
        rec, rows = _iteration(xyz, (h, l, w), origin, cfg, np.random.default_rng(ss))
        records.append(rec)
        placements.append(rows)
    filled = [p for p in placements if p is not None]
    if not filled:
        return records
    allrows = np.concatenate(filled)
    g = cfg.ground_expand_factor
    fps = np.column_stack([allrows[:, 0], allrows[:, 1], np.full(len(allrows), g * l), np.full(len(allrows), g * w), allrows[:, 2]])
    ground = kernels.min_z_in_footprints(xyz, fps)
    ground = np.where(np.isfinite(ground), ground, xyz[:, 2].min())
    k = 0
    for rec, rows in zip(records, placements):
        if rows is None:
            continue
        for (cx, cy, yaw), gz in zip(rows, ground[k:k + len(rows)]):
            rec.boxes.append(Box3((cx, cy, gz + 0.5 * h), h, l, w, yaw))
        k += len(rows)
    return records


def generate_proposals(subset: PointCloud, est_dims, view_origin, cfg: ProposalConfig = ProposalConfig()) -> List[Box3]:
    """Box proposals of size ``est_dims = (h, l, w)``; at most ``80 * iterations``."""
    return [b for rec in generate_proposals_detailed(subset, est_dims, view_origin, cfg) for b in rec.boxes]
