"""Core value types and geometric predicates.

Frames: the LiDAR frame is right-handed with x forward, y left and z up.
Boxes live in that frame and rotate about z only. Camera coordinates appear
only inside :class:`Calibration` (x right, y down, z forward).

Corner ordering of :func:`corners` (indices into the returned ``(8, 3)``
array), with the box's length along local +x and width along local +y::

    bottom: 0 (-l,-w)  1 (+l,-w)  2 (+l,+w)  3 (-l,+w)   counterclockwise from above
    top:    4 (-l,-w)  5 (+l,-w)  6 (+l,+w)  7 (-l,+w)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import kernels

INSIDE_EPS = 1e-9

Vec3 = tuple  # (x, y, z) in meters


class BehindCamera(ValueError):
    """A point has non-positive depth in the camera frame."""


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Box3:
    """Oriented box: geometric center, dims ``(h, l, w)`` and yaw about +z.

    ``l`` runs along the yaw direction, ``w`` across it, ``h`` along z.
    """

    center: tuple
    h: float
    l: float
    w: float
    yaw: float = 0.0

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        if len(c) != 3 or not all(math.isfinite(v) for v in c):
            raise ValueError(f"center must be 3 finite values, got {self.center!r}")
        dims = (float(self.h), float(self.l), float(self.w))
        if not all(math.isfinite(d) and d > 0 for d in dims):
            raise ValueError(f"box dims must be positive, got {dims}")
        if not math.isfinite(self.yaw):
            raise ValueError("yaw must be finite")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "h", dims[0])
        object.__setattr__(self, "l", dims[1])
        object.__setattr__(self, "w", dims[2])
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def from_array(cls, a) -> "Box3":
        a = [float(v) for v in a]
        return cls((a[0], a[1], a[2]), a[3], a[4], a[5], a[6])

    def as_array(self) -> np.ndarray:
        """``[cx, cy, cz, h, l, w, yaw]``."""
        return np.array([*self.center, self.h, self.l, self.w, self.yaw])

    def footprint(self) -> np.ndarray:
        """``[cx, cy, l, w, yaw]`` as used by the BEV kernels."""
        return np.array([self.center[0], self.center[1], self.l, self.w, self.yaw])

    @property
    def bottom(self) -> float:
        return self.center[2] - 0.5 * self.h

    @property
    def top(self) -> float:
        return self.center[2] + 0.5 * self.h

    @property
    def volume(self) -> float:
        return self.h * self.l * self.w

    def replace(self, **kw) -> "Box3":
        d = dict(center=self.center, h=self.h, l=self.l, w=self.w, yaw=self.yaw)
        d.update(kw)
        return Box3(**d)

    def to_local(self, xyz: np.ndarray) -> np.ndarray:
        """World points to the box frame (length, width, height offsets)."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        d = xyz - np.asarray(self.center)
        return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)

    def to_world(self, local: np.ndarray) -> np.ndarray:
        local = np.asarray(local, dtype=np.float64).reshape(-1, 3)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x = c * local[:, 0] - s * local[:, 1] + self.center[0]
        y = s * local[:, 0] + c * local[:, 1] + self.center[1]
        return np.stack([x, y, local[:, 2] + self.center[2]], axis=1)


@dataclass(frozen=True)
class Box2:
    """Image-plane box in pixels."""

    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise ValueError(f"degenerate 2D box {self}")

    @property
    def height(self) -> float:
        return self.v_max - self.v_min

    def as_tuple(self) -> tuple:
        return (self.u_min, self.v_min, self.u_max, self.v_max)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """``xyz`` is ``(N, 3)`` float64; ``reflectance`` is ``(N,)`` in [0, 1]."""

    xyz: np.ndarray
    reflectance: Optional[np.ndarray] = None

    def __post_init__(self):
        xyz = np.array(self.xyz, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(xyz)):
            raise ValueError("point coordinates must be finite")
        if self.reflectance is None:
            refl = np.zeros(len(xyz))
        else:
            refl = np.array(self.reflectance, dtype=np.float64).reshape(-1)
            if len(refl) != len(xyz):
                raise ValueError("reflectance length does not match points")
        xyz.flags.writeable = False
        refl.flags.writeable = False
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "reflectance", refl)

    def __len__(self):
        return len(self.xyz)

    def subset(self, mask) -> "PointCloud":
        return PointCloud(self.xyz[mask], self.reflectance[mask])

    @staticmethod
    def concat(clouds: Iterable["PointCloud"]) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        return PointCloud(
            np.concatenate([c.xyz for c in clouds]),
            np.concatenate([c.reflectance for c in clouds]),
        )


def _check_rotation(r: np.ndarray, name: str):
    if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
        raise ValueError(f"{name} is not orthonormal")


@dataclass(frozen=True, eq=False)
class Calibration:
    """KITTI-style calibration: ``P2`` (3x4), ``R0_rect`` (3x3), ``Tr_velo_to_cam`` (3x4)."""

    cam_projection: np.ndarray
    lidar_to_cam: np.ndarray
    rectification: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        P = np.array(self.cam_projection, dtype=np.float64).reshape(3, 4)
        Tr = np.array(self.lidar_to_cam, dtype=np.float64).reshape(3, 4)
        R0 = np.array(self.rectification, dtype=np.float64).reshape(3, 3)
        _check_rotation(Tr[:, :3], "lidar_to_cam rotation")
        _check_rotation(R0, "rectification")
        if np.linalg.matrix_rank(P) != 3:
            raise ValueError("projection matrix must have rank 3")
        for a in (P, Tr, R0):
            a.flags.writeable = False
        object.__setattr__(self, "cam_projection", P)
        object.__setattr__(self, "lidar_to_cam", Tr)
        object.__setattr__(self, "rectification", R0)

    @classmethod
    def identity(cls) -> "Calibration":
        return cls(np.hstack([np.eye(3), np.zeros((3, 1))]), np.hstack([np.eye(3), np.zeros((3, 1))]))

    def lidar_to_rect(self, xyz) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        cam = xyz @ self.lidar_to_cam[:, :3].T + self.lidar_to_cam[:, 3]
        return cam @ self.rectification.T

    def rect_to_lidar(self, rect) -> np.ndarray:
        rect = np.asarray(rect, dtype=np.float64).reshape(-1, 3)
        cam = rect @ self.rectification  # R0^-1 = R0^T
        R, t = self.lidar_to_cam[:, :3], self.lidar_to_cam[:, 3]
        return (cam - t) @ R

    def project_rect(self, rect) -> tuple:
        """Pixel coordinates and depth of rectified-camera points (no depth check)."""
        rect = np.asarray(rect, dtype=np.float64).reshape(-1, 3)
        hom = rect @ self.cam_projection[:, :3].T + self.cam_projection[:, 3]
        depth = rect[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = hom[:, 0] / hom[:, 2]
            v = hom[:, 1] / hom[:, 2]
        return u, v, depth

    def project(self, xyz) -> tuple:
        """Vectorised ``(u, v, depth)`` for LiDAR points; invalid where depth <= 0."""
        return self.project_rect(self.lidar_to_rect(xyz))


def project_point(calib: Calibration, p) -> tuple:
    """Project one LiDAR-frame point to ``(u, v, depth)``.

    Raises:
        BehindCamera: if the camera-frame depth is not positive.
    """
    u, v, d = calib.project(np.asarray(p, dtype=np.float64))
    if not d[0] > 0:
        raise BehindCamera(f"point {tuple(p)} has camera depth {d[0]:.6g}")
    return float(u[0]), float(v[0]), float(d[0])


def frustum_mask(cloud: PointCloud, calib: Calibration, box2: Box2) -> np.ndarray:
    if len(cloud) == 0:
        return np.zeros(0, dtype=bool)
    u, v, d = calib.project(cloud.xyz)
    with np.errstate(invalid="ignore"):
        return (
            (d > 0)
            & (u >= box2.u_min)
            & (u <= box2.u_max)
            & (v >= box2.v_min)
            & (v <= box2.v_max)
        )


def frustum_select(cloud: PointCloud, calib: Calibration, box2: Box2) -> PointCloud:
    """Points in front of the camera whose projection lies inside ``box2`` (inclusive)."""
    return cloud.subset(frustum_mask(cloud, calib, box2))


_LOCAL_CORNERS = np.array(
    [
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, 1],
        [1, -1, 1],
        [1, 1, 1],
        [-1, 1, 1],
    ],
    dtype=np.float64,
)


def corners(b: Box3) -> np.ndarray:
    """The eight corners as an ``(8, 3)`` array in the documented order."""
    local = _LOCAL_CORNERS * np.array([0.5 * b.l, 0.5 * b.w, 0.5 * b.h])
    return b.to_world(local)


def box_from_corners(c: np.ndarray) -> Box3:
    """Inverse of :func:`corners` for yaw-only boxes."""
    c = np.asarray(c, dtype=np.float64).reshape(8, 3)
    center = c.mean(axis=0)
    along = c[1] - c[0]
    across = c[3] - c[0]
    h = float(c[4:, 2].mean() - c[:4, 2].mean())
    return Box3(
        tuple(center),
        h,
        float(np.hypot(along[0], along[1])),
        float(np.hypot(across[0], across[1])),
        math.atan2(along[1], along[0]),
    )


def bev_intersection_area(a: Box3, b: Box3) -> float:
    return kernels.bev_intersection(a.footprint(), b.footprint())


def iou_bev(a: Box3, b: Box3) -> float:
    """Footprint IoU of two boxes."""
    # area of a symmetric operation: order the pair so the result is exactly symmetric
    fa, fb = a.footprint(), b.footprint()
    if tuple(fb) < tuple(fa):
        fa, fb = fb, fa
    inter = kernels.bev_intersection(fa, fb)
    union = a.l * a.w + b.l * b.w - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def vertical_overlap(a: Box3, b: Box3) -> float:
    return max(0.0, min(a.top, b.top) - max(a.bottom, b.bottom))


def iou_3d(a: Box3, b: Box3) -> float:
    """Volume IoU of two yaw-only boxes: footprint overlap times height overlap."""
    dz = vertical_overlap(a, b)
    if dz <= 0.0:
        return 0.0
    fa, fb = a.footprint(), b.footprint()
    if tuple(fb) < tuple(fa):
        fa, fb = fb, fa
    inter = kernels.bev_intersection(fa, fb) * dz
    union = a.volume + b.volume - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def iou_matrix(dets: Sequence[Box3], gts: Sequence[Box3], mode: str = "bev") -> np.ndarray:
    """Pairwise IoU, ``mode`` in ``{"bev", "3d"}``."""
    if len(dets) == 0 or len(gts) == 0:
        return np.zeros((len(dets), len(gts)))
    A = np.stack([d.footprint() for d in dets])
    B = np.stack([g.footprint() for g in gts])
    inter = kernels.bev_intersection_matrix(A, B)
    if mode == "bev":
        area_a = A[:, 2] * A[:, 3]
        area_b = B[:, 2] * B[:, 3]
        union = area_a[:, None] + area_b[None, :] - inter
    elif mode == "3d":
        bot_a = np.array([d.bottom for d in dets])
        top_a = np.array([d.top for d in dets])
        bot_b = np.array([g.bottom for g in gts])
        top_b = np.array([g.top for g in gts])
        dz = np.clip(np.minimum(top_a[:, None], top_b[None, :]) - np.maximum(bot_a[:, None], bot_b[None, :]), 0, None)
        inter = inter * dz
        vol_a = np.array([d.volume for d in dets])
        vol_b = np.array([g.volume for g in gts])
        union = vol_a[:, None] + vol_b[None, :] - inter
    else:
        raise ValueError(f"unknown IoU mode {mode!r}")
    return np.clip(inter / union, 0.0, 1.0)


def in_box_mask(xyz: np.ndarray, b: Box3, eps: float = INSIDE_EPS) -> np.ndarray:
    if len(xyz) == 0:
        return np.zeros(0, dtype=bool)
    loc = b.to_local(xyz)
    return (
        (np.abs(loc[:, 0]) <= 0.5 * b.l + eps)
        & (np.abs(loc[:, 1]) <= 0.5 * b.w + eps)
        & (np.abs(loc[:, 2]) <= 0.5 * b.h + eps)
    )


def points_in_box(cloud: PointCloud, b: Box3) -> PointCloud:
    """Points inside the box, faces inclusive (1e-9 m slack for round-off)."""
    return cloud.subset(in_box_mask(cloud.xyz, b))


@dataclass(frozen=True)
class Detection:
    """A scored 3D box. ``stage`` is one of ``fit``, ``stage1``, ``stage2``."""

    box: Box3
    score: float
    category: str = "Car"
    model: Optional[str] = None
    stage: str = "fit"
    fit_score: Optional[float] = None
