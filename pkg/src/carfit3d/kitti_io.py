"""Readers and writers for KITTI-format files.

Formats:

* velodyne ``.bin``: packed little-endian float32 ``x y z reflectance`` records.
* calib ``.txt``: ``KEY: v1 v2 ...`` rows; ``P2``, ``R0_rect`` and
  ``Tr_velo_to_cam`` are required.
* label ``.txt``: 15 fields per line (16 with a trailing score)::

      type truncated occluded alpha u1 v1 u2 v2 h w l x y z rotation_y [score]

  Note that the file stores dimensions as ``h w l``; :class:`LabelRecord`
  keeps them as ``(h, l, w)``. ``x y z`` is the bottom-face center in the
  rectified camera frame.
* 2D detections with dimensions, 8 fields per line::

      u_min v_min u_max v_max confidence h l w
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .geometry import Box2, Box3, Calibration, Detection, PointCloud, corners, wrap_angle


class KittiFormatError(ValueError):
    pass


class TruncatedFile(KittiFormatError):
    pass


class MissingKey(KittiFormatError):
    pass


class MalformedNumber(KittiFormatError):
    pass


class FieldCountMismatch(KittiFormatError):
    pass


@dataclass(frozen=True)
class LabelRecord:
    cls: str
    truncation: float
    occlusion: int
    alpha: float
    box2: Box2
    dims: tuple  # (h, l, w)
    location: tuple  # bottom center, rectified camera frame
    rotation_y: float
    score: Optional[float] = None


@dataclass(frozen=True)
class Detection2DInput:
    box2: Box2
    confidence: float
    dims: tuple  # (h, l, w)

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if not all(d > 0 for d in self.dims):
            raise ValueError(f"dims must be positive, got {self.dims}")


def _float(tok: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise MalformedNumber(f"cannot parse {tok!r} as a number") from None
    if not math.isfinite(v):
        raise MalformedNumber(f"non-finite value {tok!r}")
    return v


def _fmt(v: float) -> str:
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


# -- velodyne ---------------------------------------------------------------

def parse_velodyne(data: bytes) -> PointCloud:
    if len(data) % 16:
        raise TruncatedFile(f"{len(data)} bytes is not a multiple of 16")
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    bad = ~np.isfinite(arr).all(axis=1)
    if bad.any():
        arr = arr[~bad]
    return PointCloud(arr[:, :3], np.clip(arr[:, 3], 0.0, 1.0))


def load_velodyne(path) -> PointCloud:
    """Read a KITTI scan. Records with non-finite values are dropped."""
    with open(path, "rb") as f:
        return parse_velodyne(f.read())


def dump_velodyne(cloud: PointCloud) -> bytes:
    arr = np.empty((len(cloud), 4), dtype="<f4")
    arr[:, :3] = cloud.xyz
    arr[:, 3] = cloud.reflectance
    return arr.tobytes()


def write_velodyne(path, cloud: PointCloud) -> None:
    with open(path, "wb") as f:
        f.write(dump_velodyne(cloud))


# -- calibration ------------------------------------------------------------

def parse_calib(text: str) -> Calibration:
    rows = {}
    for line in text.splitlines():
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        rows[key.strip()] = [_float(t) for t in rest.split()]

    def get(key, n):
        if key not in rows:
            raise MissingKey(key)
        if len(rows[key]) != n:
            raise MalformedNumber(f"{key} has {len(rows[key])} values, expected {n}")
        return np.array(rows[key])

    P2 = get("P2", 12).reshape(3, 4)
    R0 = get("R0_rect", 9).reshape(3, 3)
    Tr = get("Tr_velo_to_cam", 12).reshape(3, 4)
    return Calibration(P2, Tr, R0)


def load_calib(path) -> Calibration:
    with open(path) as f:
        return parse_calib(f.read())


def format_calib(calib: Calibration) -> str:
    def row(key, m):
        return key + ": " + " ".join(f"{v:.12e}" for v in np.asarray(m).reshape(-1)) + "\n"

    P = calib.cam_projection
    return (
        row("P0", P)
        + row("P1", P)
        + row("P2", P)
        + row("P3", P)
        + row("R0_rect", calib.rectification)
        + row("Tr_velo_to_cam", calib.lidar_to_cam)
        + row("Tr_imu_to_velo", np.hstack([np.eye(3), np.zeros((3, 1))]))
    )


def write_calib(path, calib: Calibration) -> None:
    with open(path, "w") as f:
        f.write(format_calib(calib))


# -- labels -----------------------------------------------------------------

def parse_label_line(line: str, allow_score: bool = True) -> LabelRecord:
    tok = line.split()
    if len(tok) != 15 and not (allow_score and len(tok) == 16):
        raise FieldCountMismatch(f"expected 15{' or 16' if allow_score else ''} fields, got {len(tok)}")
    v = [_float(t) for t in tok[1:]]
    occ = v[1]
    if occ != int(occ):
        raise MalformedNumber(f"occlusion {tok[2]!r} is not an integer")
    h, w, l = v[7], v[8], v[9]
    return LabelRecord(
        cls=tok[0],
        truncation=v[0],
        occlusion=int(occ),
        alpha=v[2],
        box2=Box2(v[3], v[4], v[5], v[6]),
        dims=(h, l, w),
        location=(v[10], v[11], v[12]),
        rotation_y=v[13],
        score=v[14] if len(v) == 15 else None,
    )


def parse_labels(text: str) -> List[LabelRecord]:
    return [parse_label_line(line) for line in text.splitlines() if line.strip()]


def load_labels(path) -> List[LabelRecord]:
    with open(path) as f:
        return parse_labels(f.read())


def format_label(rec: LabelRecord) -> str:
    h, l, w = rec.dims
    fields = [
        rec.cls,
        _fmt(rec.truncation),
        str(int(rec.occlusion)),
        _fmt(rec.alpha),
        *(_fmt(x) for x in rec.box2.as_tuple()),
        _fmt(h),
        _fmt(w),
        _fmt(l),
        *(_fmt(x) for x in rec.location),
        _fmt(rec.rotation_y),
    ]
    if rec.score is not None:
        fields.append(_fmt(rec.score))
    return " ".join(fields)


def format_labels(records: Sequence[LabelRecord]) -> str:
    return "".join(format_label(r) + "\n" for r in records)


def write_labels(path, records: Sequence[LabelRecord]) -> None:
    with open(path, "w") as f:
        f.write(format_labels(records))


# -- 2D detections with dimensions -------------------------------------------

def parse_detections(text: str) -> List[Detection2DInput]:
    out = []
    for line in text.splitlines():
        tok = line.split()
        if not tok:
            continue
        if len(tok) != 8:
            raise FieldCountMismatch(f"expected 8 fields, got {len(tok)}")
        v = [_float(t) for t in tok]
        out.append(Detection2DInput(Box2(*v[:4]), v[4], (v[5], v[6], v[7])))
    return out


def load_detections(path) -> List[Detection2DInput]:
    with open(path) as f:
        return parse_detections(f.read())


def format_detections_2d(dets: Sequence[Detection2DInput]) -> str:
    return "".join(
        " ".join(_fmt(x) for x in (*d.box2.as_tuple(), d.confidence, *d.dims)) + "\n" for d in dets
    )


def write_detections_2d(path, dets: Sequence[Detection2DInput]) -> None:
    with open(path, "w") as f:
        f.write(format_detections_2d(dets))


# -- conversions between LiDAR boxes and camera-frame records ----------------

def box_to_camera(box: Box3, calib: Calibration) -> tuple:
    """``(location, rotation_y)`` of a LiDAR box in the rectified camera frame."""
    bottom = np.array([box.center[0], box.center[1], box.bottom])
    loc = calib.lidar_to_rect(bottom)[0]
    head = np.array([box.center[0] + math.cos(box.yaw), box.center[1] + math.sin(box.yaw), box.bottom])
    d = calib.lidar_to_rect(head)[0] - loc
    # KITTI: rotation_y = 0 faces camera +x; positive turns toward -z
    ry = -math.atan2(d[2], d[0])
    return tuple(float(x) for x in loc), wrap_angle(ry)


def record_to_box(rec: LabelRecord, calib: Calibration) -> Box3:
    """LiDAR-frame box of a camera-frame label record."""
    h, l, w = rec.dims
    loc = np.asarray(rec.location, dtype=np.float64)
    bottom = calib.rect_to_lidar(loc)[0]
    ry = rec.rotation_y
    head_rect = loc + np.array([math.cos(ry), 0.0, -math.sin(ry)])
    head = calib.rect_to_lidar(head_rect)[0]
    yaw = math.atan2(head[1] - bottom[1], head[0] - bottom[0])
    return Box3((bottom[0], bottom[1], bottom[2] + 0.5 * h), h, l, w, yaw)


def project_box(box: Box3, calib: Calibration, image_size: Optional[tuple] = None) -> tuple:
    """2D bounding box of the projected corners and the truncated fraction.

    Returns ``(Box2 or None, truncation)``; ``None`` when any corner is behind
    the camera. With ``image_size=(width, height)`` the box is clipped.
    """
    u, v, d = calib.project(corners(box))
    if np.any(d <= 0):
        return None, 1.0
    u0, u1, v0, v1 = u.min(), u.max(), v.min(), v.max()
    if image_size is None:
        return Box2(u0, v0, u1, v1), 0.0
    W, H = image_size
    cu0, cu1 = max(u0, 0.0), min(u1, W - 1.0)
    cv0, cv1 = max(v0, 0.0), min(v1, H - 1.0)
    if cu0 >= cu1 or cv0 >= cv1:
        return None, 1.0
    full = (u1 - u0) * (v1 - v0)
    trunc = 1.0 - (cu1 - cu0) * (cv1 - cv0) / full
    return Box2(cu0, cv0, cu1, cv1), float(min(max(trunc, 0.0), 1.0))


def detection_to_record(det: Detection, calib: Calibration, image_size: Optional[tuple] = None) -> LabelRecord:
    loc, ry = box_to_camera(det.box, calib)
    box2, _ = project_box(det.box, calib, image_size)
    if box2 is None:
        box2 = Box2(0.0, 0.0, 1.0, 1.0)
    alpha = wrap_angle(ry - math.atan2(loc[0], loc[2]))
    return LabelRecord(
        cls=det.category,
        truncation=-1.0,
        occlusion=-1,
        alpha=alpha,
        box2=box2,
        dims=(det.box.h, det.box.l, det.box.w),
        location=loc,
        rotation_y=ry,
        score=float(det.score),
    )


def write_detections(path, detections: Sequence[Detection], calib: Calibration, image_size: Optional[tuple] = None) -> None:
    """Write 3D detections in the KITTI result layout (16 fields)."""
    write_labels(path, [detection_to_record(d, calib, image_size) for d in detections])


def load_result_detections(path, calib: Calibration) -> List[Detection]:
    out = []
    for rec in load_labels(path):
        out.append(Detection(record_to_box(rec, calib), rec.score if rec.score is not None else 1.0, rec.cls))
    return out


def load_split(path) -> List[str]:
    """Frame ids, one per line (external train/val index list)."""
    with open(path) as f:
        return [line.strip() for line in f if line.strip()]


def frame_ids(root) -> List[str]:
    vdir = os.path.join(root, "velodyne")
    return sorted(os.path.splitext(n)[0] for n in os.listdir(vdir) if n.endswith(".bin"))
