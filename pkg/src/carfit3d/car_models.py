"""Generalised car score maps and proposal scoring.

A score map is an ``(8, 18, 10)`` grid over a car normalised to a unit box,
indexed ``(h, l, w)``: height from the bottom, length from rear to front,
width from the car's right (-w) to left (+w). Shell voxels score +1,
everything else ``-alpha * d`` with ``d`` the Chebyshev voxel distance to the
shell, and the bottom layer scores 0. Shell voxels on the four vertical
facets carry a facet tag so that they can be penalised per proposal when the
facet faces away from the sensor.

Score-map file layout (little-endian)::

    b"CFSM"  u16 version=1  u16 count
    count x { u8 category  u8 reserved  u16 nh  u16 nl  u16 nw  f64 alpha
              f64[nh*nl*nw] grid   u8[nh*nl*nw] shell   i8[nh*nl*nw] facet }

Category codes: 0 SUV, 1 Sedan, 2 Van. Facet codes: 0 none, 1 +l, 2 -l,
3 +w, 4 -w, 5 roof. Arrays are row-major over ``(h, l, w)``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from typing import List, Sequence

import numpy as np
from scipy import ndimage

from . import kernels
from .geometry import Box3, Detection, PointCloud, in_box_mask
from .synth import CATEGORIES, CarCategory, CarProfile, DEFAULT_PROFILES, profile_shell_cloud

GRID = (8, 18, 10)
FACET_NONE, FACET_PL, FACET_NL, FACET_PW, FACET_NW, FACET_ROOF = range(6)
DEFAULT_ALPHA = 0.1
DEFAULT_BETA = 0.5

_MAGIC = b"CFSM"
_VERSION = 1


class EmptyModelCloud(ValueError):
    pass


class NoProposals(ValueError):
    pass


class ScoreMapFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ScoreMap:
    category: CarCategory
    grid: np.ndarray  # float64 (8, 18, 10)
    shell: np.ndarray  # bool
    facets: np.ndarray  # int8 facet codes
    alpha: float = DEFAULT_ALPHA


@dataclass(frozen=True, eq=False)
class VoxelOccupancy:
    counts: np.ndarray  # int (8, 18, 10)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _grid_index(unit: np.ndarray, grid=GRID) -> tuple:
    nh, nl, nw = grid
    il = np.clip(np.floor(unit[:, 0] * nl).astype(np.int64), 0, nl - 1)
    iw = np.clip(np.floor(unit[:, 1] * nw).astype(np.int64), 0, nw - 1)
    ih = np.clip(np.floor(unit[:, 2] * nh).astype(np.int64), 0, nh - 1)
    return ih, il, iw


def build_score_map(shell_cloud, category: CarCategory, alpha: float = DEFAULT_ALPHA, grid=GRID) -> ScoreMap:
    """Build a score map from shell points in unit-box coordinates.

    ``shell_cloud`` is an ``(N, 3)`` array (or :class:`PointCloud`) of
    ``(x, y, z)`` = (length, width, height) fractions in ``[0, 1]``.
    """
    xyz = shell_cloud.xyz if isinstance(shell_cloud, PointCloud) else np.asarray(shell_cloud, dtype=np.float64)
    xyz = xyz.reshape(-1, 3)
    if len(xyz) == 0:
        raise EmptyModelCloud(f"no shell points for {category}")
    nh, nl, nw = grid
    ih, il, iw = _grid_index(xyz, grid)
    shell = np.zeros(grid, dtype=bool)
    shell[ih, il, iw] = True

    # per-point facet: nearest vertical face when within one voxel, else roof
    dist = np.stack([(1 - xyz[:, 0]) * nl, xyz[:, 0] * nl, (1 - xyz[:, 1]) * nw, xyz[:, 1] * nw], axis=1)
    near = dist.argmin(axis=1)
    kind = np.where(dist.min(axis=1) < 1.0, near + FACET_PL, FACET_ROOF)
    votes = np.zeros((*grid, 6), dtype=np.int64)
    np.add.at(votes, (ih, il, iw, kind), 1)
    facets = np.where(shell, votes.argmax(axis=-1), FACET_NONE).astype(np.int8)

    d = ndimage.distance_transform_cdt(~shell, metric="chessboard").astype(np.float64)
    score = np.where(shell, 1.0, -alpha * d)
    score[0] = 0.0
    facets[0] = FACET_NONE
    return ScoreMap(category, score, shell, facets, alpha)


def build_default_maps(profiles=None, alpha: float = DEFAULT_ALPHA, n_points: int = 200_000, seed: int = 0) -> List[ScoreMap]:
    profiles = profiles or DEFAULT_PROFILES
    return [build_score_map(profile_shell_cloud(profiles[c], n_points, seed), c, alpha) for c in CATEGORIES]


def facet_occlusion(box: Box3, view_origin) -> np.ndarray:
    """Which of the world facets ``(+l, -l, +w, -w)`` face away from the viewer."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    normals = np.array([[c, s], [-c, -s], [-s, c], [s, -c]])
    half = np.array([box.l, box.l, box.w, box.w]) * 0.5
    centers = np.asarray(box.center[:2]) + normals * half[:, None]
    to_facet = centers - np.asarray(view_origin, dtype=np.float64)[:2]
    return np.einsum("ij,ij->i", normals, to_facet) >= 0.0


def mask_self_occlusion(smap: ScoreMap, box: Box3, view_origin, beta: float = DEFAULT_BETA, flipped: bool = False) -> ScoreMap:
    """Score map with the shell of self-occluded vertical facets set to ``-beta``.

    With ``flipped`` the map is being compared against a grid reversed in
    ``l`` and ``w``, so map facet ``+l`` sits on the box's ``-l`` side.
    """
    occ = facet_occlusion(box, view_origin)
    if flipped:
        occ = occ[[1, 0, 3, 2]]
    grid = smap.grid.copy()
    for k, code in enumerate((FACET_PL, FACET_NL, FACET_PW, FACET_NW)):
        if occ[k]:
            grid[smap.facets == code] = -beta
    return replace(smap, grid=grid)


def voxelize_to_model_grid(points, box: Box3, grid=GRID) -> VoxelOccupancy:
    """Per-voxel point counts of the in-box points, boundary points clamped."""
    xyz = points.xyz if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64).reshape(-1, 3)
    counts = np.zeros(grid, dtype=np.int64)
    mask = in_box_mask(xyz, box)
    if not mask.any():
        return VoxelOccupancy(counts)
    loc = box.to_local(xyz[mask])
    unit = (loc + 0.5 * np.array([box.l, box.w, box.h])) / np.array([box.l, box.w, box.h])
    ih, il, iw = _grid_index(unit, grid)
    np.add.at(counts, (ih, il, iw), 1)
    return VoxelOccupancy(counts)


def flip_grid(g: np.ndarray) -> np.ndarray:
    """Rotate a ``(h, l, w)`` grid by 180 degrees about its vertical axis."""
    return g[:, ::-1, ::-1]


def _stack(maps: Sequence[ScoreMap]):
    return np.stack([m.grid for m in maps]), np.stack([m.facets for m in maps])


def score_boxes(subset: PointCloud, boxes: Sequence[Box3], maps: Sequence[ScoreMap], view_origin,
                beta: float = DEFAULT_BETA, per_point: bool = False) -> np.ndarray:
    """``(M, K, 2)`` scores of every box against every map, unflipped/flipped."""
    if len(boxes) == 0:
        return np.zeros((0, len(maps), 2))
    grids, tags = _stack(maps)
    arr = np.stack([b.as_array() for b in boxes])
    occ = np.stack([facet_occlusion(b, view_origin) for b in boxes])
    xyz = subset.xyz
    if len(xyz):
        # cull points that cannot fall in any box
        r = 0.5 * np.sqrt(arr[:, 4] ** 2 + arr[:, 5] ** 2) + 1e-6
        lo = np.min(arr[:, :2] - r[:, None], axis=0)
        hi = np.max(arr[:, :2] + r[:, None], axis=0)
        keep = np.all((xyz[:, :2] >= lo) & (xyz[:, :2] <= hi), axis=1)
        xyz = xyz[keep]
    return kernels.score_boxes(xyz, arr, grids, tags, occ, beta, per_point)


def score_box(subset: PointCloud, box: Box3, maps: Sequence[ScoreMap], view_origin,
              beta: float = DEFAULT_BETA, per_point: bool = False) -> tuple:
    """Best ``(score, category, flipped)`` over categories and both orientations.

    Ties go to the earliest category in ``maps`` and to the unflipped grid.
    """
    s = score_boxes(subset, [box], maps, view_origin, beta, per_point)[0]
    k, f = np.unravel_index(int(np.argmax(s)), s.shape)
    return float(s[k, f]), maps[k].category, bool(f)


def fit_best_box(subset: PointCloud, proposals: Sequence[Box3], maps: Sequence[ScoreMap], view_origin,
                 beta: float = DEFAULT_BETA, per_point: bool = False) -> Detection:
    """Highest-scoring proposal; ties resolved by the earliest proposal."""
    if len(proposals) == 0:
        raise NoProposals("no proposals to fit")
    s = score_boxes(subset, proposals, maps, view_origin, beta, per_point)
    flat = s.reshape(len(proposals), -1)
    best = flat.max(axis=1)
    i = int(np.argmax(best))
    j = int(np.argmax(flat[i]))
    k, f = divmod(j, 2)
    box = proposals[i]
    if f:
        box = box.replace(yaw=box.yaw + math.pi)
    return Detection(box, float(best[i]), "Car", maps[k].category.value, "fit", float(best[i]))


# -- serialization -----------------------------------------------------------

_CODES = {c: i for i, c in enumerate(CATEGORIES)}


def dump_score_maps(maps: Sequence[ScoreMap]) -> bytes:
    out = [_MAGIC, struct.pack("<HH", _VERSION, len(maps))]
    for m in maps:
        nh, nl, nw = m.grid.shape
        out.append(struct.pack("<BBHHHd", _CODES[m.category], 0, nh, nl, nw, m.alpha))
        out.append(np.ascontiguousarray(m.grid, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(m.shell, dtype=np.uint8).tobytes())
        out.append(np.ascontiguousarray(m.facets, dtype=np.int8).tobytes())
    return b"".join(out)


def load_score_maps_bytes(data: bytes) -> List[ScoreMap]:
    if data[:4] != _MAGIC:
        raise ScoreMapFormatError("bad magic")
    version, count = struct.unpack_from("<HH", data, 4)
    if version != _VERSION:
        raise ScoreMapFormatError(f"unsupported version {version}")
    off = 8
    maps = []
    head = struct.calcsize("<BBHHHd")
    for _ in range(count):
        if off + head > len(data):
            raise ScoreMapFormatError("truncated header")
        code, _, nh, nl, nw, alpha = struct.unpack_from("<BBHHHd", data, off)
        off += head
        n = nh * nl * nw
        if off + 10 * n > len(data):
            raise ScoreMapFormatError("truncated payload")
        grid = np.frombuffer(data, "<f8", n, off).reshape(nh, nl, nw).astype(np.float64)
        off += 8 * n
        shell = np.frombuffer(data, np.uint8, n, off).reshape(nh, nl, nw).astype(bool)
        off += n
        facets = np.frombuffer(data, np.int8, n, off).reshape(nh, nl, nw).copy()
        off += n
        maps.append(ScoreMap(CATEGORIES[code], grid, shell, facets, alpha))
    return maps


def save_score_maps(path, maps: Sequence[ScoreMap]) -> None:
    with open(path, "wb") as f:
        f.write(dump_score_maps(maps))


def load_score_maps(path) -> List[ScoreMap]:
    with open(path, "rb") as f:
        return load_score_maps_bytes(f.read())
