"""Parametric car surfaces and synthetic LiDAR scenes with exact labels.

A car is the vertical extrusion (across its width) of a side profile: a
polyline of ``(x, z)`` vertices in unit-box coordinates, ``x`` running rear to
front along the length and ``z`` bottom to top. Its surface is made of

* the upper strips swept by each polyline segment (hood, windshield, roof...),
* the front and rear end caps below the first/last vertex,
* the two side panels under the polyline.

Self-occlusion uses the facet-normal test: a facet contributes points only if
its outward normal points toward the viewer.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Box3, Calibration, PointCloud, bev_intersection_area, in_box_mask, wrap_angle
from .kitti_io import LabelRecord, box_to_camera, project_box

IMAGE_SIZE = (1242, 375)
SENSOR_HEIGHT = 1.73


class CarCategory(enum.Enum):
    SUV = "SUV"  # hatchbacks are folded into SUV
    SEDAN = "Sedan"
    VAN = "Van"


CATEGORIES = (CarCategory.SUV, CarCategory.SEDAN, CarCategory.VAN)


class OverlappingBoxes(ValueError):
    pass


@dataclass(frozen=True)
class CarProfile:
    category: CarCategory
    polyline: tuple  # ((x, z), ...) with x strictly increasing from 0 to 1

    def __post_init__(self):
        pts = np.asarray(self.polyline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("polyline must be a sequence of (x, z) pairs")
        if np.any(np.diff(pts[:, 0]) <= 0):
            raise ValueError("polyline x must be strictly increasing")
        if pts[0, 0] != 0.0 or pts[-1, 0] != 1.0:
            raise ValueError("polyline must span x = 0 to x = 1")
        if np.any(pts[:, 1] < 0) or np.any(pts[:, 1] > 1):
            raise ValueError("polyline heights must lie in [0, 1]")
        object.__setattr__(self, "polyline", tuple((float(x), float(z)) for x, z in pts))


DEFAULT_PROFILES = {
    CarCategory.SUV: CarProfile(
        CarCategory.SUV,
        ((0.0, 0.6), (0.08, 0.9), (0.16, 1.0), (0.68, 1.0), (0.8, 0.72), (0.97, 0.64), (1.0, 0.52)),
    ),
    CarCategory.SEDAN: CarProfile(
        CarCategory.SEDAN,
        ((0.0, 0.5), (0.04, 0.66), (0.22, 0.7), (0.36, 1.0), (0.62, 1.0), (0.76, 0.66), (0.97, 0.58), (1.0, 0.45)),
    ),
    CarCategory.VAN: CarProfile(
        CarCategory.VAN,
        ((0.0, 0.95), (0.03, 1.0), (0.82, 1.0), (0.93, 0.72), (1.0, 0.6)),
    ),
}

# facet kinds recorded per emitted point
FACET_SIDE_NEG, FACET_SIDE_POS, FACET_REAR, FACET_FRONT, FACET_TOP = range(5)


@dataclass
class _Facet:
    kind: int
    area: float  # m^2 on the fitted box
    normal: np.ndarray  # outward, box-local metric frame
    center: np.ndarray  # unit coordinates (x, y, z)
    sampler: object  # (rng, n) -> (n, 3) unit coordinates


def _facets(profile: CarProfile, dims: tuple) -> List[_Facet]:
    h, l, w = dims
    poly = np.asarray(profile.polyline)
    out = []
    for (x0, z0), (x1, z1) in zip(poly[:-1], poly[1:]):
        dl, dh = (x1 - x0) * l, (z1 - z0) * h
        seg = math.hypot(dl, dh)
        n = np.array([-dh, 0.0, dl]) / seg

        def top(rng, k, x0=x0, z0=z0, x1=x1, z1=z1):
            t = rng.random(k)
            return np.stack([x0 + t * (x1 - x0), rng.random(k), z0 + t * (z1 - z0)], axis=1)

        out.append(_Facet(FACET_TOP, seg * w, n, np.array([(x0 + x1) / 2, 0.5, (z0 + z1) / 2]), top))

    for kind, xe, ze, sign in ((FACET_REAR, 0.0, poly[0, 1], -1.0), (FACET_FRONT, 1.0, poly[-1, 1], 1.0)):
        if ze <= 0:
            continue

        def cap(rng, k, xe=xe, ze=ze):
            return np.stack([np.full(k, xe), rng.random(k), ze * rng.random(k)], axis=1)

        out.append(_Facet(kind, ze * h * w, np.array([sign, 0.0, 0.0]), np.array([xe, 0.5, ze / 2]), cap))

    xs, zs = poly[:, 0], poly[:, 1]
    seg_area = np.diff(xs) * (zs[:-1] + zs[1:]) / 2
    side_area = float(seg_area.sum()) * l * h
    zmax = float(zs.max())

    def side(rng, k, y):
        pts = np.empty((0, 2))
        while len(pts) < k:
            m = max(2 * (k - len(pts)), 16)
            x = rng.random(m)
            z = zmax * rng.random(m)
            keep = z <= np.interp(x, xs, zs)
            pts = np.concatenate([pts, np.stack([x[keep], z[keep]], axis=1)])
        pts = pts[:k]
        return np.stack([pts[:, 0], np.full(k, y), pts[:, 1]], axis=1)

    cz = float((seg_area * (zs[:-1] + zs[1:]) / 4).sum() / seg_area.sum())
    out.append(_Facet(FACET_SIDE_NEG, side_area, np.array([0.0, -1.0, 0.0]), np.array([0.5, 0.0, cz]), lambda r, k: side(r, k, 0.0)))
    out.append(_Facet(FACET_SIDE_POS, side_area, np.array([0.0, 1.0, 0.0]), np.array([0.5, 1.0, cz]), lambda r, k: side(r, k, 1.0)))
    return out


def _unit_to_local(u: np.ndarray, dims: tuple) -> np.ndarray:
    h, l, w = dims
    return (u - 0.5) * np.array([l, w, h])


def sample_car_surface(
    profile: CarProfile,
    box: Box3,
    view_origin,
    density: float,
    seed: int,
    return_facets: bool = False,
):
    """Sample the visible shell of ``profile`` fitted to ``box``.

    Args:
        profile: Side profile of the car.
        box: Box the unit profile is stretched to.
        view_origin: Sensor position; facets whose outward normal points away
            from it are dropped.
        density: Expected points per square meter of visible surface.
        seed: RNG seed; output is a pure function of the arguments.
        return_facets: Also return per-point facet kinds and the world-frame
            outward normal of each point's facet.

    Returns:
        A :class:`PointCloud`, or ``(cloud, kinds, normals)``.
    """
    if not density > 0:
        raise ValueError("density must be positive")
    rng = np.random.default_rng(seed)
    dims = (box.h, box.l, box.w)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    origin = np.asarray(view_origin, dtype=np.float64)
    chunks, kinds, normals = [], [], []
    for f in _facets(profile, dims):
        k = int(rng.poisson(f.area * density))
        n_world = rot @ f.normal
        center = box.to_world(_unit_to_local(f.center, dims))[0]
        if np.dot(n_world, origin - center) <= 0.0 or k == 0:
            continue
        local = _unit_to_local(f.sampler(rng, k), dims)
        chunks.append(box.to_world(local))
        kinds.append(np.full(k, f.kind))
        normals.append(np.tile(n_world, (k, 1)))
    xyz = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    cloud = PointCloud(xyz, np.full(len(xyz), 0.5))
    if return_facets:
        return (
            cloud,
            np.concatenate(kinds) if kinds else np.zeros(0, dtype=int),
            np.concatenate(normals) if normals else np.zeros((0, 3)),
        )
    return cloud


def profile_shell_cloud(profile: CarProfile, n_points: int = 200_000, seed: int = 0) -> np.ndarray:
    """Dense, occlusion-free shell in unit coordinates ``(x, y, z)``.

    Points are spread evenly per unit area of a cube-shaped car so every
    facet is covered regardless of the car's metric proportions.
    """
    rng = np.random.default_rng(seed)
    facets = _facets(profile, (1.0, 1.0, 1.0))
    total = sum(f.area for f in facets)
    return np.concatenate([f.sampler(rng, max(1, int(n_points * f.area / total))) for f in facets])


@dataclass(frozen=True)
class Wall:
    """Vertical clutter plane between two ground points (LiDAR frame)."""

    start: tuple
    end: tuple
    height: float = 2.5


@dataclass(frozen=True)
class SceneSpec:
    cars: tuple  # ((Box3, CarCategory), ...)
    sensor_origin: tuple = (0.0, 0.0, 0.0)
    ground_z: float = -SENSOR_HEIGHT
    clutter_density: float = 0.0  # points per m^2 of the clutter disk
    seed: int = 0
    ground_density: float = 1.0
    car_density: float = 30.0
    radius: float = 45.0
    clutter_height: float = 2.5
    walls: tuple = ()
    wall_density: float = 3.0

    def __post_init__(self):
        if self.clutter_density < 0 or self.ground_density < 0 or self.wall_density < 0:
            raise ValueError("densities must be non-negative")
        if self.car_density <= 0:
            raise ValueError("car density must be positive")


def synthetic_calibration() -> Calibration:
    """Pinhole camera with KITTI-like intrinsics, co-located with the LiDAR."""
    P2 = np.array([[721.5377, 0.0, 609.5593, 0.0], [0.0, 721.5377, 172.854, 0.0], [0.0, 0.0, 1.0, 0.0]])
    Tr = np.array([[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, -0.08], [1.0, 0.0, 0.0, -0.27]])
    return Calibration(P2, Tr, np.eye(3))


def _disk(rng, center, radius, density):
    n = int(rng.poisson(density * math.pi * radius**2))
    r = radius * np.sqrt(rng.random(n))
    t = 2 * math.pi * rng.random(n)
    return np.stack([center[0] + r * np.cos(t), center[1] + r * np.sin(t)], axis=1)


def _footprint_mask(xy: np.ndarray, box: Box3, margin: float = 0.0) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    d = xy - np.asarray(box.center[:2])
    u = c * d[:, 0] + s * d[:, 1]
    v = -s * d[:, 0] + c * d[:, 1]
    return (np.abs(u) <= 0.5 * box.l + margin) & (np.abs(v) <= 0.5 * box.w + margin)


def make_label(box: Box3, calib: Calibration, image_size=IMAGE_SIZE, cls: str = "Car", occlusion: int = 0) -> LabelRecord:
    from .geometry import Box2

    loc, ry = box_to_camera(box, calib)
    box2, trunc = project_box(box, calib, image_size)
    if box2 is None:
        box2, trunc = Box2(0.0, 0.0, 1.0, 1.0), 1.0
    alpha = wrap_angle(ry - math.atan2(loc[0], loc[2]))
    return LabelRecord(cls, round(trunc, 6), occlusion, alpha, box2, (box.h, box.l, box.w), loc, ry)


def make_scene(spec: SceneSpec, calib: Optional[Calibration] = None, image_size=IMAGE_SIZE,
               profiles=None) -> Tuple[PointCloud, List[LabelRecord]]:
    """Render a scene: car shells, ground disk, clutter and walls, plus labels.

    Raises:
        OverlappingBoxes: if two car footprints intersect.
    """
    calib = calib or synthetic_calibration()
    profiles = profiles or DEFAULT_PROFILES
    boxes = [b for b, _ in spec.cars]
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if bev_intersection_area(boxes[i], boxes[j]) > 0.0:
                raise OverlappingBoxes(f"cars {i} and {j} overlap")
    seeds = np.random.SeedSequence(spec.seed).spawn(len(boxes) + 3)
    origin = np.asarray(spec.sensor_origin, dtype=np.float64)
    parts = []
    for k, (box, cat) in enumerate(spec.cars):
        sub = int(seeds[k].generate_state(1)[0])
        parts.append(sample_car_surface(profiles[cat], box, origin, spec.car_density, sub).xyz)

    rng = np.random.default_rng(seeds[-3])
    g = _disk(rng, origin, spec.radius, spec.ground_density)
    keep = np.ones(len(g), dtype=bool)
    for b in boxes:
        keep &= ~_footprint_mask(g, b)
    ground = np.column_stack([g[keep], np.full(keep.sum(), spec.ground_z)])

    rng = np.random.default_rng(seeds[-2])
    cxy = _disk(rng, origin, spec.radius, spec.clutter_density)
    clutter = np.column_stack([cxy, spec.ground_z + spec.clutter_height * rng.random(len(cxy))])

    rng = np.random.default_rng(seeds[-1])
    walls = []
    for wall in spec.walls:
        a, b = np.asarray(wall.start, float), np.asarray(wall.end, float)
        n = int(rng.poisson(spec.wall_density * np.linalg.norm(b - a) * wall.height))
        t = rng.random(n)
        xy = a + t[:, None] * (b - a)
        walls.append(np.column_stack([xy, spec.ground_z + wall.height * rng.random(n)]))
    distract = np.concatenate([clutter, *walls]) if walls else clutter
    if len(distract):
        keep = np.ones(len(distract), dtype=bool)
        for box in boxes:
            keep &= ~_footprint_mask(distract[:, :2], box, margin=0.3)
        distract = distract[keep]

    xyz = np.concatenate([*parts, ground, distract]) if parts else np.concatenate([ground, distract])
    cloud = PointCloud(xyz, np.full(len(xyz), 0.5))
    labels = [make_label(b, calib, image_size) for b in boxes]
    return cloud, labels


CATEGORY_MEAN_DIMS = {
    CarCategory.SUV: (1.70, 4.40, 1.85),
    CarCategory.SEDAN: (1.48, 4.60, 1.80),
    CarCategory.VAN: (2.05, 5.00, 1.95),
}


def random_scene_spec(seed: int, min_cars: int = 1, max_cars: int = 3, clutter_density: float = 0.03,
                      wall_prob: float = 0.5, min_range: float = 6.0, max_range: float = 32.0,
                      half_fov_deg: float = 28.0, **kw) -> SceneSpec:
    """A random but reproducible scene with non-overlapping cars in camera view."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(min_cars, max_cars + 1))
    cars = []
    attempts = 0
    while len(cars) < n and attempts < 500:
        attempts += 1
        cat = CATEGORIES[int(rng.integers(0, 3))]
        mh, ml, mw = CATEGORY_MEAN_DIMS[cat]
        h, l, w = (d * math.exp(rng.normal(0.0, 0.05)) for d in (mh, ml, mw))
        r = rng.uniform(min_range, max_range)
        az = math.radians(rng.uniform(-half_fov_deg, half_fov_deg))
        box = Box3((r * math.cos(az), r * math.sin(az), -SENSOR_HEIGHT + h / 2), h, l, w, rng.uniform(-math.pi, math.pi))
        grown = box.replace(l=box.l + 1.0, w=box.w + 1.0)
        if any(bev_intersection_area(grown, b) > 0.0 for b, _ in cars):
            continue
        cars.append((box, cat))
    walls = []
    if rng.random() < wall_prob:
        x = rng.uniform(10.0, 40.0)
        side = 1.0 if rng.random() < 0.5 else -1.0
        y = side * rng.uniform(8.0, 14.0)
        walls.append(Wall((x - 10.0, y), (x + 10.0, y)))
    return SceneSpec(tuple(cars), clutter_density=clutter_density, seed=seed, walls=tuple(walls), **kw)
