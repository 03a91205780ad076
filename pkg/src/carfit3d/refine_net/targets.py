"""Context boxes, their voxelisation, and the 7-element box regression code.

The context of a box is the box grown by (1.5, 1.5, 1.6) in (h, l, w). Its
contents are normalised anisometrically into a ``24 x 54 x 32`` grid indexed
(h, l, w). In that normalised frame, X runs along the context length
(0..54), Y along the height (0..24) and Z along the width (0..32).

A ground-truth box is encoded relative to the canonical anchor (the base box,
which always lands in the same place of the grid) by seven numbers: the
offsets of its center and of its left-bottom corner, each divided by the
anchor extent on that axis, and the log ratio of its normalised width.

The left-bottom corner is the box's own ``(-l/2, -w/2)`` bottom corner after
reducing the box yaw to within 90 degrees of the context yaw. Because the
normalisation scales X and Z differently, a rotated box becomes a
parallelogram; recovering the yaw from the width term means solving a
quartic in ``tan(yaw offset)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import Box3, PointCloud, in_box_mask, wrap_angle

CONTEXT_SCALE = (1.5, 1.5, 1.6)  # (h, l, w)
CONTEXT_GRID = (24, 54, 32)  # (h, l, w)


class NonPositiveWidth(ValueError):
    pass


class NoValidSolution(ValueError):
    pass


@dataclass(frozen=True)
class ContextBox:
    base: Box3
    expanded: Box3


def expand_context(b: Box3, scale=CONTEXT_SCALE) -> ContextBox:
    sh, sl, sw = scale
    return ContextBox(b, Box3(b.center, b.h * sh, b.l * sl, b.w * sw, b.yaw))


@dataclass(frozen=True, eq=False)
class ContextVoxels:
    grid: np.ndarray  # bool (24, 54, 32)

    @property
    def occupancy(self) -> float:
        return float(self.grid.mean())

    def channels_last(self, dtype=np.float32) -> np.ndarray:
        """``(l, w, h)`` layout used as network input (height as channels)."""
        return np.ascontiguousarray(self.grid.transpose(1, 2, 0), dtype=dtype)


def context_indices(xyz: np.ndarray, ctx: ContextBox, grid=CONTEXT_GRID):
    """Per-point ``(ih, il, iw)`` of the points inside the expanded box."""
    e = ctx.expanded
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    mask = in_box_mask(xyz, e)
    loc = e.to_local(xyz[mask])
    nh, nl, nw = grid
    il = np.clip(np.floor((loc[:, 0] / e.l + 0.5) * nl).astype(np.int64), 0, nl - 1)
    iw = np.clip(np.floor((loc[:, 1] / e.w + 0.5) * nw).astype(np.int64), 0, nw - 1)
    ih = np.clip(np.floor((loc[:, 2] / e.h + 0.5) * nh).astype(np.int64), 0, nh - 1)
    return ih, il, iw


def voxelize_context(cloud, ctx: ContextBox, grid=CONTEXT_GRID) -> ContextVoxels:
    """Binary occupancy of the expanded box, boundary points clamped inward."""
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else cloud
    g = np.zeros(grid, dtype=bool)
    ih, il, iw = context_indices(xyz, ctx, grid)
    g[ih, il, iw] = True
    return ContextVoxels(g)


def sparse_context(cloud, ctx: ContextBox, grid=CONTEXT_GRID) -> np.ndarray:
    """Sorted unique flat indices into the channels-last ``(l, w, h)`` grid."""
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else cloud
    ih, il, iw = context_indices(xyz, ctx, grid)
    nh, nl, nw = grid
    return np.unique((il * nw + iw) * nh + ih).astype(np.int32)


@dataclass(frozen=True)
class CanonicalAnchor:
    """Normalised-frame placement of the base box; identical for every sample."""

    xc: float
    yc: float
    zc: float
    xl: float
    yl: float
    zl: float
    L: float
    H: float
    W: float
    grid: tuple = CONTEXT_GRID

    @classmethod
    def default(cls, grid=CONTEXT_GRID, scale=CONTEXT_SCALE) -> "CanonicalAnchor":
        nh, nl, nw = grid
        sh, sl, sw = scale
        L, H, W = nl / sl, nh / sh, nw / sw
        xc, yc, zc = nl / 2, nh / 2, nw / 2
        return cls(xc, yc, zc, xc - L / 2, yc - H / 2, zc - W / 2, L, H, W, tuple(grid))

    def as_array(self) -> np.ndarray:
        return np.array([self.xc, self.yc, self.zc, self.xl, self.yl, self.zl, self.L, self.H, self.W])


def _scales(ctx: ContextBox, anchor: CanonicalAnchor):
    nh, nl, nw = anchor.grid
    e = ctx.expanded
    return nl / e.l, nh / e.h, nw / e.w


def _half_turn(a: float) -> float:
    """Reduce an angle modulo pi into (-pi/2, pi/2]."""
    a = wrap_angle(a)
    if a > math.pi / 2:
        a -= math.pi
    elif a <= -math.pi / 2:
        a += math.pi
    return a


def encode_targets(anchor: CanonicalAnchor, ctx: ContextBox, gt: Box3) -> np.ndarray:
    """Seven regression targets of ``gt`` relative to the anchor of ``ctx``."""
    sx, sy, sz = _scales(ctx, anchor)
    nh, nl, nw = anchor.grid
    e = ctx.expanded
    d = _half_turn(gt.yaw - e.yaw)
    ul, uw, uz = e.to_local(np.asarray(gt.center))[0]
    c, s = math.cos(d), math.sin(d)
    ml = -0.5 * gt.l * c + 0.5 * gt.w * s
    mw = -0.5 * gt.l * s - 0.5 * gt.w * c
    Xc, Yc, Zc = sx * ul + nl / 2, sy * uz + nh / 2, sz * uw + nw / 2
    Xl, Yl, Zl = sx * (ul + ml) + nl / 2, sy * (uz - 0.5 * gt.h) + nh / 2, sz * (uw + mw) + nw / 2
    Wn = gt.w * math.sqrt((sx * s) ** 2 + (sz * c) ** 2)
    if not Wn > 0:
        raise NonPositiveWidth(f"normalised width {Wn}")
    a = anchor
    return np.array([
        (Xc - a.xc) / a.L,
        (Yc - a.yc) / a.H,
        (Zc - a.zc) / a.W,
        (Xl - a.xl) / a.L,
        (Yl - a.yl) / a.H,
        (Zl - a.zl) / a.W,
        math.log(Wn / a.W),
    ])


def _yaw_candidates(mx: float, mz: float, Wn: float, sx: float, sz: float) -> np.ndarray:
    # 4 (mz - mx t)^2 (sx^2 t^2 + sz^2) = Wn^2 (1 + t^2)^2,  t = tan(yaw offset)
    W2 = Wn * Wn
    coef = np.array([
        4 * mx * mx * sx * sx - W2,
        -8 * mx * mz * sx * sx,
        4 * (mz * mz * sx * sx + mx * mx * sz * sz) - 2 * W2,
        -8 * mx * mz * sz * sz,
        4 * mz * mz * sz * sz - W2,
    ])
    scale = np.abs(coef).max()
    if scale == 0 or not np.isfinite(scale):
        return np.zeros(0)
    coef = coef / scale
    r = np.roots(coef)
    tol = 1e-6 * np.maximum(1.0, np.abs(r))
    t = r[np.abs(r.imag) <= tol].real
    dcoef = np.polyder(coef)
    for _ in range(4):  # Newton polish
        f = np.polyval(coef, t)
        df = np.polyval(dcoef, t)
        ok = df != 0
        t = np.where(ok, t - np.where(ok, f, 0.0) / np.where(ok, df, 1.0), t)
    return np.arctan(t)


def decode_box(anchor: CanonicalAnchor, ctx: ContextBox, delta, min_width: float = 1e-6) -> Box3:
    """Box whose encoding under ``ctx`` is ``delta``.

    Among the quartic's real roots, the ones giving positive dims with the
    corner on the box's (-l, -w) side are kept and the smallest yaw offset
    wins.

    Raises:
        NoValidSolution: when no root gives a valid box.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (7,) or not np.all(np.isfinite(delta)):
        raise NoValidSolution("delta must be 7 finite values")
    a = anchor
    sx, sy, sz = _scales(ctx, anchor)
    nh, nl, nw = anchor.grid
    Xc, Yc, Zc = a.xc + delta[0] * a.L, a.yc + delta[1] * a.H, a.zc + delta[2] * a.W
    Xl, Yl, Zl = a.xl + delta[3] * a.L, a.yl + delta[4] * a.H, a.zl + delta[5] * a.W
    with np.errstate(over="ignore", under="ignore"):
        Wn = a.W * math.exp(delta[6]) if delta[6] < 700 else math.inf
    if not (math.isfinite(Wn) and Wn > 0):
        raise NoValidSolution("width term out of range")
    h = 2.0 * (Yc - Yl) / sy
    if not h > 0:
        raise NoValidSolution("non-positive height")
    ul, uz, uw = (Xc - nl / 2) / sx, (Yc - nh / 2) / sy, (Zc - nw / 2) / sz
    mx, mz = (Xl - Xc) / sx, (Zl - Zc) / sz
    best = None
    for d in _yaw_candidates(mx, mz, Wn, sx, sz):
        c, s = math.cos(d), math.sin(d)
        along = mx * c + mz * s
        across = -mx * s + mz * c
        if not (along < 0 and across < 0):
            continue
        l, w = -2.0 * along, -2.0 * across
        if w < min_width or l < min_width:
            continue
        resid = abs(w * math.sqrt((sx * s) ** 2 + (sz * c) ** 2) - Wn)
        if resid > 1e-9 * max(1.0, Wn):
            continue
        if best is None or abs(d) < abs(best[0]):
            best = (d, l, w)
    if best is None:
        raise NoValidSolution("no root yields a valid box")
    d, l, w = best
    e = ctx.expanded
    center = e.to_world(np.array([[ul, uw, uz]]))[0]
    return Box3(tuple(center), h, l, w, e.yaw + d)
