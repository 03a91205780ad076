"""NumPy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_kernels`` module. Used when
the extension is not built, or when ``CARFIT3D_PURE_PYTHON=1``.
"""
import numpy as np

INSIDE_EPS = 1e-9
AREA_EPS = 1e-12


def _rect(cx, cy, l, w, yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    hl, hw = 0.5 * l, 0.5 * w
    local = ((-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw))
    return [(cx + c * x - s * y, cy + s * x + c * y) for x, y in local]


def _clip(poly, a, b):
    ax, ay = a
    bx, by = b
    out = []
    n = len(poly)
    for i in range(n):
        px, py = poly[i]
        qx, qy = poly[(i + 1) % n]
        sc = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        sd = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
        if sc >= 0.0:
            out.append((px, py))
            if sd < 0.0:
                t = sc / (sc - sd)
                out.append((px + t * (qx - px), py + t * (qy - py)))
        elif sd >= 0.0:
            t = sc / (sc - sd)
            out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def bev_intersection(a, b):
    """Intersection area of two footprints given as ``[cx, cy, l, w, yaw]``."""
    poly = _rect(*a)
    clip = _rect(*b)
    for k in range(4):
        poly = _clip(poly, clip[k], clip[(k + 1) % 4])
        if not poly:
            return 0.0
    area = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        area += x0 * y1 - x1 * y0
    area = 0.5 * abs(area)
    return 0.0 if area < AREA_EPS else area


def bev_intersection_matrix(A, B):
    out = np.zeros((len(A), len(B)), dtype=np.float64)
    for i, a in enumerate(A):
        for j, b in enumerate(B):
            out[i, j] = bev_intersection(a, b)
    return out


def min_z_in_footprints(pts, fps):
    out = np.full(len(fps), np.inf)
    if len(pts) == 0:
        return out
    for k, (cx, cy, l, w, yaw) in enumerate(fps):
        c, s = np.cos(yaw), np.sin(yaw)
        dx = pts[:, 0] - cx
        dy = pts[:, 1] - cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        inside = (np.abs(u) <= 0.5 * l + INSIDE_EPS) & (np.abs(v) <= 0.5 * w + INSIDE_EPS)
        if inside.any():
            out[k] = pts[inside, 2].min()
    return out


def _bins(off, extent, n):
    idx = np.floor(off / extent * n).astype(np.int64)
    return np.clip(idx, 0, n - 1)


def score_boxes(pts, boxes, maps, tags, occluded, beta, per_point):
    kk, nh, nl, nw = maps.shape
    out = np.zeros((len(boxes), kk, 2))
    flat_maps = maps.reshape(kk, -1)
    flat_maps_flip = maps[:, :, ::-1, ::-1].reshape(kk, -1)
    flat_tags = tags.reshape(kk, -1).astype(np.int64)
    flat_tags_flip = tags[:, :, ::-1, ::-1].reshape(kk, -1).astype(np.int64)
    swap = np.array([1, 0, 3, 2])
    for b, (cx, cy, cz, h, l, w, yaw) in enumerate(boxes):
        c, s = np.cos(yaw), np.sin(yaw)
        dz = pts[:, 2] - cz
        dx = pts[:, 0] - cx
        dy = pts[:, 1] - cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        inside = (
            (np.abs(dz) <= 0.5 * h + INSIDE_EPS)
            & (np.abs(u) <= 0.5 * l + INSIDE_EPS)
            & (np.abs(v) <= 0.5 * w + INSIDE_EPS)
        )
        if not inside.any():
            continue
        ih = _bins(dz[inside] + 0.5 * h, h, nh)
        il = _bins(u[inside] + 0.5 * l, l, nl)
        iw = _bins(v[inside] + 0.5 * w, w, nw)
        flat = (ih * nl + il) * nw + iw
        counts = np.bincount(flat, minlength=nh * nl * nw)
        occ = np.nonzero(counts)[0]
        weight = counts[occ].astype(np.float64) if per_point else np.ones(len(occ))
        for flip, (fm, ft) in enumerate(((flat_maps, flat_tags), (flat_maps_flip, flat_tags_flip))):
            facet_occ = occluded[b][swap] if flip else occluded[b]
            for k in range(kk):
                val = fm[k, occ].copy()
                tag = ft[k, occ]
                vertical = (tag >= 1) & (tag <= 4)
                masked = np.zeros(len(occ), dtype=bool)
                masked[vertical] = facet_occ[tag[vertical] - 1].astype(bool)
                val[masked] = -beta
                out[b, k, flip] = float(np.dot(weight, val))
    return out
