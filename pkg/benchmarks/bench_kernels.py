"""Compare the compiled and NumPy kernel backends on fit-sized workloads.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints per-kernel median wall time for each backend, the speedup, and the
largest absolute difference between the two outputs.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from carfit3d import _kernels_py, kernels
from carfit3d.car_models import build_default_maps, facet_occlusion
from carfit3d.geometry import Box3

try:
    from carfit3d import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def _workload(seed: int = 0):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.uniform(8, 14, 3000), rng.uniform(-3, 3, 3000), rng.uniform(-1.73, 0.3, 3000)])
    boxes = [Box3((rng.uniform(9, 13), rng.uniform(-2, 2), -0.9), 1.6, 4.2, 1.8, rng.uniform(-np.pi, np.pi))
             for _ in range(400)]
    arr = np.stack([b.as_array() for b in boxes])
    occ = np.stack([facet_occlusion(b, (0, 0, 0)) for b in boxes]).astype(np.uint8)
    maps = build_default_maps(n_points=50_000)
    grids = np.stack([m.grid for m in maps])
    tags = np.stack([m.facets for m in maps])
    fps = np.column_stack([arr[:, 0], arr[:, 1], arr[:, 4] * 1.5, arr[:, 5] * 1.5, arr[:, 6]])
    return pts, arr, grids, tags, occ, fps


def _time(fn, repeat):
    out, ts = None, []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        ts.append(time.perf_counter() - t0)
    return statistics.median(ts), out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    pts, arr, grids, tags, occ, fps = _workload()
    cases = {
        "score_boxes (400 boxes x 3000 pts)": lambda impl: kernels.score_boxes(pts, arr, grids, tags, occ, 0.5, impl=impl),
        "min_z_in_footprints (400 x 3000)": lambda impl: kernels.min_z_in_footprints(pts, fps, impl=impl),
        "bev_intersection_matrix (400 x 400)": lambda impl: kernels.bev_intersection_matrix(fps, fps, impl=impl),
    }
    print(f"active backend: {kernels.BACKEND}")
    if _compiled is None:
        print("compiled extension not built; timing the NumPy backend only")
    print(f"{'kernel':<38}{'numpy s':>10}{'cython s':>10}{'speedup':>9}{'max diff':>11}")
    for name, fn in cases.items():
        tp, op = _time(lambda: fn(_kernels_py), args.repeat)
        if _compiled is None:
            print(f"{name:<38}{tp:>10.4f}{'-':>10}{'-':>9}{'-':>11}")
            continue
        tc, oc = _time(lambda: fn(_compiled), args.repeat)
        diff = float(np.max(np.abs(np.where(np.isinf(op), 0, op) - np.where(np.isinf(oc), 0, oc))))
        print(f"{name:<38}{tp:>10.4f}{tc:>10.4f}{tp / tc:>8.1f}x{diff:>11.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
