"""Average (h, l, w) of Car and Van labels in a KITTI label directory.

    python3 scripts/mean_dims.py /path/to/training/label_2 [--split ids.txt]

Prints a ``mean_dims = h l w`` line ready for a pipeline config file.
"""
from __future__ import annotations

import argparse
import os

from carfit3d.kitti_io import load_labels, load_split
from carfit3d.priors import mean_dims_from_labels


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="mean car dimensions from KITTI labels")
    ap.add_argument("label_dir")
    ap.add_argument("--split", help="file of frame ids to restrict to")
    ap.add_argument("--classes", default="Car,Van")
    args = ap.parse_args(argv)
    if args.split:
        names = [f"{i}.txt" for i in load_split(args.split)]
    else:
        names = sorted(n for n in os.listdir(args.label_dir) if n.endswith(".txt"))
    records = [r for n in names for r in load_labels(os.path.join(args.label_dir, n))]
    m = mean_dims_from_labels(records, tuple(args.classes.split(",")))
    print(f"mean_dims = {m.h:.4f} {m.l:.4f} {m.w:.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
