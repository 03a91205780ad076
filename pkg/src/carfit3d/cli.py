"""``carfit3d`` command line: synth, build-maps, fit, train, eval.

Exit codes: 0 success, 2 config or parse error, 3 I/O error, 4 evaluation error.
"""
from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import kitti_io
from .car_models import ScoreMapFormatError, build_default_maps, load_score_maps, save_score_maps
from .config import ConfigError, apply_overrides, load_config
from .geometry import Calibration, PointCloud
from .kitti_io import KittiFormatError
from .pipeline import PipelineSettings, oracle_detections, run_scene
from .priors import MeanDims
from .proposals import ProposalConfig
from .refine_net.network import ParamsFormatError, RefineNet
from .synth import IMAGE_SIZE, OverlappingBoxes, make_scene, random_scene_spec, synthetic_calibration

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_EVAL = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _err(msg: str) -> None:
    print(f"carfit3d: {msg}", file=sys.stderr)


# -- dataset access ------------------------------------------------------------

@dataclass
class Frame:
    frame_id: str
    cloud: PointCloud
    calib: Calibration
    labels: Optional[list]
    dets2d: Optional[list]


def _path(root, sub, fid, ext):
    return os.path.join(root, sub, f"{fid}{ext}")


def load_frame(root: str, fid: str, det_dir: Optional[str] = None, need_labels: bool = False) -> Frame:
    cloud = kitti_io.load_velodyne(_path(root, "velodyne", fid, ".bin"))
    calib = kitti_io.load_calib(_path(root, "calib", fid, ".txt"))
    lp = _path(root, "label_2", fid, ".txt")
    labels = kitti_io.load_labels(lp) if (need_labels or os.path.exists(lp)) else None
    dp = os.path.join(det_dir or os.path.join(root, "det2d"), f"{fid}.txt")
    dets = kitti_io.load_detections(dp) if os.path.exists(dp) else None
    return Frame(fid, cloud, calib, labels, dets)


def frame_list(cfg) -> List[str]:
    root = cfg["data_root"]
    if root is None:
        raise CliError(EXIT_CONFIG, "data_root is not set")
    try:
        return kitti_io.load_split(cfg["split"]) if cfg["split"] else kitti_io.frame_ids(root)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot list frames: {exc}") from None


def _config(args, overrides: dict):
    try:
        cfg = load_config(args.config)
        return apply_overrides(cfg, overrides)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"config: {exc}") from None


def _load_net(path: Optional[str], stage: int) -> Optional[RefineNet]:
    if not path:
        return None
    try:
        net = RefineNet.load(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"stage {stage} params: {exc}") from None
    except ParamsFormatError as exc:
        raise CliError(EXIT_CONFIG, f"stage {stage} params: {exc}") from None
    if net.cfg.stage != stage:
        raise CliError(EXIT_CONFIG, f"{path} holds stage {net.cfg.stage} params, expected stage {stage}")
    return net


def _load_maps(cfg):
    if not cfg["maps"]:
        return build_default_maps(alpha=cfg["alpha"])
    try:
        return load_score_maps(cfg["maps"])
    except OSError as exc:
        raise CliError(EXIT_IO, f"maps: {exc}") from None
    except ScoreMapFormatError as exc:
        raise CliError(EXIT_CONFIG, f"maps: {exc}") from None


def settings_from(cfg) -> PipelineSettings:
    try:
        prop = ProposalConfig(cfg["proposal.iterations"], cfg["proposal.inlier_threshold"],
                              cfg["proposal.max_seed_points"], cfg["proposal.seed_cube_factor"],
                              cfg["proposal.ground_expand_factor"], cfg["seed"])
        return PipelineSettings(prop, cfg["beta"], cfg["score_per_point"], min_points=cfg["min_points"],
                                stop_after=cfg["stop_after"])
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"config: {exc}") from None


def _mean_dims(cfg) -> MeanDims:
    try:
        return MeanDims(*cfg["mean_dims"])
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"mean_dims: {exc}") from None


# -- synth -----------------------------------------------------------------------

SYNTH_KEYS = {"scenes": int, "seed": int, "min_cars": int, "max_cars": int, "clutter_density": float,
              "wall_prob": float, "dim_noise": float, "first_id": int}


def parse_synth_spec(text: str) -> dict:
    spec = {"scenes": 10, "seed": 0, "min_cars": 1, "max_cars": 3, "clutter_density": 0.03,
            "wall_prob": 0.5, "dim_noise": 0.0, "first_id": 0}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = (p.strip() for p in line.split("=", 1))
        if k not in SYNTH_KEYS:
            raise ConfigError(f"line {n}: unknown key {k!r}")
        try:
            spec[k] = SYNTH_KEYS[k](v)
        except ValueError:
            raise ConfigError(f"line {n}: bad value for {k}") from None
    if spec["scenes"] < 0 or not 1 <= spec["min_cars"] <= spec["max_cars"]:
        raise ConfigError("need scenes >= 0 and 1 <= min_cars <= max_cars")
    return spec


def synth_dataset(out: str, scenes: int, seed: int = 0, min_cars: int = 1, max_cars: int = 3,
                  clutter_density: float = 0.03, wall_prob: float = 0.5, dim_noise: float = 0.0,
                  first_id: int = 0) -> List[str]:
    """Write a KITTI-layout synthetic dataset; returns the frame ids."""
    for sub in ("velodyne", "calib", "label_2", "det2d", "ImageSets"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)
    calib = synthetic_calibration()
    ids = []
    for k in range(scenes):
        fid = f"{first_id + k:06d}"
        scene_seed = int(np.random.SeedSequence([seed, k]).generate_state(1)[0])
        spec = random_scene_spec(scene_seed, min_cars, max_cars, clutter_density, wall_prob)
        cloud, labels = make_scene(spec, calib)
        kitti_io.write_velodyne(_path(out, "velodyne", fid, ".bin"), cloud)
        kitti_io.write_calib(_path(out, "calib", fid, ".txt"), calib)
        kitti_io.write_labels(_path(out, "label_2", fid, ".txt"), labels)
        kitti_io.write_detections_2d(_path(out, "det2d", fid, ".txt"),
                                     oracle_detections(labels, dim_noise, seed=scene_seed))
        ids.append(fid)
    with open(os.path.join(out, "ImageSets", "all.txt"), "w") as f:
        f.write("".join(i + "\n" for i in ids))
    return ids


def cmd_synth(args) -> int:
    spec = {}
    if args.spec:
        try:
            with open(args.spec, encoding="utf-8") as f:
                spec = parse_synth_spec(f.read())
        except ConfigError as exc:
            raise CliError(EXIT_CONFIG, f"spec: {exc}") from None
        except OSError as exc:
            raise CliError(EXIT_IO, f"spec: {exc}") from None
    else:
        spec = parse_synth_spec("")
    for k in ("scenes", "seed", "dim_noise"):
        v = getattr(args, k)
        if v is not None:
            spec[k] = v
    try:
        ids = synth_dataset(args.out, **spec)
    except OSError as exc:
        raise CliError(EXIT_IO, f"synth: {exc}") from None
    except OverlappingBoxes as exc:
        raise CliError(EXIT_CONFIG, f"synth: {exc}") from None
    print(f"wrote {len(ids)} frames to {args.out}")
    return EXIT_OK


# -- build-maps ------------------------------------------------------------------

def cmd_build_maps(args) -> int:
    maps = build_default_maps(alpha=args.alpha, n_points=args.points, seed=args.seed)
    try:
        save_score_maps(args.out, maps)
    except OSError as exc:
        raise CliError(EXIT_IO, f"build-maps: {exc}") from None
    print(f"wrote {len(maps)} score maps to {args.out}")
    return EXIT_OK


# -- fit ---------------------------------------------------------------------------

_WORKER = {}


def _init_worker(state):
    _WORKER.update(state)


def _fit_frame(fid: str):
    """``(frame_id, SceneResult or None, error or None, exit code)``."""
    s = _WORKER
    try:
        fr = load_frame(s["root"], fid, s["det_dir"], need_labels=s["oracle"])
        if s["oracle"]:
            d2 = oracle_detections(fr.labels, s["dim_noise"], seed=int(np.random.SeedSequence(
                [s["seed"], int(fid) if fid.isdigit() else 0]).generate_state(1)[0]), mean=s["mean"])
        elif fr.dets2d is None:
            return fid, None, f"{fid}: no 2D detections file", EXIT_IO
        else:
            d2 = fr.dets2d
        res = run_scene(fid, fr.cloud, fr.calib, d2, s["maps"], s["settings"], s["stage1"], s["stage2"])
        kitti_io.write_detections(os.path.join(s["out"], f"{fid}.txt"), res.detections, fr.calib, IMAGE_SIZE)
        return fid, res, None, EXIT_OK
    except OSError as exc:
        return fid, None, f"{fid}: {exc}", EXIT_IO
    except (KittiFormatError, ValueError) as exc:
        return fid, None, f"{fid}: {exc}", EXIT_CONFIG


def cmd_fit(args) -> int:
    cfg = _config(args, {"data_root": args.data, "output": args.out, "maps": args.maps,
                         "stage1_params": args.stage1, "stage2_params": args.stage2,
                         "stop_after": args.stop_after, "oracle_2d": True if args.oracle_2d else None,
                         "workers": args.workers, "score_per_point": True if args.score_per_point else None,
                         "seed": args.seed, "detections_dir": args.detections, "split": args.split})
    if not cfg["output"]:
        raise CliError(EXIT_CONFIG, "output is not set")
    settings = settings_from(cfg)
    ids = frame_list(cfg)
    stage1 = _load_net(cfg["stage1_params"], 1) if settings.stop_after != "fit" else None
    stage2 = _load_net(cfg["stage2_params"], 2) if settings.stop_after == "stage2" else None
    try:
        os.makedirs(cfg["output"], exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"output: {exc}") from None
    state = {"root": cfg["data_root"], "det_dir": cfg["detections_dir"], "oracle": cfg["oracle_2d"],
             "dim_noise": cfg["oracle_dim_noise"], "seed": cfg["seed"], "mean": _mean_dims(cfg),
             "maps": _load_maps(cfg), "settings": settings, "stage1": stage1, "stage2": stage2,
             "out": cfg["output"]}
    if cfg["workers"] > 1:
        with ProcessPoolExecutor(cfg["workers"], initializer=_init_worker, initargs=(state,)) as ex:
            results = list(ex.map(_fit_frame, ids))
    else:
        _init_worker(state)
        results = [_fit_frame(fid) for fid in ids]
    code, failed, n_det = EXIT_OK, 0, 0
    for fid, res, err, c in results:
        if err:
            _err(err)
            failed += 1
            code = max(code, c)
        else:
            n_det += len(res.detections)
            for e in res.errors:
                _err(e)
    print(f"{len(ids) - failed}/{len(ids)} frames, {n_det} detections written to {cfg['output']}")
    return code


# -- train -------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .refine_net.training import EmptyDataset, NoPositives, TrainConfig, build_samples, train

    cfg = _config(args, {"data_root": args.data, "train.iterations": args.iterations,
                         "train.batch_size": args.batch_size, "train.learning_rate": args.lr,
                         "train.momentum": args.momentum, "seed": args.seed, "split": args.split})
    ids = frame_list(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"]).spawn(2)[1])
    scenes = []
    for fid in ids:
        try:
            fr = load_frame(cfg["data_root"], fid, need_labels=True)
        except OSError as exc:
            raise CliError(EXIT_IO, f"{fid}: {exc}") from None
        except KittiFormatError as exc:
            raise CliError(EXIT_CONFIG, f"{fid}: {exc}") from None
        gts = [kitti_io.record_to_box(r, fr.calib) for r in fr.labels if r.cls == "Car"]
        scenes.append((fr.cloud, gts))
    samples = build_samples(scenes, args.stage, rng, cfg["train.jitter_per_gt"], cfg["train.background_per_frame"])
    try:
        tcfg = TrainConfig(args.stage, cfg["train.iterations"], cfg["train.batch_size"],
                           cfg["train.positive_fraction"], cfg["train.learning_rate"], cfg["train.momentum"],
                           cfg["train.reg_weight"], cfg["seed"], tuple(cfg["train.widths"]),
                           cfg["train.fc_hidden"], cfg["train.log_every"])
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"config: {exc}") from None
    log = open(args.log, "w") if args.log else None
    try:
        sink = (lambda line: print(line, file=log, flush=True)) if log else (lambda line: print(line, flush=True))
        net = train(samples, tcfg, sink)
    except (EmptyDataset, NoPositives) as exc:
        raise CliError(EXIT_CONFIG, f"train: {exc}") from None
    finally:
        if log:
            log.close()
    try:
        net.save(args.out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"train: {exc}") from None
    print(f"stage {args.stage}: {len(samples)} samples, params written to {args.out}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------------

def cmd_eval(args) -> int:
    from .evalkit import Frame as EvalFrame, NoGroundTruth, evaluate, ground_truth_from_labels

    cfg = _config(args, {"data_root": args.data, "output": args.dets, "split": args.split})
    if not cfg["output"]:
        raise CliError(EXIT_CONFIG, "detections directory (output) is not set")
    if args.points is not None:
        cfg["eval.points"] = args.points
    ids = frame_list(cfg)
    frames = []
    for fid in ids:
        try:
            calib = kitti_io.load_calib(_path(cfg["data_root"], "calib", fid, ".txt"))
            labels = kitti_io.load_labels(_path(cfg["data_root"], "label_2", fid, ".txt"))
            dp = os.path.join(cfg["output"], f"{fid}.txt")
            dets = kitti_io.load_result_detections(dp, calib) if os.path.exists(dp) else []
        except OSError as exc:
            raise CliError(EXIT_IO, f"{fid}: {exc}") from None
        except KittiFormatError as exc:
            raise CliError(EXIT_CONFIG, f"{fid}: {exc}") from None
        dets = [d for d in dets if d.category == cfg["eval.class"]]
        frames.append(EvalFrame(dets, ground_truth_from_labels(labels, calib, cfg["eval.class"])))
    try:
        rep = evaluate(frames, cfg["eval.thresholds"], cfg["eval.modes"], cfg["eval.points"])
    except (NoGroundTruth, ValueError) as exc:
        raise CliError(EXIT_EVAL, f"eval: {exc}") from None
    if all(np.isnan(v) for v in rep.ap.values()):
        raise CliError(EXIT_EVAL, "eval: no ground truth in any difficulty group")
    table = rep.text_table()
    print(table, end="")
    report_dir = args.report or cfg["output"]
    try:
        os.makedirs(report_dir, exist_ok=True)
        with open(os.path.join(report_dir, "report.txt"), "w") as f:
            f.write(table)
        with open(os.path.join(report_dir, "report.kv"), "w") as f:
            f.write(rep.key_values())
        if args.pr:
            with open(os.path.join(report_dir, "pr.txt"), "w") as f:
                f.write(rep.pr_points())
    except OSError as exc:
        raise CliError(EXIT_IO, f"eval: {exc}") from None
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="carfit3d", description="3D car boxes from 2D detections and LiDAR.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic KITTI-layout dataset")
    s.add_argument("--spec", help="synthesis spec file (key = value)")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--dim-noise", dest="dim_noise", type=float, help="log-space std of det2d dims")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-maps", help="build score maps from the built-in car profiles")
    s.add_argument("--out", required=True)
    s.add_argument("--alpha", type=float, default=0.1)
    s.add_argument("--points", type=int, default=200_000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_build_maps)

    s = sub.add_parser("fit", help="run the detection pipeline and write KITTI result files")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--detections", help="directory of 2D detection files (default DATA/det2d)")
    s.add_argument("--maps")
    s.add_argument("--stage1")
    s.add_argument("--stage2")
    s.add_argument("--stop-after", dest="stop_after", choices=("fit", "stage1", "stage2"))
    s.add_argument("--oracle-2d", dest="oracle_2d", action="store_true")
    s.add_argument("--score-per-point", dest="score_per_point", action="store_true")
    s.add_argument("--workers", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--split", help="file of frame ids (default: every scan under DATA/velodyne)")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("train", help="train a refinement stage")
    s.add_argument("--stage", type=int, choices=(1, 2), required=True)
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--iterations", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--momentum", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--log", help="write progress lines here instead of stdout")
    s.add_argument("--split", help="file of frame ids (default: every scan under DATA/velodyne)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate result files against labels")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--dets")
    s.add_argument("--report", help="report directory (default: the detections directory)")
    s.add_argument("--points", type=int, choices=(11, 40))
    s.add_argument("--pr", action="store_true", help="also write PR-curve points")
    s.add_argument("--split", help="file of frame ids (default: every scan under DATA/velodyne)")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as exc:
        _err(str(exc))
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
