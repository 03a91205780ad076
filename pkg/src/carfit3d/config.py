"""Plain-text ``key = value`` configuration with typed keys and overrides.

Blank lines and ``#`` comments are ignored. List values are
whitespace-separated. Unknown keys are errors so typos surface early.
"""
from __future__ import annotations

from typing import Any, Callable, Dict, Mapping, Optional


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple:
    return tuple(float(t) for t in s.split())


def _ints(s: str) -> tuple:
    return tuple(int(t) for t in s.split())


def _words(s: str) -> tuple:
    return tuple(s.split())


def _opt_str(s: str) -> Optional[str]:
    s = s.strip()
    return s or None


SCHEMA: Dict[str, tuple] = {
    # paths
    "data_root": (_opt_str, None),
    "split": (_opt_str, None),
    "detections_dir": (_opt_str, None),
    "output": (_opt_str, None),
    "maps": (_opt_str, None),
    "stage1_params": (_opt_str, None),
    "stage2_params": (_opt_str, None),
    # pipeline
    "seed": (int, 0),
    "workers": (int, 1),
    "oracle_2d": (_bool, False),
    "oracle_dim_noise": (float, 0.0),
    "stop_after": (str, "stage2"),
    "min_points": (int, 5),
    "score_per_point": (_bool, False),
    "alpha": (float, 0.1),
    "beta": (float, 0.5),
    "mean_dims": (_floats, (1.53, 3.88, 1.63)),
    "proposal.iterations": (int, 50),
    "proposal.inlier_threshold": (float, 0.10),
    "proposal.max_seed_points": (int, 20),
    "proposal.seed_cube_factor": (float, 1.5),
    "proposal.ground_expand_factor": (float, 1.5),
    # evaluation
    "eval.thresholds": (_floats, (0.5, 0.7)),
    "eval.modes": (_words, ("bev", "3d")),
    "eval.points": (int, 11),
    "eval.class": (str, "Car"),
    # training
    "train.iterations": (int, 2000),
    "train.batch_size": (int, 128),
    "train.positive_fraction": (float, 0.5),
    "train.learning_rate": (float, 0.0005),
    "train.momentum": (float, 0.0),
    "train.reg_weight": (float, 1.0),
    "train.widths": (_ints, (32, 64, 128, 128)),
    "train.fc_hidden": (int, 256),
    "train.jitter_per_gt": (int, 15),
    "train.background_per_frame": (int, 8),
    "train.log_every": (int, 10),
}


def defaults() -> Dict[str, Any]:
    return {k: v for k, (_, v) in SCHEMA.items()}


def parse_value(key: str, raw: str) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown key {key!r}")
    conv: Callable = SCHEMA[key][0]
    try:
        return conv(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_config(text: str, base: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
    cfg = dict(base) if base is not None else defaults()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        try:
            cfg[key] = parse_value(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"line {n}: {exc}") from None
    return cfg


def load_config(path: Optional[str]) -> Dict[str, Any]:
    """Defaults overlaid with the file at ``path`` (if any)."""
    if path is None:
        return defaults()
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def apply_overrides(cfg: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Flag values win over file values; ``None`` means the flag was not given."""
    out = dict(cfg)
    for k, v in overrides.items():
        if v is None:
            continue
        if k not in SCHEMA:
            raise ConfigError(f"unknown key {k!r}")
        out[k] = parse_value(k, v) if isinstance(v, str) and SCHEMA[k][0] is not str else v
    return out


def format_config(cfg: Mapping[str, Any]) -> str:
    lines = []
    for k in SCHEMA:
        v = cfg.get(k)
        if v is None:
            v = ""
        elif isinstance(v, tuple):
            v = " ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
