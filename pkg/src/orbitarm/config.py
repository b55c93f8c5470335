"""Run configuration: a YAML document with a fixed schema.

Unknown keys anywhere are rejected with the dotted path of the offending
field.  Every default equals the reference hyperparameter tables; the
``default_config_text`` output is what ``orbitarm train --print-config``
echoes.

Schema::

    model_file: null | path        # null selects the bundled model
    seed: int                      # master seed
    output_dir: path               # run root (ORBITARM_OUTPUT_ROOT overrides)
    train:   {TrainConfig fields}
    rewards: {RewardConfig fields}
    eval:    {episodes, thresholds: [pos, ori, att], relaxed_thresholds}
    robustness: {episodes, seeds: [...], grids: {scenario: "a:b:c" | [values]}}
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .env import RewardConfig
from .errors import ConfigError
from .eval import RELAXED, SCENARIOS, THRESHOLDS
from .trainer import TrainConfig

OUTPUT_ENV = "ORBITARM_OUTPUT_ROOT"

DEFAULT_GRIDS = {
    "spin": "0:0.05:0.20",
    "base-impulse": "0:2.5:10",
    "obs-delay": "0:0.1:0.5",
    "act-delay": "0:0.1:0.5",
    "eff-base": "0:0.1:0.5",
    "eff-manip": "0:0.1:0.5",
    "momentum-sat": "0:0.25:1.0",
    "base-mass": "-0.5:0.25:0.5",
    "obs-bias-pos": "0:0.03:0.12",
    "obs-bias-ori": "0:0.1:0.4",
}


def parse_grid(spec):
    """``"a:b:c"`` (inclusive range with step ``b``), ``"x,y,z"`` or a list."""
    if isinstance(spec, (list, tuple)):
        vals = [float(v) for v in spec]
    else:
        text = str(spec).strip()
        if not text:
            raise ConfigError("grid", "empty grid")
        if ":" in text:
            parts = text.split(":")
            if len(parts) != 3:
                raise ConfigError("grid", f"expected start:step:stop, got {text!r}")
            try:
                a, b, c = (float(p) for p in parts)
            except ValueError as exc:
                raise ConfigError("grid", f"non-numeric grid {text!r}") from exc
            if b <= 0 or c < a:
                raise ConfigError("grid", f"need step > 0 and stop >= start in {text!r}")
            n = int(np.floor((c - a) / b + 1e-9)) + 1
            vals = [round(a + i * b, 12) for i in range(n)]
        else:
            try:
                vals = [float(v) for v in text.split(",") if v.strip()]
            except ValueError as exc:
                raise ConfigError("grid", f"non-numeric grid {text!r}") from exc
    if not vals:
        raise ConfigError("grid", "empty grid")
    return vals


@dataclass(frozen=True)
class EvalSettings:
    episodes: int = 1000
    thresholds: tuple = THRESHOLDS
    relaxed_thresholds: tuple = RELAXED


@dataclass(frozen=True)
class RobustnessSettings:
    episodes: int = 200
    seeds: tuple = (0, 1, 2)
    grids: dict = field(default_factory=lambda: dict(DEFAULT_GRIDS))


@dataclass(frozen=True)
class RunConfig:
    model_file: str = None
    seed: int = 0
    output_dir: str = "runs"
    train: TrainConfig = TrainConfig()
    rewards: RewardConfig = RewardConfig()
    eval: EvalSettings = EvalSettings()
    robustness: RobustnessSettings = RobustnessSettings()

    def output_root(self):
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)

    def to_dict(self):
        d = asdict(self)
        d["eval"]["thresholds"] = list(self.eval.thresholds)
        d["eval"]["relaxed_thresholds"] = list(self.eval.relaxed_thresholds)
        d["robustness"]["seeds"] = list(self.robustness.seeds)
        return d

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    def digest(self):
        return hashlib.sha256(self.to_yaml().encode("utf-8")).hexdigest()


def _build(cls, data, path):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(path, "expected a mapping")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, val in data.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in known:
            raise ConfigError(where, "unknown key")
        default = getattr(cls(), key) if key not in ("grids",) else None
        if isinstance(default, bool):
            if not isinstance(val, bool):
                raise ConfigError(where, "expected true/false")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(val, bool) or not isinstance(val, int):
                if isinstance(val, float) and float(val).is_integer():
                    val = int(val)
                else:
                    raise ConfigError(where, "expected an integer")
        elif isinstance(default, float):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(where, "expected a number")
            val = float(val)
        elif isinstance(default, tuple):
            if not isinstance(val, (list, tuple)):
                raise ConfigError(where, "expected a list")
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}.{exc.field}" if path else exc.field, str(exc).split(": ", 1)[-1]) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(path or "config", str(exc)) from None


def config_from_dict(doc) -> RunConfig:
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be a mapping")
    allowed = {f.name for f in fields(RunConfig)}
    for key in doc:
        if key not in allowed:
            raise ConfigError(str(key), "unknown key")
    rob = doc.get("robustness") or {}
    grids = dict(DEFAULT_GRIDS)
    if isinstance(rob, dict) and "grids" in rob:
        if not isinstance(rob["grids"], dict):
            raise ConfigError("robustness.grids", "expected a mapping")
        for name, g in rob["grids"].items():
            if name not in SCENARIOS:
                raise ConfigError(f"robustness.grids.{name}", "unknown scenario")
            parse_grid(g)
            grids[name] = g
        rob = {k: v for k, v in rob.items() if k != "grids"}
    robustness = replace(_build(RobustnessSettings, rob, "robustness"), grids=grids)
    cfg = RunConfig(
        model_file=doc.get("model_file"),
        seed=int(doc.get("seed", 0)),
        output_dir=str(doc.get("output_dir", "runs")),
        train=_build(TrainConfig, doc.get("train"), "train"),
        rewards=_build(RewardConfig, doc.get("rewards"), "rewards"),
        eval=_build(EvalSettings, doc.get("eval"), "eval"),
        robustness=robustness,
    )
    if cfg.model_file is not None and not Path(cfg.model_file).is_file():
        raise ConfigError("model_file", f"{cfg.model_file} does not exist")
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"invalid YAML: {exc}") from exc
    return config_from_dict(doc)


def default_config_text():
    return RunConfig().to_yaml()
