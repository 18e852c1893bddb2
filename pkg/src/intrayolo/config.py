"""Run configuration: one INI document with a section per pipeline stage.

Every key has a type, a default and an allowed range. Unknown sections or
keys and out-of-range values raise :class:`ConfigError` naming the key.
The default file path may come from ``$INTRAYOLO_CONFIG``.
"""

from __future__ import annotations

import configparser
import io
import math
import os
from dataclasses import fields
from typing import Any, Optional

from .distill import DistillConfig
from .model.detector import ModelConfig
from .pipeline import TrainSettings
from .ppo import PPOConfig
from .synth import SynthParams

ENV_VAR = "INTRAYOLO_CONFIG"
INF = math.inf


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default, lower, upper); strings carry a choice tuple instead of bounds
_MODEL = {
    "backbone_channels": (_ints, (16, 32, 48, 64), 1, 4096),
    "neck_width": (int, 32, 1, 4096),
    "ssm_state_dim": (int, 8, 1, 256),
    "use_p2": (_bool, True, None, None),
    "use_ssm": (_bool, True, None, None),
    "center_radius": (float, 1.5, 0.5, 10.0),
    "nms_iou": (float, 0.5, 0.0, 1.0),
    "pre_nms_topk": (int, 300, 1, 100000),
    "reg_weight": (float, 5.0, 0.0, 100.0),
}
_TRAIN = {
    "steps": (int, 300, 1, 10 ** 7),
    "batch_size": (int, 8, 1, 4096),
    "lr": (float, 2e-3, 0.0, 1.0),
    "warmup_steps": (int, 50, 0, 10 ** 7),
    "seed": (int, 0, 0, 2 ** 32 - 1),
    "augment": (_bool, True, None, None),
}

SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "n_images": (int, 200, 1, 10 ** 7),
        "image_size": (int, 256, 32, 16384),
        "seed": (int, 0, 0, 2 ** 32 - 1),
        "split_ratio": (float, 0.8, 0.0, 1.0),
        "small_fraction_target": (float, 0.78, 0.0, 1.0),
        "small_area_ratio": (float, 0.0058, 1e-9, 1.0),
        "class_mix": (float, 0.554, 0.0, 1.0),
        "lesions_min": (int, 3, 0, 1000),
        "lesions_max": (int, 10, 0, 1000),
        "background_style": (str, "gradient", ("gradient", "textured"), None),
        "patch_size": (int, 0, 0, 16384),
    },
    "teacher": {"input_size": (int, 128, 32, 8192), **_MODEL, **{**_TRAIN, "steps": (int, 600, 1, 10 ** 7)}},
    "student": {"input_size": (int, 256, 32, 8192), **_MODEL, **_TRAIN},
    "slicer": {
        "tile": (int, 0, 0, 16384),
        "overlap": (float, 0.2, 0.0, 0.95),
        "tau_merge": (float, 0.5, 0.0, 1.0),
        "include_full_frame": (_bool, False, None, None),
        "conf_thresh": (float, 0.01, 0.0, 1.0),
    },
    "distill": {
        "mode": (str, "none", ("none", "static", "ppo"), None),
        "phi": (float, 0.5, 0.0, 1.0),
        "phi_rule": (str, "min_iou", ("min_iou", "unmatched"), None),
        "score_floor": (float, 0.3, 0.0, 1.0),
        "lambda_distill": (float, 0.5, 0.0, INF),
        "gt_dedup_iou": (float, 0.7, 0.0, 1.0),
        "use_slicing": (_bool, True, None, None),
    },
    "ppo": {
        "clip_eps": (float, 0.2, 1e-9, 1 - 1e-9),
        "gamma": (float, 0.99, 0.0, 1.0),
        "gae_lambda": (float, 0.95, 0.0, 1.0),
        "epochs": (int, 4, 1, 1000),
        "minibatch_size": (int, 64, 1, 10 ** 6),
        "lr": (float, 3e-4, 0.0, 1.0),
        "entropy_coef": (float, 0.01, 0.0, INF),
        "value_coef": (float, 0.5, 0.0, INF),
        "accept_cost": (float, 0.01, 0.0, INF),
        "update_interval": (int, 16, 1, 10 ** 6),
        "hidden": (int, 32, 1, 4096),
    },
}


def _check(section: str, key: str, value: Any) -> Any:
    _, _, lo, hi = SCHEMA[section][key]
    name = f"{section}.{key}"
    if isinstance(lo, tuple):
        if value not in lo:
            raise ConfigError(f"{name}: {value!r} is not one of {', '.join(lo)}")
        return value
    if lo is None:
        return value
    vals = value if isinstance(value, tuple) else (value,)
    for v in vals:
        if not (isinstance(v, (int, float)) and math.isfinite(v) or v == INF) or not lo <= v <= hi:
            raise ConfigError(f"{name}: {value!r} outside [{lo}, {hi}]")
    return value


class RunConfig:
    """Validated settings for every stage; ``values[section][key]``."""

    def __init__(self, values: Optional[dict[str, dict[str, Any]]] = None):
        self.values = {s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()}
        for section, keys in (values or {}).items():
            for key, value in keys.items():
                self.set(section, key, value)
        self._validate()

    def set(self, section: str, key: str, value: Any) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        parser = SCHEMA[section][key][0]
        if isinstance(value, str) and parser is not str:
            try:
                value = parser(value)
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}: cannot parse {value!r} ({exc})") from None
        elif isinstance(value, list):
            value = tuple(value)
        self.values[section][key] = _check(section, key, value)

    def _validate(self) -> None:
        d = self.values["data"]
        if d["lesions_max"] < d["lesions_min"]:
            raise ConfigError("data.lesions_max: must be >= data.lesions_min")
        for role in ("teacher", "student"):
            if self.values[role]["input_size"] % 32:
                raise ConfigError(f"{role}.input_size: {self.values[role]['input_size']} is not a multiple of 32")
            if len(self.values[role]["backbone_channels"]) != 4:
                raise ConfigError(f"{role}.backbone_channels: needs exactly 4 widths")
        if self.values["slicer"]["tile"] % 32:
            raise ConfigError("slicer.tile: must be 0 (model input size) or a multiple of 32")

    # typed views --------------------------------------------------------
    def model_config(self, role: str) -> ModelConfig:
        v = self.values[role]
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v[k] for k in v if k in names})

    def train_settings(self, role: str) -> TrainSettings:
        v = self.values[role]
        return TrainSettings(**{f.name: v[f.name] for f in fields(TrainSettings)})

    def synth_params(self) -> SynthParams:
        d = self.values["data"]
        return SynthParams(image_size=(d["image_size"], d["image_size"]),
                           lesions_per_image=(d["lesions_min"], d["lesions_max"]),
                           small_fraction_target=d["small_fraction_target"],
                           small_area_ratio=d["small_area_ratio"], class_mix=d["class_mix"],
                           background_style=d["background_style"], seed=d["seed"])

    def distill_config(self) -> DistillConfig:
        v = self.values["distill"]
        return DistillConfig(mode=v["mode"], phi=v["phi"], score_floor=v["score_floor"],
                             lambda_distill=v["lambda_distill"], gt_dedup_iou=v["gt_dedup_iou"],
                             phi_rule=v["phi_rule"])

    def ppo_config(self) -> PPOConfig:
        return PPOConfig(**self.values["ppo"])

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section, keys in self.values.items():
            cp[section] = {k: (",".join(map(str, v)) if isinstance(v, tuple) else str(v).lower()
                               if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v))
                           for k, v in keys.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in keys.items()}
                for s, keys in self.values.items()}


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if cp.defaults():
        raise ConfigError(f"unknown key(s) in [DEFAULT]: {', '.join(cp.defaults())}")
    return RunConfig({s: dict(cp[s]) for s in cp.sections()})


def load_config(path: Optional[str] = None) -> RunConfig:
    """Read ``path`` (or ``$INTRAYOLO_CONFIG``); defaults when neither is set."""
    path = path or os.environ.get(ENV_VAR)
    if not path:
        return RunConfig()
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path)
