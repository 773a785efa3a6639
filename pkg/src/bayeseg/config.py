"""Run configuration: defaults, strict JSON schema, file + override resolution."""

from __future__ import annotations

import copy
import json
from dataclasses import MISSING, fields
from pathlib import Path

import jsonschema

from .data import ARTIFACTS, SynthConfig
from .training import KL_SCALE_MODES, TrainConfig
from .unet import INITS, UNetConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration."""


_JSON_TYPES = {int: "integer", float: "number", str: "string", bool: "boolean",
               list: "array", tuple: "array", dict: "object"}

ARTIFACT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": list(ARTIFACTS)},
        "std": {"type": "number", "minimum": 0},
        "columns": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0},
                    "minItems": 2, "maxItems": 2},
        "width": {"type": "integer", "minimum": 1},
        "attenuation": {"type": "number", "minimum": 0, "maximum": 1},
        "gain": {"type": "number", "minimum": 0},
    },
}


def _dataclass_schema(cls, extra=None):
    props = {}
    for f in fields(cls):
        default = f.default if f.default is not MISSING else f.default_factory()
        kind = _JSON_TYPES[type(default)]
        props[f.name] = {"type": kind}
        if kind == "array":
            props[f.name]["items"] = {"type": "number"}
    props.update(extra or {})
    return {"type": "object", "additionalProperties": False, "properties": props}


def _defaults(cls):
    obj = cls()
    out = {}
    for f in fields(cls):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else copy.deepcopy(v)
    return out


DEFAULTS = {
    "seed": 0,
    "run_dir": "runs/default",
    "data": {"path": None, "n_samples": 150, "split_ratio": 0.8, "split_seed": 0},
    "synth": _defaults(SynthConfig),
    "model": _defaults(UNetConfig),
    "train": {**_defaults(TrainConfig), "epochs": 15},
    "inference": {"T": 64, "seed": 0, "split": "val"},
    "flag": {"threshold": None, "percentile": 99.0},
    "evaluation": {"aggregation": None, "class_names": None},
    "biomarkers": {"classes": None, "spacing_mm": None, "slice_gap_mm": None},
    "lambda_sweep": {"lambdas": [0.0, 0.1, 1.0]},
}

_NUM_OR_NULL = {"type": ["number", "null"]}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "run_dir": {"type": "string"},
        "data": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "path": {"type": ["string", "null"]},
                "n_samples": {"type": "integer", "minimum": 0},
                "split_ratio": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "split_seed": {"type": "integer", "minimum": 0},
            },
        },
        "synth": _dataclass_schema(SynthConfig, {
            "artifact": ARTIFACT_SCHEMA,
            "height": {"type": "integer", "minimum": 1},
            "width": {"type": "integer", "minimum": 1},
            "num_layers": {"type": "integer", "minimum": 1},
            "seed": {"type": "integer", "minimum": 0},
            "noise_std": {"type": "number", "minimum": 0},
            "amplitude": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
            "frequency": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        }),
        "model": _dataclass_schema(UNetConfig, {
            "image_size": {"type": "array", "items": {"type": "integer", "minimum": 1},
                           "minItems": 2, "maxItems": 2},
            "init": {"enum": list(INITS)},
            "num_classes": {"type": "integer", "minimum": 2},
        }),
        "train": _dataclass_schema(TrainConfig, {
            "kl_scale_mode": {"enum": list(KL_SCALE_MODES)},
            "lambda_kl": {"type": "number", "minimum": 0},
            "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        }),
        "inference": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "T": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "split": {"enum": ["train", "val", "all"]},
            },
        },
        "flag": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "threshold": _NUM_OR_NULL,
                "percentile": {"type": "number", "minimum": 0, "maximum": 100},
            },
        },
        "evaluation": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "aggregation": {"oneOf": [{"type": "null"}, {"enum": ["five_layer"]},
                                          {"type": "object", "additionalProperties": {"type": "string"}}]},
                "class_names": {"type": ["array", "null"], "items": {"type": "string"}},
            },
        },
        "biomarkers": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "classes": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}},
                "spacing_mm": {"type": ["array", "null"], "items": {"type": "number", "exclusiveMinimum": 0},
                               "minItems": 2, "maxItems": 2},
                "slice_gap_mm": _NUM_OR_NULL,
            },
        },
        "lambda_sweep": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "lambdas": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
            },
        },
    },
}


def _merge(base, update, path=""):
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict) and k != "artifact":
            _merge(base[k], v, f"{path}{k}.")
        else:
            base[k] = copy.deepcopy(v)
    return base


def parse_override(text):
    """``a.b.c=value`` -> ``{"a": {"b": {"c": value}}}``; value is JSON if it parses."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = value
    for part in reversed(key.strip().split(".")):
        if not part:
            raise ConfigError(f"override {text!r} has an empty key component")
        out = {part: out}
    return out


def validate(cfg):
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    try:
        synth_config(cfg).validate()
        model_config(cfg).validate()
        train_config(cfg).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config error: {exc}") from None
    if cfg["data"]["path"] is None:
        sc, mc = synth_config(cfg), model_config(cfg)
        if sc.num_classes != mc.num_classes:
            raise ConfigError(f"config error: synth gives {sc.num_classes} classes, "
                              f"model.num_classes is {mc.num_classes}")
        if (sc.height, sc.width) != mc.image_size:
            raise ConfigError(f"config error: synth images are {sc.height}x{sc.width}, "
                              f"model.image_size is {mc.image_size[0]}x{mc.image_size[1]}")
    return cfg


def resolve(config_path=None, overrides=(), base=None):
    """Defaults, then the JSON file, then each override in order; validated."""
    cfg = copy.deepcopy(DEFAULTS if base is None else base)
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        _merge(cfg, loaded)
    for o in overrides:
        _merge(cfg, o if isinstance(o, dict) else parse_override(o))
    return validate(cfg)


def synth_config(cfg) -> SynthConfig:
    s = dict(cfg["synth"])
    s["amplitude"] = tuple(s["amplitude"])
    s["frequency"] = tuple(s["frequency"])
    return SynthConfig(**s)


def model_config(cfg) -> UNetConfig:
    return UNetConfig(**cfg["model"])


def train_config(cfg) -> TrainConfig:
    return TrainConfig(**cfg["train"])
