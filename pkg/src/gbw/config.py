"""JSON run configuration: schema, defaults and resolution into typed objects."""
from __future__ import annotations

import copy
import json

import jsonschema

from .errors import InvalidInputError
from .model import SgdConfig
from .synth import SceneSpec
from .trainer import REGIMES, TrainPlan
from .weighting import STRATEGIES, GbwConfig

DEFAULT_CONFIG = {
    "seed": 0,
    "scene": {
        "proportions": [0.40, 0.25, 0.15, 0.10, 0.07, 0.03],
        "height": 64,
        "width": 64,
        "n_features": 8,
        "class_means": None,
        "class_scales": None,
        "target_mean_shift": None,
        "target_scale": 1.0,
        "concentration": 30.0,
        "mean_separation": 1.0,
        "shift_magnitude": 1.0,
        "geometry_seed": 0,
    },
    "data": {
        "n_source_images": 20,
        "n_target_images": 20,
        "dataset_dir": None,
    },
    "train": {
        "strategy": "gbw",
        "regime": "self_training",
        "target_coefficient": 1.0,
        "hidden": 0,
        "pseudo_label_threshold": 0.8,
        "eval_fraction": 0.2,
        "gbw": {"lam": 1.0, "loss_kind": "cross_entropy", "gamma": 2.0,
                "use_confidence": True, "inactive_class_policy": "neutral_one",
                "log_weights": True},
        "sgd": {"learning_rate": 0.02, "steps": 3000, "batch_size": 64},
    },
    "ablation": {
        "lambdas": [0.01, 0.1, 0.5, 1.0, 2.0, 10.0],
        "seeds": None,
    },
}

_num = {"type": "number"}
_int = {"type": "integer"}
_nullable_vec = {"type": ["array", "null"], "items": _num}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "scene": _obj({
        "proportions": {"type": "array", "items": _num, "minItems": 2},
        "height": {"type": "integer", "minimum": 1},
        "width": {"type": "integer", "minimum": 1},
        "n_features": {"type": "integer", "minimum": 1},
        "class_means": {"type": ["array", "null"], "items": {"type": "array", "items": _num}},
        "class_scales": _nullable_vec,
        "target_mean_shift": _nullable_vec,
        "target_scale": _num,
        "concentration": _num,
        "mean_separation": _num,
        "shift_magnitude": _num,
        "geometry_seed": {"type": "integer", "minimum": 0},
    }),
    "data": _obj({
        "n_source_images": {"type": "integer", "minimum": 1},
        "n_target_images": {"type": "integer", "minimum": 2},
        "dataset_dir": {"type": ["string", "null"]},
    }),
    "train": _obj({
        "strategy": {"enum": list(STRATEGIES)},
        "regime": {"enum": list(REGIMES)},
        "target_coefficient": _num,
        "hidden": {"type": "integer", "minimum": 0},
        "pseudo_label_threshold": _num,
        "eval_fraction": _num,
        "gbw": _obj({
            "lam": _num,
            "loss_kind": {"enum": ["cross_entropy", "focal"]},
            "gamma": _num,
            "use_confidence": {"type": "boolean"},
            "inactive_class_policy": {"enum": ["neutral_one"]},
            "log_weights": {"type": "boolean"},
        }),
        "sgd": _obj({
            "learning_rate": _num,
            "steps": {"type": "integer", "minimum": 0},
            "batch_size": {"type": "integer", "minimum": 1},
        }),
    }),
    "ablation": _obj({
        "lambdas": {"type": "array", "items": _num, "minItems": 1},
        "seeds": {"type": ["array", "null"], "items": _int},
    }),
})


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(user: dict | None = None, seed: int | None = None) -> dict:
    """Validate ``user`` against the schema and fill in every default.

    Raises :class:`InvalidInputError` naming the offending field.
    """
    user = {} if user is None else user
    try:
        jsonschema.validate(user, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InvalidInputError(f"{where}: {exc.message}") from None
    cfg = _merge(DEFAULT_CONFIG, user)
    if seed is not None:
        cfg["seed"] = int(seed)
    if cfg["ablation"]["seeds"] is None:
        cfg["ablation"]["seeds"] = [cfg["seed"]]
    # build once so semantic errors surface here, prefixed by their section
    for section, build in (("scene", scene_spec), ("train", train_plan)):
        try:
            build(cfg)
        except InvalidInputError as exc:
            raise InvalidInputError(f"{section}.{exc}") from None
        except TypeError as exc:
            raise InvalidInputError(f"{section}: {exc}") from None
    if any(not lam > 0 for lam in cfg["ablation"]["lambdas"]):
        raise InvalidInputError("ablation.lambdas: entries must be positive")
    return cfg


def load_config(path, seed: int | None = None) -> dict:
    """Read a config file, or a run manifest (its embedded config is used)."""
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{path}: malformed JSON ({exc})") from None
    if isinstance(raw, dict) and raw.get("tool") == "gbw" and "config" in raw:
        raw = raw["config"]
    return resolve_config(raw, seed)


def scene_spec(cfg: dict, seed: int | None = None) -> SceneSpec:
    s = cfg["scene"]
    spec = SceneSpec.from_dict({**s, "seed": cfg["seed"] if seed is None else seed})
    return spec


def train_plan(cfg: dict, seed: int | None = None) -> TrainPlan:
    t = copy.deepcopy(cfg["train"])
    t["gbw"] = GbwConfig(**t["gbw"])
    t["sgd"] = SgdConfig(**t["sgd"])
    return TrainPlan(**t, seed=cfg["seed"] if seed is None else seed)


def with_seed(cfg: dict, seed: int) -> dict:
    out = copy.deepcopy(cfg)
    out["seed"] = int(seed)
    return out


def with_strategy(cfg: dict, strategy: str, lam: float | None = None) -> dict:
    out = copy.deepcopy(cfg)
    out["train"]["strategy"] = strategy
    if lam is not None:
        out["train"]["gbw"]["lam"] = float(lam)
    return out


__all__ = ["DEFAULT_CONFIG", "SCHEMA", "load_config", "resolve_config", "scene_spec",
           "train_plan", "with_seed", "with_strategy"]
