"""Run configuration: JSON schema, defaults and validation with field paths."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, fields
from pathlib import Path

from .errors import ConfigError, InvalidInputError
from .training import PpoConfig

ENV_NAMES = ("linear", "density_walk", "traffic")

# PpoConfig keeps the textbook defaults; runs use a longer schedule, the
# cost-pessimistic surrogate and bootstrapped advantages (see README)
RUN_PPO = {
    **asdict(PpoConfig()),
    "batch_episodes": 128,
    "patience": 30,
    "max_joint_updates": 1000,
    "min_joint_updates": 300,
    "max_ppo_iterations": 150,
    "critic_warmup": 100,
    "val_episodes": 512,
    "surrogate": "max",
    "gae_lambda": 0.9,
}

DEFAULTS = {
    "env": {"name": "linear", "params": {}, "data": None},
    "policy": {"d": 2, "hidden": 16, "head_hidden": 16},
    "estimator": {"hidden": 16, "head_hidden": 16},
    "critic": {"hidden": 16, "head_hidden": 16},
    "ppo": RUN_PPO,
    "alpha": 2.0,
    "budget": 1.5,
    "budgets": [0.5, 1.0, 1.5, 3.0],
    "seed": 0,
    "eval_seeds": 20,
    "eval_episodes": 64,
    "error": "squared",
    "out": "runs/default",
    "workers": 1,
}

_REQUIRED_TOP = ("env",)


def defaults():
    return copy.deepcopy(DEFAULTS)


def _type_name(t):
    return {int: "integer", float: "number", str: "string", bool: "boolean", list: "list", dict: "object"}.get(t, str(t))


def _expect(path, value, kinds):
    if isinstance(value, bool) and bool not in kinds:
        raise ConfigError(path, f"expected {' or '.join(_type_name(k) for k in kinds)}, got boolean")
    if not isinstance(value, kinds):
        raise ConfigError(path, f"expected {' or '.join(_type_name(k) for k in kinds)}, got {type(value).__name__}")
    return value


def _merge(path, base, override):
    out = copy.deepcopy(base)
    for key, val in override.items():
        sub = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(sub, "unknown field")
        if isinstance(base[key], dict) and key != "params":
            _expect(sub, val, (dict,))
            out[key] = _merge(sub, base[key], val)
        else:
            out[key] = val
    return out


def _positive_int(path, v, minimum=1):
    _expect(path, v, (int,))
    if v < minimum:
        raise ConfigError(path, f"must be >= {minimum}")
    return v


def validate(cfg: dict) -> dict:
    """Fill defaults and check every field; returns the completed config."""
    _expect("<root>", cfg, (dict,))
    for key in _REQUIRED_TOP:
        if key not in cfg:
            raise ConfigError(key, "missing required field")
    env = cfg["env"]
    _expect("env", env, (dict,))
    if "name" not in env:
        raise ConfigError("env.name", "missing required field")
    full = _merge("", DEFAULTS, cfg)

    name = _expect("env.name", full["env"]["name"], (str,))
    if name not in ENV_NAMES:
        raise ConfigError("env.name", f"unknown environment {name!r}; choose from {list(ENV_NAMES)}")
    _expect("env.params", full["env"]["params"], (dict,))
    if full["env"]["data"] is not None:
        _expect("env.data", full["env"]["data"], (str,))

    for group in ("policy", "estimator", "critic"):
        for key in ("hidden", "head_hidden"):
            _positive_int(f"{group}.{key}", full[group][key])
    _positive_int("policy.d", full["policy"]["d"])

    ppo = full["ppo"]
    for f in fields(PpoConfig):
        path = f"ppo.{f.name}"
        v = ppo[f.name]
        if f.type in ("int", int):
            _positive_int(path, v, 0 if f.name in ("outer_rounds", "critic_warmup", "min_joint_updates") else 1)
        elif f.type in ("float", float):
            _expect(path, v, (int, float))
        elif f.type in ("bool", bool):
            _expect(path, v, (bool,))
        elif f.type in ("str", str):
            _expect(path, v, (str,))
    try:
        PpoConfig(**ppo)
    except InvalidInputError as exc:
        raise ConfigError("ppo", str(exc)) from None

    alpha = _expect("alpha", full["alpha"], (int, float))
    if not (math.isfinite(alpha) and alpha > 1):
        raise ConfigError("alpha", "must be finite and > 1")
    b = _expect("budget", full["budget"], (int, float))
    if not (math.isfinite(b) and b >= 0):
        raise ConfigError("budget", "must be finite and >= 0")
    _expect("budgets", full["budgets"], (list,))
    if not full["budgets"]:
        raise ConfigError("budgets", "must be non-empty")
    for i, v in enumerate(full["budgets"]):
        _expect(f"budgets[{i}]", v, (int, float))
        if not (math.isfinite(v) and v >= 0):
            raise ConfigError(f"budgets[{i}]", "must be finite and >= 0")
    _positive_int("seed", full["seed"], 0)
    _positive_int("eval_seeds", full["eval_seeds"])
    _positive_int("eval_episodes", full["eval_episodes"])
    if full["error"] not in ("squared", "absolute"):
        raise ConfigError("error", "must be 'squared' or 'absolute'")
    _expect("out", full["out"], (str,))
    _positive_int("workers", full["workers"])
    return full


def load(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read ({exc.strerror})") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return validate(raw)


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
