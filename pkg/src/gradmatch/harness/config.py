"""Flat ``key = value`` experiment configs with a typed schema.

Lines are ``key = value``; ``#`` starts a comment; lists are comma
separated. Every key is checked against the schema of the chosen
experiment before anything runs.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

OUTPUT_DIR_ENV = "GRADMATCH_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(item):
    def parse(text: str):
        return tuple(item(part.strip()) for part in text.split(",") if part.strip())
    parse.__name__ = f"list[{item.__name__}]"
    return parse


ints, floats, strs = _list(int), _list(float), _list(str)
REQUIRED = object()


@dataclass(frozen=True)
class Key:
    parse: object
    default: object = REQUIRED
    choices: tuple | None = None


COMMON = {
    "experiment": Key(str),
    "master_seed": Key(int),
    "seeds": Key(int, 1),
    "output_dir": Key(str, "gradmatch-out"),
    "parallelism": Key(int, 1),
    "failure_tolerance": Key(float, 0.0),
}

SCHEMAS = {
    "gradcheck": {
        "tolerance": Key(float, 1e-5),
        "hvp_tolerance": Key(float, 1e-4),
        "n": Key(int, 12),
        "d": Key(int, 4),
        "hidden": Key(int, 5),
        "classes": Key(int, 3),
    },
    "ridge": {
        "n": Key(int, 1000),
        "p": Key(int, 10),
        "lambdas": Key(floats, (0.01, 0.1, 1.0, 10.0)),
        "coef_std": Key(float, 3.0),
        "noise_std": Key(float, 1.0),
    },
    "elasticnet": {
        "n": Key(int, 5000),
        "d": Key(int, 10),
        "coef_std": Key(float, 5.0),
        "noise_std": Key(float, 0.5),
        "test_frac": Key(float, 0.2),
        "beta": Key(float, 1e-3),
        "lambda1_grid": Key(floats, (0.01, 0.1, 1.0)),
        "lambda2_grid": Key(floats, (0.01, 0.1, 1.0)),
        "eta": Key(float, 0.01),
        "max_epochs": Key(int, 20000),
        "patience": Key(int, 20),
        "fit": Key(str, "linear", ("linear", "iterative")),
        "normalize": Key(_bool, True),
        "fit_step": Key(float, 1e-2),
        "fit_max_epochs": Key(int, 20000),
        "fit_patience": Key(int, 50),
    },
    "early-stopping": {
        "panel": Key(str, REQUIRED, ("a", "b", "c", "d", "e")),
        "n": Key(int, 1000),
        "p": Key(int, 10),
        "coef_std": Key(float, 3.0),
        "noise_std": Key(float, 1.0),
        "eta": Key(float, 0.01),
        "data_seed": Key(int, 56),
        "t": Key(int, 500),
        "m": Key(int, 10),
        "pools": Key(int, 1),
        "max_epochs": Key(int, 500),
        "patience": Key(int, 5),
        "retrain_eta": Key(float, 0.1),
        "retrain_max_epochs": Key(int, 50000),
        "m_max": Key(int, 30),
        "d_max_epochs": Key(int, 2000),
        "checkpoints": Key(ints, (1, 2, 5, 10, 20, 50, 100, 150, 200, 300, 500, 1000)),
        "design": Key(str, "gaussian", ("gaussian", "isotropic")),
        "fit": Key(str, "linear", ("linear", "iterative")),
        "fit_step": Key(float, 0.05),
        "fit_max_epochs": Key(int, 30000),
        "fit_patience": Key(int, 2000),
    },
    "bootstrap": {
        "mode": Key(str, "recovery", ("recovery", "sigma-sweep")),
        "n": Key(int, 1000),
        "p": Key(int, 10),
        "coef_std": Key(float, 3.0),
        "sigma": Key(float, 10.0),
        "sigmas": Key(floats, (1.0, 3.0, 6.0, 10.0, 20.0)),
        "eta": Key(float, 0.01),
        "t": Key(int, 500),
        "m": Key(int, 100),
        "m_values": Key(ints, (1, 10, 25, 50, 100)),
        "pools": Key(int, 10),
        "data_seed": Key(int, 56),
    },
    "dropout": {
        "n": Key(int, 1000),
        "d": Key(int, 20),
        "classes": Key(int, 3),
        "separation": Key(float, 2.0),
        "test_frac": Key(float, 0.2),
        "rates": Key(floats, (0.0, 0.1, 0.2, 0.3, 0.5)),
        "architectures": Key(strs, ("32", "64", "32x32")),
        "activation": Key(str, "relu", ("relu", "tanh")),
        "eta": Key(float, 0.05),
        "momentum": Key(float, 0.9),
        "batch_size": Key(int, 100),
        "max_epochs": Key(int, 150),
        "patience": Key(int, 20),
        "monitor": Key(str, "train", ("train", "validation")),
        "idx_images": Key(str, ""),
        "idx_labels": Key(str, ""),
    },
    "igr": {
        "etas": Key(floats, (0.01, 0.005)),
        "widths": Key(ints, (8, 16)),
        "activation": Key(str, "tanh"),
        "n": Key(int, 400),
        "d": Key(int, 5),
        "classes": Key(int, 3),
        "separation": Key(float, 3.0),
        "test_frac": Key(float, 0.2),
        "train_eta": Key(float, 0.1),
        "train_epochs": Key(int, 100),
        "batch_size": Key(int, 128),
        "probe_steps": Key(int, 5),
        "substeps": Key(int, 10),
        "quadratic_p": Key(int, 10),
        "quadratic_n": Key(int, 200),
    },
}


def parse_text(text: str) -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def validate(experiment: str, raw: dict) -> dict:
    """Typed config for ``experiment`` from raw string values."""
    if experiment not in SCHEMAS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    schema = {**COMMON, **SCHEMAS[experiment]}
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {experiment}: {', '.join(unknown)}")
    if raw.get("experiment", experiment) != experiment:
        raise ConfigError(f"config is for experiment {raw['experiment']!r}, not {experiment!r}")
    cfg = {"experiment": experiment}
    for name, key in schema.items():
        if name == "experiment":
            continue
        if name in raw:
            try:
                value = key.parse(raw[name])
            except ValueError as exc:
                raise ConfigError(f"bad value for {name}: {exc}") from None
        elif key.default is REQUIRED:
            raise ConfigError(f"missing required config key: {name}")
        else:
            value = key.default
        if key.choices is not None and value not in key.choices:
            raise ConfigError(f"{name} must be one of {', '.join(key.choices)}, got {value!r}")
        cfg[name] = value
    if cfg["seeds"] < 1 or cfg["parallelism"] < 1:
        raise ConfigError("seeds and parallelism must be at least 1")
    if not 0.0 <= cfg["failure_tolerance"] <= 1.0:
        raise ConfigError("failure_tolerance must lie in [0, 1]")
    if experiment == "igr" and cfg["activation"] != "tanh":
        raise ConfigError("igr needs tanh activations (relu is not twice differentiable)")
    if os.environ.get(OUTPUT_DIR_ENV):
        cfg["output_dir"] = os.environ[OUTPUT_DIR_ENV]
    return cfg


def load(experiment: str, path, overrides: dict | None = None) -> dict:
    raw = parse_text(Path(path).read_text())
    raw.update(overrides or {})
    return validate(experiment, raw)
