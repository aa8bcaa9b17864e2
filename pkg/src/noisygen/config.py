"""Flat, typed ``dotted.key = value`` run configuration.

One setting per line, values are JSON literals, ``#`` starts a comment::

    experiment = "train"
    seeds = [0, 1, 2, 3]
    data.alpha = 0.25
    model.hidden = [16]

Every key must appear in :data:`SCHEMA`; unknown keys and ill-typed values
are rejected with the offending key path.  :func:`serialize` writes all keys
in sorted order, and ``parse(serialize(c)) == c`` for every valid config.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

__all__ = ["ConfigError", "RunConfig", "SCHEMA", "parse", "serialize", "load", "preset"]


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted field path when known."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key = key
        self.line = line
        where = f"{key}: " if key else ""
        at = f" (line {line})" if line is not None else ""
        super().__init__(f"{where}{message}{at}")


# key -> (type tag, default, allowed values or None)
SCHEMA: dict = {
    "experiment": ("str", "train", ("divergence", "train", "fed", "sweep")),
    "seeds": ("int_list", [0, 1, 2, 3], None),
    "data.source": ("str", "synthetic", ("synthetic", "csv")),
    "data.train_csv": ("str", "", None),
    "data.test_csv": ("str", "", None),
    "data.n_train": ("int", 500, None),
    "data.n_test": ("int", 500, None),
    "data.dim": ("int", 100, None),
    "data.classes": ("int", 10, None),
    "data.separation": ("float", 6.0, None),
    "data.alpha": ("float", 0.0, None),
    "data.corrupt_test": ("bool", True, None),
    "model.kind": ("str", "mlp", ("logistic", "mlp")),
    "model.hidden": ("int_list", [16], None),
    "opt.algorithm": ("str", "sgld", ("noisy_sgd", "dp_sgd", "sgld")),
    "opt.schedule": ("str", "with_replacement", ("with_replacement", "without_replacement")),
    "opt.batch_size": ("int", 50, None),
    "opt.epochs": ("int", 200, None),
    "opt.iterations": ("int?", None, None),
    "opt.checkpoints": ("int", 10, None),
    "opt.lr": ("float", 0.03, None),
    "opt.lr_decay": ("float", 0.96, None),
    "opt.lr_decay_steps": ("int", 1000, None),
    "opt.lr_staircase": ("bool", False, None),
    "opt.noise": ("str", "gaussian", ("gaussian", "laplace", "uniform")),
    "opt.noise_scale": ("float", 0.0, None),
    "opt.beta_scale": ("float", 1e6, None),
    "opt.clip": ("float?", None, None),
    "opt.domain": ("str", "none", ("none", "l2_ball", "l1_ball", "box")),
    "opt.radius": ("float", 1.0, None),
    "opt.box_lo": ("float", -1.0, None),
    "opt.box_hi": ("float", 1.0, None),
    "opt.projected_sgld": ("bool", False, None),
    "opt.stats": ("str", "in_batch", ("in_batch", "hold_out")),
    "opt.holdout_size": ("int", 64, None),
    "opt.output": ("str", "last", ("last", "average", "argmin_loss")),
    "bounds.list": ("str_list", ["auto:kl"], None),
    "bounds.loss": ("str", "bounded", ("bounded", "sub_gaussian", "finite_variance")),
    "bounds.value": ("float", 1.0, None),
    "divergence.noises": ("str_list", ["gaussian", "laplace", "uniform"], None),
    "divergence.fs": ("str_list", ["kl", "tv", "chi2"], None),
    "divergence.shifts": ("float_list", [0.5, 1.0, 3.0], None),
    "divergence.ms": ("float_list", [1.0], None),
    "fed.N": ("int", 4, None),
    "fed.C": ("int", 2, None),
    "fed.T": ("int", 4, None),
    "fed.M": ("int", 5, None),
    "fed.eta": ("float", 0.5, None),
    "fed.b": ("int", 10, None),
    "fed.clip": ("float?", 1.0, None),
    "fed.radius": ("float?", 2.0, None),
    "fed.n_train": ("int", 200, None),
    "fed.n_test": ("int", 500, None),
    "fed.shift": ("float", 1.0, None),
    "sweep.axis": ("str", "corruption", ("corruption", "width", "n", "noise_scale")),
    "sweep.values": ("float_list", [0.0, 0.25, 0.5, 0.75], None),
}


def _check(key: str, value):
    tag, _, allowed = SCHEMA[key]
    optional = tag.endswith("?")
    tag = tag.rstrip("?")
    if value is None:
        if optional:
            return None
        raise ConfigError("value may not be null", key)
    if tag == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", key)
        return value
    if tag == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key)
        return value
    if tag == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"expected a finite number, got {value!r}", key)
        return float(value)
    if tag == "str":
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key)
        if allowed is not None and value not in allowed:
            raise ConfigError(f"must be one of {list(allowed)}, got {value!r}", key)
        return value
    if not isinstance(value, list):
        raise ConfigError(f"expected a list, got {value!r}", key)
    elem = tag.split("_")[0]
    return [_check_elem(key, elem, v) for v in value]


def _check_elem(key, elem, v):
    if elem == "int" and (isinstance(v, bool) or not isinstance(v, int)):
        raise ConfigError(f"list entries must be integers, got {v!r}", key)
    if elem == "float":
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"list entries must be numbers, got {v!r}", key)
        return float(v)
    if elem == "str" and not isinstance(v, str):
        raise ConfigError(f"list entries must be strings, got {v!r}", key)
    return v


class RunConfig:
    """Validated mapping from every schema key to its value."""

    def __init__(self, values: dict | None = None):
        self._values = {k: _copy(spec[1]) for k, spec in SCHEMA.items()}
        for key, value in (values or {}).items():
            self[key] = value

    def __getitem__(self, key: str):
        return self._values[key]

    def __setitem__(self, key: str, value):
        if key not in SCHEMA:
            raise ConfigError("unknown key", key)
        self._values[key] = _check(key, value)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self._values == other._values

    def __repr__(self):
        changed = {k: v for k, v in self._values.items() if v != SCHEMA[k][1]}
        return f"RunConfig({changed})"

    def as_dict(self) -> dict:
        return {k: _copy(v) for k, v in self._values.items()}

    def copy(self) -> "RunConfig":
        return RunConfig(self.as_dict())

    def updated(self, **dotted) -> "RunConfig":
        """Copy with overrides; pass keys with ``__`` in place of dots."""
        new = self.copy()
        for key, value in dotted.items():
            new[key.replace("__", ".")] = value
        return new


def _copy(v):
    return list(v) if isinstance(v, list) else v


def parse(text: str) -> RunConfig:
    """Parse config text; later assignments to a key override earlier ones."""
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        try:
            parsed = json.loads(value.strip())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"value is not a JSON literal ({exc.msg})", key, lineno) from None
        try:
            cfg[key] = parsed
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], key, lineno) from None
    return cfg


def serialize(cfg: RunConfig) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in sorted(cfg.as_dict().items()))


def load(path) -> RunConfig:
    return parse(Path(path).read_text(encoding="utf-8"))


def preset(name: str) -> RunConfig:
    """Built-in configurations used by the acceptance suite and the README."""
    base = RunConfig()
    if name == "sgld":
        return base
    if name == "dp_sgd":
        return base.updated(**{
            "model__kind": "logistic", "data__dim": 5, "data__classes": 2, "data__separation": 4.0,
            "data__n_train": 200, "data__n_test": 2000, "opt__algorithm": "dp_sgd",
            "opt__schedule": "without_replacement", "opt__batch_size": 4, "opt__iterations": 50,
            "opt__lr": 0.5, "opt__lr_decay": 1.0, "opt__clip": 1.0, "opt__domain": "l2_ball",
            "opt__radius": 1.0, "opt__checkpoints": 10, "opt__stats": "hold_out",
            "bounds__list": ["dp_sgd:kl", "dp_sgd:tv", "dp_sgd:chi2"],
        })
    if name == "fed":
        return base.updated(**{
            "experiment": "fed", "model__kind": "logistic", "data__dim": 5, "data__classes": 2,
            "data__separation": 4.0,
        })
    if name == "divergence":
        return base.updated(experiment="divergence")
    raise ConfigError(f"unknown preset {name!r}")
