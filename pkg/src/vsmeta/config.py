"""Experiment configuration: INI files with a fixed schema plus ``--set`` overrides.

Every key has a type and a default.  Unknown sections or keys, unparsable
values and out-of-range values raise :class:`ConfigError` naming the
``section.key`` path.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .learners import MetaOptimizerConfig
from .models import ACTIVATIONS, MLPSpec
from .online import DIRECTIONS, METHODS, OnlineConfig, config_hash
from .tasks import FAMILIES, DataArrivalSchedule, TaskDistribution

MODES = ("offline-meta", "online", "verify")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


# --- value parsers --------------------------------------------------------


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float(text: str) -> float:
    value = text.strip().lower()
    if value in ("inf", "+inf", "infinity"):
        return math.inf
    if value in ("-inf", "-infinity"):
        return -math.inf
    out = float(value)
    if math.isnan(out):
        raise ValueError("NaN is not allowed")
    return out


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _choice(options) -> Callable[[str], str]:
    def parse(text: str) -> str:
        value = text.strip()
        if value not in options:
            raise ValueError(f"{value!r} is not one of {', '.join(options)}")
        return value

    return parse


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


# section -> key -> (parser, default as text)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], str]]] = {
    "experiment": {
        "mode": (_choice(MODES), "online"),
        "method": (_choice(tuple(METHODS)), "ftml-vs"),
        "seeds": (_int_list, "0"),
        "out": (str, "runs"),
        "deterministic": (_bool, "false"),
        "workers": (int, "1"),
    },
    "task": {
        "family": (_choice(FAMILIES), "sinusoid"),
        "n_tasks": (int, "30"),
        "stream_seed": (_optional_int, "none"),
        "amplitude": (_float_list, "0.1, 5.0"),
        "phase": (_float_list, "0.0, 3.141592653589793"),
        "rotations": (_int_list, "0, 90, 180, 270"),
        "scales": (_float_list, "0.5, 1.0"),
        "offset_range": (_float, "1.0"),
        "n_test": (int, "100"),
    },
    "model": {
        "hidden": (_int_list, "40, 40"),
        "activation": (_choice(ACTIVATIONS), "tanh"),
    },
    "meta": {
        "outer_rate": (_float, "0.0001"),
        "inner_steps": (int, "5"),
        "meta_steps_per_arrival": (int, "1"),
        "grad_clip": (_float, "10"),
        "inner_clip": (_float, "10"),
        "adam_beta1": (_float, "0.9"),
        "adam_beta2": (_float, "0.999"),
        "adam_eps": (_float, "1e-8"),
        "max_shots": (int, "20"),
        "first_order": (_bool, "false"),
        "meta_batch": (int, "5"),
        "val_size": (int, "10"),
        "inner_rate_init": (_float, "0.1"),
        "eta_init": (_float, "1.0"),
    },
    "online": {
        "threshold": (_float, "0.4"),
        "direction": (_choice(DIRECTIONS), "loss"),
        "max_steps_per_task": (int, "200"),
        "batch_size": (int, "2"),
        "interval": (int, "5"),
        "eval_every": (int, "1"),
        "toe_batch": (int, "10"),
    },
    "offline": {
        "iterations": (int, "500"),
        "points_per_task": (int, "40"),
        "n_eval_tasks": (int, "20"),
    },
    "verify": {
        "shots": (_int_list, "1, 2, 5, 10"),
        "n_mc": (int, "20000"),
        "dim": (int, "3"),
        "task_std": (_float, "0.5"),
        "noise_std": (_float, "0.5"),
        "n_tasks": (int, "2000"),
        "n_per_task": (int, "500"),
        "grid_points": (int, "1001"),
    },
}


@dataclass
class ExperimentConfig:
    """Fully validated settings for one CLI invocation."""

    values: dict[str, dict[str, Any]]
    mode: str = field(init=False)
    method: str = field(init=False)
    seeds: tuple[int, ...] = field(init=False)
    out: Path = field(init=False)
    deterministic: bool = field(init=False)

    def __post_init__(self):
        exp = self.values["experiment"]
        self.mode = exp["mode"]
        self.method = exp["method"]
        self.seeds = exp["seeds"]
        self.out = Path(exp["out"])
        self.deterministic = exp["deterministic"]

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    # --- derived objects ---

    def task_distribution(self) -> TaskDistribution:
        t = self.values["task"]
        return TaskDistribution(
            family=t["family"],
            amplitude=tuple(t["amplitude"]),
            phase=tuple(t["phase"]),
            rotations=tuple(t["rotations"]),
            scales=tuple(t["scales"]),
            offset_range=t["offset_range"],
        )

    def model_spec(self) -> MLPSpec:
        m = self.values["model"]
        if self.values["task"]["family"] == "sinusoid":
            return MLPSpec((1, *m["hidden"], 1), m["activation"], "mse")
        return MLPSpec((2, *m["hidden"], 4), m["activation"], "softmax-xent")

    def meta_config(self) -> MetaOptimizerConfig:
        m = dict(self.values["meta"])
        m["adam_betas"] = (m.pop("adam_beta1"), m.pop("adam_beta2"))
        return MetaOptimizerConfig(**m)

    def online_config(self, method: str | None = None) -> OnlineConfig:
        o = self.values["online"]
        return OnlineConfig(
            method=method or self.method,
            threshold=o["threshold"],
            direction=o["direction"],
            max_steps_per_task=o["max_steps_per_task"],
            schedule=DataArrivalSchedule(o["batch_size"], o["interval"]),
            meta=self.meta_config(),
            eval_every=o["eval_every"],
            n_test=self.values["task"]["n_test"],
            toe_batch=o["toe_batch"],
        )

    def stream_seed(self, seed: int) -> int:
        fixed = self.values["task"]["stream_seed"]
        return seed if fixed is None else fixed

    def experiment_hash(self) -> str:
        """Digest of everything except run bookkeeping, method and seed."""
        payload = {s: {k: v for k, v in kv.items()} for s, kv in self.values.items() if s != "experiment"}
        payload["mode"] = self.mode
        return config_hash(payload)


def _validate(values: dict[str, dict[str, Any]]) -> None:
    def need(cond: bool, path: str, msg: str):
        if not cond:
            raise ConfigError(path, msg)

    exp, task, meta, online = values["experiment"], values["task"], values["meta"], values["online"]
    need(len(exp["seeds"]) >= 1, "experiment.seeds", "at least one seed is required")
    need(exp["workers"] >= 1, "experiment.workers", "must be >= 1")
    need(task["n_tasks"] >= 1, "task.n_tasks", "must be >= 1")
    need(task["n_test"] >= 1, "task.n_test", "must be >= 1")
    need(len(task["amplitude"]) == 2, "task.amplitude", "expected 'low, high'")
    need(len(task["phase"]) == 2, "task.phase", "expected 'low, high'")
    need(len(values["model"]["hidden"]) >= 1, "model.hidden", "need at least one hidden layer")
    need(all(h >= 1 for h in values["model"]["hidden"]), "model.hidden", "widths must be >= 1")
    for key in ("outer_rate", "grad_clip", "inner_clip", "adam_eps", "inner_rate_init", "eta_init"):
        need(meta[key] > 0, f"meta.{key}", "must be positive")
    for key in ("inner_steps", "meta_steps_per_arrival", "max_shots", "meta_batch", "val_size"):
        need(meta[key] >= 1, f"meta.{key}", "must be >= 1")
    for key in ("adam_beta1", "adam_beta2"):
        need(0 <= meta[key] < 1, f"meta.{key}", "must lie in [0, 1)")
    for key in ("max_steps_per_task", "batch_size", "interval", "eval_every", "toe_batch"):
        need(online[key] >= 1, f"online.{key}", "must be >= 1")
    off, ver = values["offline"], values["verify"]
    need(off["iterations"] >= 1, "offline.iterations", "must be >= 1")
    need(off["points_per_task"] >= 2, "offline.points_per_task", "must be >= 2")
    need(off["n_eval_tasks"] >= 1, "offline.n_eval_tasks", "must be >= 1")
    need(len(ver["shots"]) >= 1 and all(s >= 1 for s in ver["shots"]), "verify.shots", "shot counts must be >= 1")
    need(ver["n_mc"] >= 2, "verify.n_mc", "must be >= 2")
    need(ver["grid_points"] >= 200, "verify.grid_points", "the oracle grid needs at least 200 points")
    need(ver["n_per_task"] >= 2, "verify.n_per_task", "must be >= 2")
    need(ver["dim"] >= 1 and ver["n_tasks"] >= 1, "verify.dim", "dim and n_tasks must be >= 1")
    need(ver["task_std"] >= 0 and ver["noise_std"] >= 0, "verify.task_std", "standard deviations must be >= 0")


def parse_override(text: str) -> tuple[str, str, str]:
    if "=" not in text:
        raise ConfigError(text, "override must look like section.key=value")
    path, value = text.split("=", 1)
    if "." not in path:
        raise ConfigError(path.strip(), "override path must be section.key")
    section, key = path.strip().split(".", 1)
    return section, key, value.strip()


def load_config(path=None, overrides=(), extra: dict[str, dict[str, str]] | None = None) -> ExperimentConfig:
    """Read ``path`` (optional), apply ``extra`` then ``overrides``, validate."""
    raw: dict[str, dict[str, str]] = {s: {} for s in SCHEMA}

    def put(section: str, key: str, value: str):
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
        if key not in SCHEMA[section]:
            raise ConfigError(f"{section}.{key}", "unknown key")
        raw[section][key] = value

    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(str(path), f"cannot parse: {exc}") from exc
        for section in parser.sections():
            for key, value in parser.items(section):
                put(section, key, value)
    for section, kv in (extra or {}).items():
        for key, value in kv.items():
            put(section, key, value)
    for text in overrides:
        put(*parse_override(text))

    values: dict[str, dict[str, Any]] = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (parse, default) in keys.items():
            text = raw[section].get(key, default)
            try:
                values[section][key] = parse(text)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{section}.{key}", f"invalid value {text!r}: {exc}") from exc
    _validate(values)
    return ExperimentConfig(values)
