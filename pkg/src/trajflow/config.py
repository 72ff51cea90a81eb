"""Run configuration: one JSON document, strictly checked, with dotted-path overrides."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict
from pathlib import Path

from .checkpoint import config_hash
from .core import ConfigurationError
from .dataio import SyntheticConfig
from .network import NetworkConfig
from .sampler import SamplerConfig
from .student import DistillConfig
from .teacher import TimeSchedule, TrainConfig


def _defaults() -> dict:
    synthetic = {k: v for k, v in asdict(SyntheticConfig()).items() if k != "seed"}
    net = NetworkConfig(T_p=1, T_f=1)
    return {
        "seed": 0,
        "run_name": "default",
        "out_dir": "runs",
        "manifest": None,
        "data": {"name": "synthetic", "n_train": 5000, "n_val": 500, "n_test": 500, **synthetic},
        "network": {k: getattr(net, k) for k in ("K", "d_model", "d_ff", "n_heads", "n_enc_layers",
                                                 "n_dec_blocks", "dropout", "mask_k", "mask_m")},
        "train": {"batch_size": 64, "learning_rate": 1e-3, "weight_decay": 0.01, "max_steps": 2000,
                  "mask": True, "mu_t": -0.5, "sigma_t": 1.5, "checkpoint_every": 500},
        "sampler": {"T": 100, "p": 5.0, "continuous": False, "split": "train", "batch_size": 256},
        "distill": {"m": 20, "batch_size": 64, "learning_rate": 1e-3, "weight_decay": 0.01,
                    "max_steps": 2000, "checkpoint_every": 500, "warm_start": True},
        "evaluate": {"split": "test", "horizons_s": None},
    }


DEFAULTS = _defaults()
# keys whose default is null, with the type a non-null value must have
NULLABLE = {"manifest": str, "evaluate.horizons_s": list}


def _type_ok(value, default, path: str) -> bool:
    if default is None:
        return value is None or isinstance(value, NULLABLE[path])
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(default))


def _merge(base: dict, update: dict, errors: list[str], prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            errors.append(f"unknown key {path!r}")
        elif isinstance(base[key], dict):
            if isinstance(value, dict):
                _merge(base[key], value, errors, path + ".")
            else:
                errors.append(f"{path!r} must be an object")
        elif not _type_ok(value, base[key], path):
            errors.append(f"{path!r} has wrong type {type(value).__name__}")
        else:
            base[key] = float(value) if isinstance(base[key], float) else value


def parse_override(text: str) -> dict:
    """``a.b=v`` -> ``{"a": {"b": v}}``; ``v`` is read as JSON when it parses, else as a string."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not of the form key.path=value")
    path, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = path.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out


def _semantic_errors(cfg: dict) -> list[str]:
    errors = []
    d, net = cfg["data"], cfg["network"]
    checks = [
        ("data", lambda: SyntheticConfig(**{k: v for k, v in d.items()
                                           if k not in ("name", "n_train", "n_val", "n_test")},
                                        seed=0).validate()),
        ("network", lambda: NetworkConfig(T_p=d["T_p"], T_f=d["T_f"], **net).validate()),
        ("train", lambda: TrainConfig(**{k: v for k, v in cfg["train"].items()
                                         if k not in ("mu_t", "sigma_t", "checkpoint_every")}
                                      ).validate()),
        ("train", lambda: TimeSchedule(cfg["train"]["mu_t"], cfg["train"]["sigma_t"]).validate()),
        ("sampler", lambda: SamplerConfig(cfg["sampler"]["T"], cfg["sampler"]["p"],
                                          cfg["sampler"]["continuous"]).validate()),
        ("distill", lambda: DistillConfig(**{k: v for k, v in cfg["distill"].items()
                                             if k not in ("checkpoint_every", "warm_start")}
                                          ).validate()),
    ]
    for section, check in checks:
        try:
            check()
        except ConfigurationError as exc:
            errors.append(f"{section}: {exc}")
    for path in ("data.n_train", "data.n_val", "data.n_test", "train.checkpoint_every",
                 "distill.checkpoint_every", "sampler.batch_size"):
        section, key = path.split(".")
        if cfg[section][key] < 1:
            errors.append(f"{path} must be >= 1")
    return errors


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the JSON file at ``path``, then each ``key.path=value`` override.

    Every problem found is reported in one :class:`ConfigurationError`.
    """
    cfg = copy.deepcopy(DEFAULTS)
    errors: list[str] = []
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: malformed JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
        _merge(cfg, doc, errors)
    for text in overrides:
        try:
            _merge(cfg, parse_override(text), errors)
        except ConfigurationError as exc:
            errors.append(str(exc))
    if not errors:
        errors = _semantic_errors(cfg)
    if errors:
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def run_hash(cfg: dict) -> str:
    return config_hash(cfg)
