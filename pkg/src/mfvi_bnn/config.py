"""Experiment configuration: JSON files, ``--set key=value`` overrides, defaults."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


EXPERIMENTS = ("train", "evaluate", "tau-sweep", "collapse", "balance-ratio", "theorem3", "prop5", "ood")

BASE = {
    "seed": 0,
    "out": "runs",
    "dataset": {
        "kind": "blobs",
        "n_per_class": 256,
        "n_classes": 4,
        "d_x": 2,
        "separation": 3.0,
        "bias": True,
        "test_fraction": 0.25,
    },
    "model": {"N": 256, "activation": "relu", "loss": "cross_entropy"},
    "prior": {"mean": 0.0, "variance": 0.2},
    "init": {"mean_std": 0.01, "sigma": 1e-3},
    "schedule": {"mode": "scaled", "tau": 1.0},
    "trainer": {
        "iterations": 2000,
        "step_size": None,
        "lr": 1.0,
        "kl_stability": 0.1,
        "mc_samples": 1,
        "batch_count": 1,
        "kl_mode": "closed_form",
        "record_every": 0,
    },
    "metrics": {"bins": 15, "prediction_samples": 50, "entropy_bins": 20, "elbo_mc_samples": 8},
}

_TEACHER = {
    "kind": "teacher",
    "p": 64,
    "input_scale": 1.0,
    "n_teacher": 16,
    "d_x": 4,
    "d_y": 1,
    "activation": "relu",
    "weight_scale": 1.0,
    "noise_std": 0.1,
    "teacher_seed": 0,
}

OVERRIDES = {
    "train": {},
    "evaluate": {"posterior": None},
    "tau-sweep": {
        "taus": [float(t) for t in np.logspace(-6, 3, 10)],
        "include_reference": True,
        "confidence_tie_tolerance": 1e-3,
    },
    "collapse": {
        "dataset": {"n_per_class": 64, "test_fraction": None},
        "schedule": {"mode": "fixed", "eta": 1.0},
        "trainer": {"iterations": 3000, "step_size": 0.05},
        "N_grid": [8, 32, 128, 512],
    },
    "balance-ratio": {
        "N_grid": [16, 32, 64, 128, 256, 512, 1024],
        "taus": [0.1, 1.0, 10.0],
    },
    "theorem3": {
        "dataset": _TEACHER,
        "model": {"loss": "square", "activation": "relu"},
        "N_grid": [8, 16, 32, 64, 128, 256, 512, 1024],
        "mode": "exact",
        "mc_samples": 256,
        "atoms": {"mu_a_mean": 1.0, "mu_b_norm": 0.5, "mean_spread": 0.1, "sigma": 0.5},
        "tau": 1.0,
    },
    "prop5": {
        "dataset": _TEACHER,
        "model": {"loss": "square", "activation": "relu", "N": 64},
        "p_grid": [2**k for k in range(5, 13)],
        "resamples": 32,
        "population_draws": 2**22,
        "atoms": {"mu_a_mean": 1.0, "mu_b_norm": 0.5, "mean_spread": 0.1, "sigma": 0.5},
        "tau": 1.0,
    },
    "ood": {
        "schedule": {"mode": "scaled", "tau": 1e-4},
        "ood_dataset": {"kind": "gaussian_inputs", "p": 256, "center": 0.0, "scale": 0.5},
        "posterior": None,
    },
}


# a sub-dict whose discriminator changes is replaced instead of merged
_DISCRIMINATORS = ("kind", "mode")


def _same_variant(old: dict, new: dict) -> bool:
    return all(new.get(d, old.get(d)) == old.get(d) for d in _DISCRIMINATORS)


def deep_merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and _same_variant(out[k], v):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def defaults(experiment: str) -> dict:
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}")
    cfg = deep_merge(BASE, OVERRIDES[experiment])
    cfg["experiment"] = experiment
    return cfg


def parse_assignment(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_assignment(cfg: dict, path: list[str], value) -> None:
    node = cfg
    for k in path[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[path[-1]] = value


def load_file(path) -> dict:
    """Read a config file; an experiment manifest yields the config it recorded."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if "manifest_version" in data:
        return data["config"]
    return data


def resolve(experiment: str, file_cfg: dict | None = None, assignments=(), out=None, seed=None) -> dict:
    cfg = defaults(experiment)
    if file_cfg:
        if file_cfg.get("experiment", experiment) != experiment:
            raise ConfigError(f"config is for {file_cfg['experiment']!r}, not {experiment!r}")
        cfg = deep_merge(cfg, file_cfg)
    for text in assignments:
        apply_assignment(cfg, *parse_assignment(text))
    if out is not None:
        cfg["out"] = str(out)
    if seed is not None:
        cfg["seed"] = int(seed)
    validate(cfg)
    return cfg


def _positive_int(cfg, *path):
    node = cfg
    for k in path:
        node = node[k]
    if not isinstance(node, int) or isinstance(node, bool) or node < 1:
        raise ConfigError(f"{'.'.join(path)} must be a positive integer, got {node!r}")


def validate(cfg: dict) -> None:
    try:
        _positive_int(cfg, "model", "N")
        iters = cfg["trainer"]["iterations"]
        if not isinstance(iters, int) or iters < 0:
            raise ConfigError(f"trainer.iterations must be a non-negative integer, got {iters!r}")
        _positive_int(cfg, "trainer", "mc_samples")
        _positive_int(cfg, "trainer", "batch_count")
        _positive_int(cfg, "metrics", "bins")
        _positive_int(cfg, "metrics", "prediction_samples")
        if cfg["model"]["activation"] not in ("relu", "sigmoid"):
            raise ConfigError(f"model.activation must be relu or sigmoid, got {cfg['model']['activation']!r}")
        if cfg["model"]["loss"] not in ("square", "cross_entropy"):
            raise ConfigError(f"model.loss must be square or cross_entropy, got {cfg['model']['loss']!r}")
        if not cfg["prior"]["variance"] > 0:
            raise ConfigError("prior.variance must be positive")
        if cfg["schedule"].get("mode") not in ("fixed", "scaled"):
            raise ConfigError("schedule.mode must be 'fixed' or 'scaled'")
        if not isinstance(cfg["seed"], int):
            raise ConfigError("seed must be an integer")
        for key in ("posterior",):
            path = cfg.get(key)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{key} file {path} does not exist")
        ds = cfg["dataset"]
        for key in ("images", "labels", "path", "test_images", "test_labels"):
            if key in ds and ds[key] is not None and not Path(ds[key]).exists():
                raise ConfigError(f"dataset.{key} file {ds[key]} does not exist")
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed config: {exc!r}") from None
