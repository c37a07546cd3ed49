"""Declarative experiment configuration (TOML) and object builders."""
from __future__ import annotations

import copy

import tomli

from .ctmc import initial_from_config
from .schedule import NoiseSchedule, UniformKernel
from .targets import target_from_config
from .trainer import ConfigError, TrainConfig

DEFAULTS: dict = {
    "seed": 0,
    "target": {"kind": "ising", "L": 2, "beta": 0.4407, "J": 1.0, "h": 0.0},
    "schedule": {"kind": "loglinear", "gamma": 1.0, "alpha": 0.5},
    "model": {"type": "dense", "hidden": [256, 256], "n_fourier": 16},
    "train": {},
    "sample": {"count": 1000, "steps": 200, "use_ema": True},
    "mcmc": {"method": "sw", "count": 1000, "chains": 64},
    "oracle": {"tol": 1e-10, "times": [0.0, 0.3, 0.7], "identity_tol": 1e-8},
    "ablate": {"alphas": [0.0, 0.1, 1.0, 10.0], "gammas": [1.0], "nfe": [20, 50],
               "reference_count": 4000, "sample_count": 1000},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                cfg = tomli.load(fh)
            except tomli.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
    base = copy.deepcopy(DEFAULTS)
    if "schedule" in cfg:  # a schedule is replaced whole; alpha defaults depend on kind
        base["schedule"] = {}
    cfg = _merge(base, cfg)
    if overrides:
        cfg = _merge(cfg, overrides)
    TrainConfig.from_dict(cfg["train"])  # validate early
    return cfg


def build(cfg: dict):
    """(target, kernel, initial, train config) from a merged config."""
    target = target_from_config(cfg["target"])
    schedule = NoiseSchedule.from_config(cfg["schedule"])
    kernel = UniformKernel(schedule, target.spec)
    tcfg = TrainConfig.from_dict({**cfg["train"], "seed": cfg["train"].get("seed", cfg["seed"])})
    initial = initial_from_config(tcfg.initial, target.spec)
    return target, kernel, initial, tcfg
