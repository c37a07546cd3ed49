"""Orchestration shared by the CLI and the acceptance suite."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict

import numpy as np

from .approximators import Multiplier
from .config import build
from .ctmc import TimeGrid, raw_log_weights, normalize_log_weights, ess, rollout
from .mcmc import run_chains
from .metrics import SampleSet, config_hash, correlation_error, energy_w2
from .schedule import NoiseSchedule, UniformKernel
from .trainer import Trainer, build_models, log_reference_terminal, multiplier_fn


def train_from_config(cfg: dict, out_dir: str | None = None, fmt: str = "csv",
                      callback=None) -> Trainer:
    target, kernel, initial, tcfg = build(cfg)
    grid = TimeGrid.uniform(tcfg.rollout_steps)
    ctrl, corr = build_models(kernel, cfg["model"], tcfg, grid)
    trainer = Trainer(kernel, target, initial, ctrl, corr, tcfg, grid)

    def on_stage(k, tr):
        if out_dir is not None:
            ctrl.save(os.path.join(out_dir, f"controller-stage{k}.npz"), tr.ctrl_opt, tr.rng, cfg)
            corr.save(os.path.join(out_dir, f"corrector-stage{k}.npz"), tr.corr_opt, tr.rng, cfg)
        if callback is not None:
            callback(k, tr)

    summaries = trainer.train(on_stage)
    if out_dir is not None:
        write_rows(os.path.join(out_dir, f"steps.{fmt}"), [asdict(r) for r in trainer.history], fmt)
        write_rows(os.path.join(out_dir, f"stages.{fmt}"), summaries, fmt)
    return trainer


def generate(kernel: UniformKernel, controller: Multiplier, initial, target, count: int,
             steps: int, seed: int = 0, cfg_hash: str = "") -> tuple[SampleSet, dict]:
    """tau-leap samples from a controller plus ESS and mean jumps per site."""
    grid = TimeGrid.uniform(steps)
    batch = rollout(kernel, multiplier_fn(controller), grid, initial, count, seed=seed,
                    max_clamp_rate=1.0)
    logw = raw_log_weights(batch, target, log_reference_terminal(kernel, initial),
                           kernel.schedule.memoryless)
    info = {
        "ess": ess(normalize_log_weights(logw)),
        "jumps_per_site": float(batch.jumps.mean() / kernel.D),
        "clamp_rate": batch.clamp_rate,
    }
    samples = SampleSet(batch.x1, kernel.spec, "dasbs", seed, cfg_hash, dict(info))
    return samples, info


def reference_samples(target, count: int, method: str = "sw", seed: int = 0,
                      chains: int = 64, **kw) -> SampleSet:
    x = run_chains(target, method, count, chains=chains, seed=seed, **kw)
    return SampleSet(x, target.spec, method, seed, "", {"target": target.to_config()})


def ablate_schedule(cfg: dict, reference: SampleSet | None = None, progress=None) -> list[dict]:
    """Score each (alpha, gamma, NFE) against SW reference samples.

    NFE is the tau-leap step count of both the training rollouts and the
    generation run, so every row trains its own controller and corrector.
    """
    ab = cfg["ablate"]
    target, _, _, _ = build(cfg)
    if reference is None:
        reference = reference_samples(target, int(ab["reference_count"]), "sw", cfg["seed"])
    rows = []
    for gamma in ab["gammas"]:
        for alpha in ab["alphas"]:
            for nfe in ab["nfe"]:
                sub = json.loads(json.dumps(cfg))
                sub["schedule"] = {"kind": "loglinear" if alpha > 0 else "memoryless",
                                   "gamma": float(gamma), "alpha": float(alpha)}
                sub["train"]["rollout_steps"] = int(nfe)
                trainer = train_from_config(sub)
                kernel = UniformKernel(NoiseSchedule.from_config(sub["schedule"]), target.spec)
                model = trainer.sampler(use_ema=cfg["sample"].get("use_ema", True))
                samples, info = generate(kernel, model, trainer.initial, target,
                                         int(ab["sample_count"]), int(nfe), cfg["seed"] + 1)
                row = {"alpha": float(alpha), "gamma": float(gamma), "nfe": int(nfe),
                       "jumps_per_site": info["jumps_per_site"],
                       "delta_corr": correlation_error(samples, reference, target),
                       "ew2": energy_w2(samples, reference, target),
                       "config_hash": config_hash(sub)}
                rows.append(row)
                if progress is not None:
                    progress(row)
    return rows


def write_rows(path, rows: list[dict], fmt: str = "csv") -> None:
    if fmt == "json":
        with open(path, "w") as fh:
            json.dump(rows, fh, indent=1, default=_plain)
        return
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _plain(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(type(o))
