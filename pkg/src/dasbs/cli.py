"""Command-line entry point: train, sample, mcmc, oracle, evaluate, ablate-schedule.

Exit codes: 0 success, 1 argument/config error, 2 numeric or convergence
error, 3 capacity error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .approximators import NumericError, load_checkpoint
from .config import build, load_config
from .ctmc import DegenerateWeightsError, StepSizeError
from .metrics import config_hash, evaluate, read_samples, write_samples
from .oracle import ConvergenceError, SBOracle, certify
from .state_space import CapacityError
from .targets import LatticeModel, target_from_config
from .trainer import ConfigError

EXIT_OK, EXIT_ARGS, EXIT_NUMERIC, EXIT_CAPACITY = 0, 1, 2, 3


class ArgumentError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ARGS, f"{self.prog}: error: {message}\n")


def _emit(obj, fmt: str, stream=None) -> None:
    stream = stream or sys.stdout
    rows = obj if isinstance(obj, list) else [obj]
    if fmt == "json":
        json.dump(obj, stream, indent=1, default=lambda o: o.item() if hasattr(o, "item") else str(o))
        stream.write("\n")
        return
    if not rows:
        return
    keys = list(rows[0])
    stream.write(",".join(keys) + "\n")
    for r in rows:
        stream.write(",".join(str(r[k]) for k in keys) + "\n")


def _out(args, name):
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


# ------------------------------------------------------------- subcommands
def cmd_train(args, cfg):
    from .experiments import train_from_config

    os.makedirs(args.out_dir, exist_ok=True)
    with open(_out(args, "config.json"), "w") as fh:
        json.dump({**cfg, "config_hash": config_hash(cfg)}, fh, indent=1)
    tr = train_from_config(cfg, args.out_dir, args.format)
    rows = [{"stage": r.stage, "step": r.step, "phase": r.phase, "loss": r.loss}
            for r in tr.history[-1:]]
    _emit(rows, args.format)


def cmd_sample(args, cfg):
    from .ctmc import initial_from_config
    from .experiments import generate
    from .schedule import NoiseSchedule, UniformKernel
    from .trainer import TrainConfig

    model, _, _, ck_cfg = load_checkpoint(args.checkpoint)
    cfg = load_config(None, ck_cfg) if ck_cfg else cfg
    target = target_from_config(cfg["target"])
    kernel = UniformKernel(NoiseSchedule.from_config(cfg["schedule"]), target.spec)
    tcfg = TrainConfig.from_dict(cfg["train"])
    initial = initial_from_config(tcfg.initial, target.spec)
    if args.ema and model.shadow is not None:
        model.ema_swap()
    count = args.count or cfg["sample"]["count"]
    steps = args.steps or cfg["sample"]["steps"]
    samples, info = generate(kernel, model, initial, target, count, steps, args.seed,
                             config_hash(cfg))
    samples.extra["target"] = target.to_config() if isinstance(target, LatticeModel) else None
    path = _out(args, args.output)
    write_samples(path, samples)
    _emit({"path": path, "count": count, "steps": steps, **info}, args.format)


def cmd_mcmc(args, cfg):
    from .experiments import reference_samples

    target = target_from_config(cfg["target"])
    m = cfg["mcmc"]
    method = args.method or m["method"]
    count = args.count or m["count"]
    kw = {k: m[k] for k in ("burn_in", "thin") if k in m}
    samples = reference_samples(target, count, method, args.seed, m.get("chains", 64), **kw)
    samples.config_hash = config_hash(cfg)
    path = _out(args, args.output)
    write_samples(path, samples)
    _emit({"path": path, "method": method, "count": count}, args.format)


def cmd_oracle(args, cfg):
    target, kernel, initial, _ = build(cfg)
    oc = cfg["oracle"]
    orc = SBOracle(kernel, initial.pmf_table(), target.exact_pmf(), tol=oc["tol"])
    res = certify(orc, oc["times"])
    tol = oc["identity_tol"]
    rows = [{"check": k, "residual": v, "pass": v <= tol} for k, v in res.items()]
    rows.append({"check": "ipf_sweeps", "residual": orc.solution.sweeps, "pass": True})
    if args.explicit_out:
        orc.dump(_out(args, "oracle.npz"), meta={"config_hash": config_hash(cfg)})
    _emit(rows, args.format)
    if not all(r["pass"] for r in rows):
        raise ConvergenceError("identity check failed", max(res.values()))


def cmd_evaluate(args, cfg):
    a, b = read_samples(args.test), read_samples(args.ref)
    if a.spec.n_states != b.spec.n_states or a.spec.dim != b.spec.dim:
        raise ArgumentError("sample files come from different spaces")
    tcfg = a.extra.get("target") or b.extra.get("target")
    if args.config is None and tcfg:
        model = LatticeModel.from_config(tcfg)
    elif args.config is not None:
        model = target_from_config(cfg["target"])
    else:
        side = a.spec.side or int(round(np.sqrt(a.spec.dim)))
        model = (LatticeModel.ising(side, 1.0) if a.spec.n_states == 2
                 else LatticeModel.potts(side, 1.0, a.spec.n_states))
    rep = evaluate(a, b, model, a.extra.get("ess"), config_hash(cfg))
    _emit(rep.to_dict(), args.format)


def cmd_ablate(args, cfg):
    from .experiments import ablate_schedule, write_rows

    if args.alphas:
        cfg["ablate"]["alphas"] = args.alphas
    if args.gammas:
        cfg["ablate"]["gammas"] = args.gammas
    if args.nfe:
        cfg["ablate"]["nfe"] = args.nfe
    rows = ablate_schedule(cfg)
    if args.explicit_out:
        write_rows(_out(args, f"ablate.{args.format}"), rows, args.format)
    _emit(rows, args.format)


def make_parser() -> Parser:
    p = Parser(prog="dasbs", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="TOML experiment file")
    p.add_argument("--out-dir", default=None, help="output directory (default: current)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("train", help="alternating controller/corrector training")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="tau-leap samples from a controller checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--count", type=int, default=None)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--no-ema", dest="ema", action="store_false")
    s.add_argument("--output", default="samples.bin")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("mcmc", help="Metropolis-Hastings / Swendsen-Wang reference samples")
    s.add_argument("--method", choices=("mh", "sw"), default=None)
    s.add_argument("--count", type=int, default=None)
    s.add_argument("--output", default="mcmc.bin")
    s.set_defaults(func=cmd_mcmc)

    s = sub.add_parser("oracle", help="exact bridge solve and identity certification")
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("evaluate", help="metrics between two sample files")
    s.add_argument("test")
    s.add_argument("ref")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate-schedule", help="sweep (alpha, gamma) at several NFE budgets")
    s.add_argument("--alphas", type=float, nargs="+")
    s.add_argument("--gammas", type=float, nargs="+")
    s.add_argument("--nfe", type=int, nargs="+")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    args.explicit_out = args.out_dir is not None
    args.out_dir = args.out_dir or "."
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {"seed": args.seed} if args.seed is not None else None
        cfg = load_config(args.config, overrides)
        if args.seed is None:
            args.seed = int(cfg["seed"])
        args.func(args, cfg)
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except (ConvergenceError, NumericError, FloatingPointError, StepSizeError,
            DegenerateWeightsError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ArgumentError, ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
