"""Command-line entry point: ``craft <subcommand> [flags]``.

Training flags mirror the TrainConfig field names. Precedence is built-in
defaults, then ``--config`` file, then explicit flags. ``CRAFT_SEED`` seeds
anything whose seed flag is not given.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import cmaes
from .blackbox import SurrogateModel
from .refinement import load_checkpoint, save_checkpoint
from .tasks import generate, read_task, write_task
from .trainer import (COMPONENT_GRID, REFINER_GRID, ConfigError, MetricsWriter, TrainConfig,
                      ablate, evaluate, load_config, run)

log = logging.getLogger("craft")

SEED_FIELDS = ("projection_seed", "cma_seed", "refiner_seed", "task_seed")


def env_seed() -> int | None:
    raw = os.environ.get("CRAFT_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"CRAFT_SEED must be an integer, got {raw!r}") from None


def existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise argparse.ArgumentTypeError(f"no such file: {path}")
    return p


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=existing, help="key = value file of TrainConfig fields")
    conv = {"int": int, "float": float, "bool": _bool, "str": str,
            "float | None": float}
    for f in fields(TrainConfig):
        flags = ["--" + f.name.replace("_", "-")]
        if f.name == "popsize":
            flags.append("--lambda")
        p.add_argument(*flags, dest=f.name, type=conv[f.type], default=None,
                       metavar=f.type.split()[0].upper())


def config_from_args(args) -> TrainConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig)}
    seed = env_seed()
    if seed is not None:
        from_file = {}
        if args.config is not None:
            from .trainer import parse_config_text
            from_file = parse_config_text(args.config.read_text())
        for name in SEED_FIELDS:
            if overrides[name] is None and name not in from_file:
                overrides[name] = seed
    return load_config(args.config, **overrides)


def cmd_gen_task(args) -> int:
    seed = args.seed if args.seed is not None else (env_seed() or 0)
    task = generate(seed=seed, num_classes=args.classes, shots=args.shots, n=args.n, d=args.d,
                    feature_dim=args.feature_dim, noise_std=args.noise_std,
                    corruption=args.corruption, reachable=not args.unreachable,
                    test_per_class=args.test_per_class)
    write_task(task, args.out)
    print(f"wrote {args.out}: K={task.num_classes} shots={task.shots} "
          f"train={task.labels_train.size} test={task.labels_test.size}")
    return 0


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    task = read_task(args.task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(out / "metrics.csv")
    start = time.perf_counter()
    try:
        report = run(cfg, task, on_record=writer)
    finally:
        writer.close()
    np.save(out / "prompt.npy", report.final_latent)
    if report.refiner is not None:
        save_checkpoint(report.refiner, out / "refiner.bin")
    print(f"mode={cfg.mode_name()} generations={len(report.records)} "
          f"queries={report.queries_fitness}+{report.queries_refine}")
    print(f"zero_shot={report.zero_shot_accuracy:.4f} blackbox={report.final_acc_blackbox:.4f} "
          f"refined={report.final_acc_refined:.4f} time={time.perf_counter() - start:.1f}s")
    return 0


def cmd_eval(args) -> int:
    task = read_task(args.task)
    cfg = config_from_args(args)
    z = np.load(args.prompt) if args.prompt else np.zeros(cfg.d0)
    if z.shape != (cfg.d0,):
        raise ConfigError(f"prompt latent has shape {z.shape}, expected ({cfg.d0},); "
                          "pass the same --d0 used for training")
    refiner = load_checkpoint(args.refiner) if args.refiner else None
    from .blackbox import LocalOracle
    oracle = LocalOracle(task.build_model())
    handle = oracle.register_images(task.features_test)
    spec = task.prompt_spec(cfg.d0, cfg.projection_seed, cfg.projection_std)
    acc_bb, acc_ref = evaluate(oracle, handle, spec, z, refiner, task.labels_test)
    line = f"blackbox={acc_bb:.4f} refined={acc_ref:.4f}"
    print(line)
    if args.append:
        with open(args.append, "a") as fh:
            fh.write(f"{args.task},{acc_bb:.6f},{acc_ref:.6f}\n")
    return 0


def cmd_ablate(args) -> int:
    cfg = config_from_args(args)
    task = read_task(args.task)
    grid = COMPONENT_GRID if args.grid == "components" else REFINER_GRID
    seeds = list(range(args.seeds))
    rows = ablate(cfg, grid, task, seeds, path=args.out)
    for r in rows:
        print(f"{r['name']:<18} mean={r['mean_acc']:.4f} std={r['std_acc']:.4f}")
    return 0


def sphere(z):
    return float(np.sum((z - 1.0) ** 2))


def rosenbrock(z):
    return float(np.sum(100.0 * (z[1:] - z[:-1] ** 2) ** 2 + (1.0 - z[:-1]) ** 2))


BENCHMARKS = {"sphere": (sphere, 1e-10, 500), "rosenbrock": (rosenbrock, 1e-6, 3000)}


def cmd_bench(args) -> int:
    func, target, cap = BENCHMARKS[args.fn]
    cap = args.max_generations or cap
    results = []
    for seed in range(args.runs):
        start = time.perf_counter()
        state = cmaes.minimize(func, np.zeros(args.d), 1.0, args.popsize, cap, target=target,
                               seed=seed)
        elapsed = time.perf_counter() - start
        results.append((state.best_fitness, state.generation, elapsed))
        print(f"seed={seed} best={state.best_fitness:.3e} generations={state.generation} "
              f"time={elapsed:.2f}s")
    best = np.array([r[0] for r in results])
    hits = int(np.sum(best < target))
    print(f"fn={args.fn} d={args.d} popsize={args.popsize} median_best={np.median(best):.3e} "
          f"reached={hits}/{args.runs} target={target:g}")
    return 0


def parse_dims(text: str) -> tuple[int, int, int, int]:
    try:
        dims = tuple(int(x) for x in text.split(","))
    except ValueError:
        dims = ()
    if len(dims) != 4 or min(dims) < 1:
        raise argparse.ArgumentTypeError("--dims expects n,d,D_f,K as positive integers")
    return dims


def cmd_serve(args) -> int:
    from .service import serve
    seed = args.seed if args.seed is not None else (env_seed() or 0)
    if args.task is not None:
        task = read_task(args.task)
        model = task.build_model()
    else:
        n, d, dim, k = args.dims
        model = SurrogateModel(seed, n, d, dim, k, corruption=args.corruption)
    budget = None if args.budget is None or args.budget < 0 else args.budget
    serve(model, budget, args.listen)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="craft", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-task", help="write a synthetic few-shot task file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--shots", type=int, default=16)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--corruption", type=float, default=0.5)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--unreachable", action="store_true")
    p.set_defaults(func=cmd_gen_task)

    p = sub.add_parser("train", help="run collaborative training on a task")
    p.add_argument("--task", type=existing, required=True)
    p.add_argument("--out", default="run")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a prompt latent and refiner on the test split")
    p.add_argument("--task", type=existing, required=True)
    p.add_argument("--prompt", type=existing)
    p.add_argument("--refiner", type=existing)
    p.add_argument("--append", help="append a CSV line with the accuracies")
    add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid and write a CSV")
    p.add_argument("--task", type=existing, required=True)
    p.add_argument("--grid", choices=["components", "refiner"], default="components")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench-cmaes", help="CMA-ES convergence on test functions")
    p.add_argument("--fn", choices=sorted(BENCHMARKS), default="sphere")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--popsize", "--lambda", type=int, default=16)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--max-generations", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="serve a surrogate model over the line protocol")
    p.add_argument("--seed", type=int)
    p.add_argument("--budget", type=int, help="query budget; omit or negative for unlimited")
    p.add_argument("--listen", default="127.0.0.1:7878")
    p.add_argument("--dims", type=parse_dims, default=(4, 32, 64, 10), help="n,d,D_f,K")
    p.add_argument("--corruption", type=float, default=0.0)
    p.add_argument("--task", type=existing, help="serve the surrogate of a task file instead")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        parser.error(str(exc))
    except (OSError, ValueError) as exc:
        print(f"craft: error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
