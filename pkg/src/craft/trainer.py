"""Collaborative training: alternate CMA-ES prompt search and refiner epochs.

Query accounting: every candidate prompt costs one prediction call over the
whole few-shot training set, and every refinement epoch costs one more call
at the current search mean to obtain its inputs. A full run therefore charges
``budget`` fitness queries plus ``budget // popsize`` refinement queries.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import cmaes
from .blackbox import BlackBoxOracle, LocalOracle
from .numerics import SeededRng, cross_entropy, kl_divergence
from .prompt import PromptSpec, build_prompts
from .refinement import (AdamWState, RefinerParams, init_refiner, predict as refine_predict,
                         train_epoch)
from .tasks import FewShotTask, accuracy

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["generation", "queries_train", "sigma", "fitness_best", "fitness_mean",
                  "loss_refine", "acc_test_blackbox", "acc_test_refined"]


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    budget: int = 8000
    popsize: int = 40
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.01
    lambda_in: float | None = None
    lambda_out: float | None = None
    d0: int = 512
    hidden: int = 512
    sigma0: float = 1.0
    projection_std: float = 0.02
    projection_seed: int = 0
    cma_seed: int = 0
    refiner_seed: int = 0
    task_seed: int = 0
    prompt_enabled: bool = True
    refine_enabled: bool = True
    collaborative_enabled: bool = True
    residual_enabled: bool = True
    refiner_arch: str = "mlp"
    eval_every: int = 1

    def __post_init__(self):
        for name in ("budget", "popsize", "batch_size", "d0", "hidden", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.popsize < 4:
            raise ConfigError("popsize must be >= 4")
        if self.refiner_arch not in ("mlp", "linear"):
            raise ConfigError(f"unknown refiner_arch {self.refiner_arch!r}")
        if not (self.prompt_enabled or self.refine_enabled):
            raise ConfigError("at least one of prompt_enabled / refine_enabled must be set")

    @property
    def generations(self) -> int:
        return self.budget // self.popsize

    def consistency_weights(self, num_classes: int) -> tuple[float, float]:
        """``(lambda_in, lambda_out)``, defaulting to ``0.1 / K``; zero without collaboration."""
        if not self.collaborative_enabled:
            return 0.0, 0.0
        default = 0.1 / num_classes
        lam_in = default if self.lambda_in is None else self.lambda_in
        lam_out = default if self.lambda_out is None else self.lambda_out
        return float(lam_in), float(lam_out)

    def planned_queries(self) -> tuple[int, int]:
        """(fitness queries, refinement-input queries) for a complete run."""
        g = self.generations
        return (g * self.popsize if self.prompt_enabled else 0,
                g if self.refine_enabled else 0)

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, projection_seed=seed, cma_seed=seed, refiner_seed=seed)

    def mode_name(self) -> str:
        parts = []
        if self.prompt_enabled:
            parts.append("PG")
        if self.refine_enabled:
            parts.append("PR")
            if self.collaborative_enabled and self.prompt_enabled:
                parts.append("Co")
        return "+".join(parts)


def _parse_value(name: str, text: str, kind):
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "float | None":
            return None if text.lower() in ("", "none", "default") else float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def config_field_types() -> dict[str, str]:
    return {f.name: f.type for f in fields(TrainConfig)}


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into TrainConfig overrides; unknown keys are rejected."""
    types = config_field_types()
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "lambda":
            key = "popsize"
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        out[key] = _parse_value(key, value, types[key])
    return out


def load_config(path, **overrides) -> TrainConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


@dataclass
class GenerationRecord:
    generation: int
    queries_train: int
    sigma: float
    fitness_best: float
    fitness_mean: float
    loss_refine: float
    acc_test_blackbox: float
    acc_test_refined: float

    def row(self) -> list:
        return [_fmt(v) for v in asdict(self).values()]


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


@dataclass
class TrainReport:
    config: TrainConfig
    records: list[GenerationRecord] = field(default_factory=list)
    final_latent: np.ndarray | None = None
    refiner: RefinerParams | None = None
    queries_fitness: int = 0
    queries_refine: int = 0
    zero_shot_accuracy: float = math.nan
    final_acc_blackbox: float = math.nan
    final_acc_refined: float = math.nan
    completed: bool = False

    @property
    def queries_total(self) -> int:
        return self.queries_fitness + self.queries_refine

    def accuracy_at(self, queries: int) -> float:
        """Refined test accuracy of the last record charged at most ``queries`` queries."""
        best = math.nan
        for r in self.records:
            if r.queries_train <= queries and not math.isnan(r.acc_test_refined):
                best = r.acc_test_refined
        return best


class MetricsWriter:
    """CSV sink flushed after every row, so interrupted runs keep a valid prefix."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._csv = csv.writer(self._fh)
        self._csv.writerow(METRIC_COLUMNS)
        self._fh.flush()

    def __call__(self, record: GenerationRecord):
        self._csv.writerow(record.row())
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def fitness(oracle: BlackBoxOracle, handle: str, spec: PromptSpec, refiner: RefinerParams | None,
            z, labels, lambda_in: float, collaborative: bool = True) -> float:
    """One prediction call; ``CE(Y_I, y) + lambda_in * KL(Y_I || Y_O)``."""
    y_in = oracle.predict(handle, build_prompts(spec, z))
    loss = cross_entropy(y_in, labels)
    if collaborative and refiner is not None and lambda_in != 0.0:
        loss += lambda_in * kl_divergence(y_in, refine_predict(refiner, y_in))
    return loss


def evaluate(oracle_eval: BlackBoxOracle, handle_test: str, spec: PromptSpec, z,
             refiner: RefinerParams | None, labels) -> tuple[float, float]:
    """Test accuracy of the raw predictions and of the refined ones."""
    y_in = oracle_eval.predict(handle_test, build_prompts(spec, z))
    acc_bb = accuracy(y_in, labels)
    if refiner is None:
        return acc_bb, acc_bb
    return acc_bb, accuracy(refine_predict(refiner, y_in), labels)


def zero_shot_accuracy(task: FewShotTask, oracle_eval: BlackBoxOracle | None = None,
                       handle_test: str | None = None) -> float:
    if oracle_eval is None:
        oracle_eval = LocalOracle(task.build_model())
        handle_test = oracle_eval.register_images(task.features_test)
    spec = task.prompt_spec(1, 0, std=0.0)
    return evaluate(oracle_eval, handle_test, spec, np.zeros(1), None, task.labels_test)[0]


def run(config: TrainConfig, task: FewShotTask, oracle: BlackBoxOracle | None = None,
        eval_oracle: BlackBoxOracle | None = None, on_record=None,
        train_handle: str | None = None, test_handle: str | None = None) -> TrainReport:
    """Alternating training loop.

    ``oracle`` defaults to an in-process surrogate with a budget of exactly
    the planned queries; ``eval_oracle`` (separate, uncharged by default)
    scores the test split. ``on_record`` receives each GenerationRecord.
    """
    if config.budget % config.popsize:
        warnings.warn(f"budget {config.budget} is not divisible by popsize {config.popsize}; "
                      f"running {config.generations} generations", stacklevel=2)
    k = task.num_classes
    lam_in, lam_out = config.consistency_weights(k)
    planned_fit, planned_ref = config.planned_queries()
    if oracle is None:
        oracle = LocalOracle(task.build_model(), budget=planned_fit + planned_ref)
    if eval_oracle is None:
        eval_oracle = LocalOracle(task.build_model())
    if train_handle is None:
        train_handle = oracle.register_images(task.features_train)
    if test_handle is None:
        test_handle = eval_oracle.register_images(task.features_test)
    used_before = oracle.ledger.used

    spec = task.prompt_spec(config.d0, config.projection_seed, config.projection_std)
    labels = task.labels_train
    report = TrainReport(config=config)
    report.zero_shot_accuracy = evaluate(eval_oracle, test_handle, spec, np.zeros(config.d0),
                                         None, task.labels_test)[0]

    state = cmaes.init(config.d0, None, config.sigma0, config.popsize) if config.prompt_enabled else None
    cma_rng = SeededRng(config.cma_seed)
    refiner = opt = None
    if config.refine_enabled:
        refiner = init_refiner(SeededRng(config.refiner_seed), k, config.hidden,
                               config.refiner_arch, config.residual_enabled)
        opt = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    shuffle_rng = SeededRng(config.refiner_seed).child(0x5EED)

    z_mean = np.zeros(config.d0)
    for gen in range(1, config.generations + 1):
        sigma = fit_best = fit_mean = loss_ref = math.nan
        if state is not None:
            # refiner frozen while the prompt distribution moves
            pop = cmaes.ask(state, cma_rng)
            fits = np.empty(config.popsize)
            for i, z in enumerate(pop):
                fits[i] = fitness(oracle, train_handle, spec, refiner, z, labels, lam_in)
                report.queries_fitness += 1
            cmaes.tell(state, pop, fits)
            z_mean = cmaes.mean(state)
            sigma, fit_best, fit_mean = state.sigma, float(fits.min()), float(fits.mean())
        if refiner is not None:
            # prompt distribution frozen while the refiner trains
            y_in = oracle.predict(train_handle, build_prompts(spec, z_mean))
            report.queries_refine += 1
            loss_ref = train_epoch(refiner, opt, y_in, labels, lam_out, config.batch_size,
                                   shuffle_rng)
        acc_bb = acc_ref = math.nan
        if gen % config.eval_every == 0 or gen == config.generations:
            acc_bb, acc_ref = evaluate(eval_oracle, test_handle, spec, z_mean, refiner,
                                       task.labels_test)
        record = GenerationRecord(gen, report.queries_total, sigma, fit_best, fit_mean,
                                  loss_ref, acc_bb, acc_ref)
        report.records.append(record)
        if on_record is not None:
            on_record(record)
        log.debug("gen %d queries %d sigma %.3g fit %.4f acc %.4f/%.4f", gen,
                  record.queries_train, sigma, fit_best, acc_bb, acc_ref)

    charged = oracle.ledger.used - used_before
    if charged != report.queries_total or (planned_fit, planned_ref) != (
            report.queries_fitness, report.queries_refine):
        raise RuntimeError(f"query accounting mismatch: ledger charged {charged}, "
                           f"loop counted {report.queries_total}")
    report.final_latent = z_mean
    report.refiner = refiner
    last = report.records[-1]
    report.final_acc_blackbox = last.acc_test_blackbox
    report.final_acc_refined = last.acc_test_refined
    report.completed = True
    return report


COMPONENT_GRID = [
    ("PG", dict(prompt_enabled=True, refine_enabled=False, collaborative_enabled=False)),
    ("PR", dict(prompt_enabled=False, refine_enabled=True, collaborative_enabled=False)),
    ("PG+PR", dict(prompt_enabled=True, refine_enabled=True, collaborative_enabled=False)),
    ("PG+PR+Co", dict(prompt_enabled=True, refine_enabled=True, collaborative_enabled=True)),
]

REFINER_GRID = [
    ("no-residual/mlp", dict(residual_enabled=False, refiner_arch="mlp")),
    ("residual/linear", dict(residual_enabled=True, refiner_arch="linear")),
    ("residual/mlp", dict(residual_enabled=True, refiner_arch="mlp")),
]

ABLATION_COLUMNS = ["name", "prompt", "refine", "collaborative", "residual", "arch", "seeds",
                    "mean_acc", "std_acc", "per_seed"]


def ablate(base: TrainConfig, grid, task: FewShotTask, seeds, path=None) -> list[dict]:
    """Run every grid entry for every seed; one row of mean test accuracy per entry."""
    rows = []
    for name, overrides in grid:
        cfg = replace(base, **overrides)
        accs = [run(cfg.with_seed(s), task).final_acc_refined for s in seeds]
        rows.append({
            "name": name, "prompt": int(cfg.prompt_enabled), "refine": int(cfg.refine_enabled),
            "collaborative": int(cfg.collaborative_enabled), "residual": int(cfg.residual_enabled),
            "arch": cfg.refiner_arch, "seeds": len(accs), "mean_acc": float(np.mean(accs)),
            "std_acc": float(np.std(accs)), "per_seed": " ".join(f"{a:.4f}" for a in accs),
        })
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    return rows
