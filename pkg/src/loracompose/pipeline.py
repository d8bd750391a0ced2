"""Compose and adapt: few-shot search over composition weights.

Given a frozen base model and a registry of upstream modules, :func:`adapt`
draws a candidate pool, then searches the weight vector ``w`` that
minimizes the few-shot cross-entropy of the composed model plus an L1
penalty ``alpha * sum(|w_i|)``. The search is CMA-ES started from the zero
vector; the zero vector itself is evaluated first, so the chosen weights
are never worse on the few-shot examples than using no adapter at all.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .cmaes import CmaesConfig, minimize
from .errors import DataError, EmptyRegistryError, NotFoundError, WeightArityError
from .hub import DEFAULT_CANDIDATES, Registry, prefilter
from .lora import DEFAULT_WEIGHT_BOUND, ComposedModule, LoraModule, WeightVector, compose
from .model import BaseModel, Batch, cross_entropy, evaluate, forward
from .tensor import make_rng, stable_tag

SELECT_OBJECTIVE = "objective"
SELECT_LOSS = "loss"
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class AdaptConfig:
    alpha: float = 0.05
    shots: int = 5
    budget: int = 40
    bound: float = DEFAULT_WEIGHT_BOUND
    candidates: int = DEFAULT_CANDIDATES
    seed: int = 0
    initial_sigma: float = 0.5
    select: str = SELECT_OBJECTIVE

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        for key in ("shots", "budget", "candidates"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be >= 1, got {getattr(self, key)}")
        if not self.bound > 0:
            raise ValueError(f"bound must be positive, got {self.bound}")
        if self.select not in (SELECT_OBJECTIVE, SELECT_LOSS):
            raise ValueError(f"select must be {SELECT_OBJECTIVE!r} or {SELECT_LOSS!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def objective(w, modules: Sequence[LoraModule], model: BaseModel, q: Batch, alpha: float) -> float:
    """Few-shot cross-entropy of the composed model plus ``alpha * sum|w|``."""
    values = w.as_array() if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64).ravel()
    if len(q) == 0:
        raise DataError("objective needs at least one example")
    composed = compose(modules, values)
    # huge weights can overflow the logits; the search treats NaN as +inf
    with np.errstate(over="ignore", invalid="ignore"):
        loss = cross_entropy(forward(model, composed, q.inputs), q.labels)
    return loss + alpha * float(np.abs(values).sum())


def few_shot(batch: Batch, shots: int, seed: int, task_id: str = "") -> Batch:
    """``shots`` rows of ``batch`` drawn without replacement."""
    if len(batch) == 0:
        raise DataError("cannot draw examples from an empty batch")
    rng = make_rng(np.random.SeedSequence([seed, stable_tag(task_id), 0x5107]))
    idx = np.sort(rng.choice(len(batch), size=min(shots, len(batch)), replace=False))
    return batch.subset(idx)


@dataclass
class AdaptReport:
    best_weights: WeightVector
    best_objective: float
    zero_shot_objective: float
    history: list[tuple[tuple[float, ...], float]]
    selected_module_names: list[str]
    composed: ComposedModule
    eval_metrics: dict[str, float] | None = None
    warnings: list[str] = field(default_factory=list)
    config: AdaptConfig | None = None
    task_id: str = ""

    @property
    def l1(self) -> float:
        return float(np.abs(self.best_weights.as_array()).sum())

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "seed": None if self.config is None else self.config.seed,
            "candidates": list(self.selected_module_names),
            "best_weights": list(self.best_weights.values),
            "best_objective": _num(self.best_objective),
            "zero_shot_objective": _num(self.zero_shot_objective),
            "l1": self.l1,
            "eval_metrics": None if self.eval_metrics is None else {k: _num(v) for k, v in self.eval_metrics.items()},
            "history": [{"weights": list(w), "objective": _num(v)} for w, v in self.history],
            "warnings": list(self.warnings),
        }


def _num(v: float):
    """JSON-safe float: non-finite values become strings."""
    v = float(v)
    return v if math.isfinite(v) else str(v)


def _candidate_pool(registry, count: int, seed) -> tuple[list[str], list[LoraModule]]:
    if isinstance(registry, Registry):
        names = prefilter(registry.index, count, seed)
        return names, registry.load_many(names)
    if isinstance(registry, Mapping):
        if not registry:
            raise EmptyRegistryError("the registry holds no modules")
        names = prefilter(list(registry), count, seed)
        return names, [registry[n] for n in names]
    modules = list(registry)
    if not modules:
        raise EmptyRegistryError("the registry holds no modules")
    by_name = {m.name: m for m in modules}
    names = prefilter(list(by_name), count, seed)
    return names, [by_name[n] for n in names]


def adapt(model: BaseModel, registry, task_examples: Batch, config: AdaptConfig = AdaptConfig(),
          eval_batch: Batch | None = None, candidates: Sequence[LoraModule] | None = None,
          task_id: str = "") -> AdaptReport:
    """Search composition weights for one unseen task.

    ``registry`` is a :class:`Registry`, a name-to-module mapping, or a
    sequence of modules; ``config.candidates`` of them are drawn at random.
    Passing ``candidates`` skips the draw and uses those modules as given.
    With ``eval_batch`` the chosen composition is also scored on held-out
    data.
    """
    notes: list[str] = []
    if len(task_examples) == 0:
        raise DataError("adapt needs at least one example")
    if len(task_examples) < config.shots:
        notes.append(f"only {len(task_examples)} examples given, expected {config.shots}")
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
    elif len(task_examples) > config.shots:
        notes.append(f"{len(task_examples)} examples given; using {config.shots} drawn at random")
        task_examples = few_shot(task_examples, config.shots, config.seed, task_id)

    pool_seq, search_seq = np.random.SeedSequence(config.seed).spawn(2)
    if candidates is not None:
        modules = list(candidates)
        if not modules:
            raise EmptyRegistryError("no candidate modules given")
        names = [m.name for m in modules]
    else:
        names, modules = _candidate_pool(registry, config.candidates, pool_seq)

    n = len(modules)
    losses: list[float] = []

    def f(w: np.ndarray) -> float:
        v = objective(w, modules, model, task_examples, config.alpha)
        losses.append(v - config.alpha * float(np.abs(w).sum()))
        return v

    cma = CmaesConfig(dim=n, initial_mean=np.zeros(n), initial_sigma=config.initial_sigma,
                      bound=config.bound, budget=config.budget, seed=config.seed)
    zero = np.zeros(n)
    result = minimize(f, cma, make_rng(search_seq), initial_points=[zero])
    notes.extend(result.warnings)

    values = np.array([v for _, v in result.history])
    if config.select == SELECT_LOSS:
        key = np.where(np.isnan(losses), np.inf, losses)
    else:
        key = values
    i = int(np.argmin(key))
    best = result.history[i][0]
    composed = compose(modules, best, name=f"composed-{task_id or 'task'}-{config.seed}")
    metrics = None
    if eval_batch is not None:
        with np.errstate(over="ignore", invalid="ignore"):
            metrics = evaluate(model, composed, eval_batch)
    return AdaptReport(
        best_weights=WeightVector(best, config.bound),
        best_objective=float(values[i]),
        zero_shot_objective=float(values[0]),
        history=[(tuple(float(x) for x in w), float(v)) for w, v in result.history],
        selected_module_names=names,
        composed=composed,
        eval_metrics=metrics,
        warnings=notes,
        config=config,
        task_id=task_id,
    )


# -- analysis -------------------------------------------------------------

@dataclass(frozen=True)
class UsefulnessRow:
    module_name: str
    mean_abs_weight: float
    rank: int


@dataclass
class UsefulnessTable:
    rows: list[UsefulnessRow]

    def __len__(self):
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "module", "mean_abs_weight"])
        for r in self.rows:
            w.writerow([r.rank, r.module_name, repr(r.mean_abs_weight)])
        return buf.getvalue()


def usefulness(reports: Sequence) -> UsefulnessTable:
    """Mean absolute weight per module across reports, largest first.

    Reports may list their candidates in any order but must share the same
    set of module names. Ties are broken by module name.
    """
    if not reports:
        return UsefulnessTable([])
    ref = sorted(reports[0].selected_module_names)
    totals = dict.fromkeys(ref, 0.0)
    for rep in reports:
        names = list(rep.selected_module_names)
        w = rep.best_weights.as_array() if isinstance(rep.best_weights, WeightVector) else np.asarray(rep.best_weights)
        if sorted(names) != ref or len(w) != len(names):
            raise WeightArityError("reports do not share the same candidate modules")
        for name, v in zip(names, w):
            totals[name] += abs(float(v))
    means = [(name, totals[name] / len(reports)) for name in ref]
    means.sort(key=lambda t: (-t[1], t[0]))
    return UsefulnessTable([UsefulnessRow(n, m, i + 1) for i, (n, m) in enumerate(means)])


# -- experiments ----------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    task_ids: tuple[str, ...]
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    config: AdaptConfig = AdaptConfig()
    baselines: tuple[str, ...] = ("zero-shot", "lorahub")


@dataclass(frozen=True)
class TaskSummary:
    task_id: str
    zero_shot: float
    lorahub_avg: float
    lorahub_best: float
    zero_shot_loss: float
    lorahub_avg_loss: float


@dataclass
class ExperimentResults:
    spec: ExperimentSpec
    rows: list[dict]
    summaries: list[TaskSummary]
    reports: list[AdaptReport]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["task", "seed", "method", "loss", "accuracy"], lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "format_version": 1,
            "config": self.spec.config.to_dict(),
            "seeds": list(self.spec.seeds),
            "tasks": [{k: _num(v) if isinstance(v, float) else v for k, v in asdict(s).items()}
                      for s in self.summaries],
            "runs": [r.to_dict() for r in self.reports],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _one_run(args):
    model, registry, data, task_id, seed, config = args
    cfg = AdaptConfig(**{**config.to_dict(), "seed": seed})
    q = few_shot(data["train"], cfg.shots, seed, task_id)
    return adapt(model, registry, q, cfg, eval_batch=data["eval"], task_id=task_id)


def run_experiment(spec: ExperimentSpec, model: BaseModel, registry,
                   data: Mapping[str, Mapping[str, Batch]], jobs: int = 1) -> ExperimentResults:
    """Zero-shot and composed results for every (task, seed) pair.

    ``data`` maps task ids to ``{"train": Batch, "eval": Batch}``; the
    few-shot examples for seed ``s`` come from the train split and all
    metrics from the eval split.
    """
    for t in spec.task_ids:
        if t not in data:
            raise NotFoundError(f"unknown task id {t!r}")
    if isinstance(registry, Registry):
        registry = {n: registry.load(n) for n in registry.names()}
    jobs_list = [(model, registry, data[t], t, s, spec.config) for t in spec.task_ids for s in spec.seeds]
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            reports = list(ex.map(_one_run, jobs_list))
    else:
        reports = [_one_run(a) for a in jobs_list]

    rows, summaries = [], []
    k = 0
    for t in spec.task_ids:
        zero = evaluate(model, None, data[t]["eval"])
        accs, losses = [], []
        for s in spec.seeds:
            rep = reports[k]
            k += 1
            rows.append({"task": t, "seed": s, "method": "zero-shot", "loss": zero["loss"], "accuracy": zero["accuracy"]})
            m = rep.eval_metrics
            rows.append({"task": t, "seed": s, "method": "lorahub", "loss": m["loss"], "accuracy": m["accuracy"]})
            accs.append(m["accuracy"])
            losses.append(m["loss"])
        summaries.append(TaskSummary(t, zero["accuracy"], float(np.mean(accs)), float(np.max(accs)),
                                     zero["loss"], float(np.mean(losses))))
    return ExperimentResults(spec, rows, summaries, reports)
