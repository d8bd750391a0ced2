"""Command-line entry point: ``loracompose {suite,train,adapt,analyze}``.

A typical session::

    loracompose suite --seed 7
    loracompose train
    loracompose adapt
    loracompose analyze

Files default to a workspace directory taken from ``$LORAHUB_HOME`` (or
``./lorahub``): ``suite.json``, the ``registry/`` directory with the base
model, and ``results/`` with ``results.csv``, ``results.json``,
``manifest.json``, ``report.md`` and ``usefulness.csv``.

Exit codes: 0 success, 1 internal error, 2 usage or configuration error,
3 state error (for example an empty registry).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .errors import EmptyRegistryError, LoraComposeError, NotFoundError, SpecError, StorageError
from .hub import Registry, load_base, save_base
from .model import LoraTrainConfig, PretrainConfig, evaluate, pretrain_base, train_lora
from .pipeline import AdaptConfig, ExperimentSpec, UsefulnessTable, run_experiment, usefulness
from .taskgen import Suite, generate, make_suite

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_STATE = 0, 1, 2, 3
BASE_FILE = "base.npz"


@dataclass(frozen=True)
class Default:
    key: str
    value: object
    source: str


DEFAULTS = (
    Default("shots", 5, "reference setting: five few-shot examples per unseen task"),
    Default("budget", 40, "reference setting: at most 40 loss evaluations per search"),
    Default("alpha", 0.05, "reference setting: L1 coefficient on the weights"),
    Default("bound", 1.5, "reference setting: every |w_i| at most 1.5"),
    Default("candidates", 20, "reference setting: 20 randomly chosen modules"),
    Default("initial_mean", "zeros", "reference setting: search starts with all weights at zero"),
    Default("rank", 16, "reference setting: adapter rank 16"),
    Default("seeds", 5, "reference setting: results averaged over five runs"),
    Default("initial_sigma", 0.5, "desk choice: covers the weight box from zero within three sigma"),
    Default("lora_lr", LoraTrainConfig.lr, "desk choice: 1e-4 at large scale, raised for a small MLP"),
    Default("lora_epochs", LoraTrainConfig.epochs, "reference setting: 10 epochs"),
    Default("lora_batch_size", LoraTrainConfig.batch_size, "reference setting: batch size 64"),
    Default("lora_init_std", LoraTrainConfig.init_std, "desk choice: std of the A factor at init"),
    Default("upstream", 40, "desk choice: number of upstream tasks"),
    Default("unseen", 20, "desk choice: number of unseen tasks"),
)
DEFAULT_VALUES = {d.key: d.value for d in DEFAULTS}


class UsageError(Exception):
    pass


class StateError(Exception):
    pass


def home() -> Path:
    return Path(os.environ.get("LORAHUB_HOME", "lorahub"))


def _positive(kind):
    def parse(text):
        v = kind(text)
        if v < 1:
            raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
        return v
    return parse


def _non_negative(text):
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="loracompose", description="Compose LoRA modules for unseen tasks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--show-defaults", action="store_true", help="print every default and where it comes from")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--suite", type=Path, default=None, help="suite manifest (default $LORAHUB_HOME/suite.json)")
        sp.add_argument("--registry", type=Path, default=None, help="module registry (default $LORAHUB_HOME/registry)")
        sp.add_argument("--jobs", type=_positive(int), default=1)

    sp = sub.add_parser("suite", help="write a task suite manifest")
    common(sp)
    sp.add_argument("--upstream", type=_positive(int), default=DEFAULT_VALUES["upstream"])
    sp.add_argument("--unseen", type=_positive(int), default=DEFAULT_VALUES["unseen"])

    sp = sub.add_parser("train", help="pretrain the base model and train one module per upstream task")
    common(sp)
    sp.add_argument("--rank", type=_positive(int), default=DEFAULT_VALUES["rank"])

    sp = sub.add_parser("adapt", help="compose modules for every unseen task")
    common(sp)
    sp.add_argument("--shots", type=_positive(int), default=DEFAULT_VALUES["shots"])
    sp.add_argument("--budget", type=_positive(int), default=DEFAULT_VALUES["budget"])
    sp.add_argument("--alpha", type=_non_negative, default=DEFAULT_VALUES["alpha"])
    sp.add_argument("--bound", type=float, default=DEFAULT_VALUES["bound"])
    sp.add_argument("--candidates", type=_positive(int), default=DEFAULT_VALUES["candidates"])
    sp.add_argument("--seeds", type=_positive(int), default=DEFAULT_VALUES["seeds"],
                    help="number of runs per task; run seeds are SEED, SEED+1, ...")
    sp.add_argument("--select", choices=("objective", "loss"), default="objective",
                    help="pick the final weights by regularized objective or by raw loss")
    sp.add_argument("--tasks", nargs="*", default=None, help="unseen task ids (default: all)")
    sp.add_argument("--out", type=Path, default=None, help="results directory (default $LORAHUB_HOME/results)")
    sp.add_argument("--manifest", type=Path, default=None, help="replay the configuration of a previous run")

    sp = sub.add_parser("analyze", help="usefulness table and markdown report from results.json")
    sp.add_argument("--results", type=Path, default=None, help="results directory (default $LORAHUB_HOME/results)")
    sp.add_argument("--top", type=int, default=5)
    return p


def show_defaults(out=None) -> None:
    out = out or sys.stdout
    width = max(len(d.key) for d in DEFAULTS)
    for d in DEFAULTS:
        print(f"{d.key:<{width}}  {d.value!s:<8}  {d.source}", file=out)


def _suite_path(args) -> Path:
    return args.suite or home() / "suite.json"


def _registry_path(args) -> Path:
    return args.registry or home() / "registry"


def _load_suite(path: Path) -> Suite:
    if not path.exists():
        raise UsageError(f"no suite at {path}; run `loracompose suite` first")
    try:
        return Suite.load(path)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"{path} is not a suite manifest: {exc}") from exc


def cmd_suite(args) -> int:
    suite = make_suite(args.seed, args.upstream, args.unseen)
    path = _suite_path(args)
    path.parent.mkdir(parents=True, exist_ok=True)
    suite.save(path)
    print(f"wrote {path}: {len(suite.upstream)} upstream + {len(suite.unseen)} unseen = {len(suite.all_specs())} tasks")
    return EXIT_OK


def _train_one(job):
    base, spec_dict, cfg = job
    from .taskgen import TaskSpec
    spec = TaskSpec.from_dict(spec_dict)
    data = generate(spec)
    module = train_lora(base, data["train"], cfg, name=spec.task_id, task_id=spec.task_id)
    return module, evaluate(base, module, data["train"]), evaluate(base, module, data["eval"])


def ensure_base(suite: Suite, root: Path, seed: int):
    path = root / BASE_FILE
    if path.exists():
        return load_base(path)
    print(f"pretraining base model on {len(suite.upstream)} upstream tasks")
    data = [generate(s)["train"] for s in suite.upstream]
    base = pretrain_base(data, PretrainConfig(seed=seed))
    save_base(base, path)
    return base


def cmd_train(args) -> int:
    suite = _load_suite(_suite_path(args))
    root = _registry_path(args)
    root.mkdir(parents=True, exist_ok=True)
    base = ensure_base(suite, root, args.seed)
    reg = Registry(root)
    cfg = LoraTrainConfig(rank=args.rank, seed=args.seed)
    todo = []
    for spec in suite.upstream:
        if spec.task_id in reg and reg.verify(spec.task_id):
            print(f"{spec.task_id}: already registered, checksum ok, skipped")
            continue
        if spec.task_id in reg:
            raise StateError(f"{spec.task_id} is registered but its file fails the checksum; "
                             f"remove it from {root} and rerun")
        todo.append((base, spec.to_dict(), cfg))
    if args.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = ex.map(_train_one, todo)
            _save_all(reg, results)
    else:
        _save_all(reg, map(_train_one, todo))
    print(f"registry {root}: {len(reg.refresh())} modules")
    return EXIT_OK


def _save_all(reg: Registry, results) -> None:
    print(f"{'task':<22} {'train_loss':>10} {'train_acc':>9} {'eval_acc':>8}")
    for module, tr, ev in results:
        reg.save(module)
        print(f"{module.name:<22} {tr['loss']:>10.4f} {tr['accuracy']:>9.3f} {ev['accuracy']:>8.3f}")


def _adapt_settings(args) -> dict:
    if args.manifest is not None:
        if not args.manifest.exists():
            raise UsageError(f"no manifest at {args.manifest}")
        return json.loads(args.manifest.read_text())["config"]
    return {
        "alpha": args.alpha, "shots": args.shots, "budget": args.budget, "bound": args.bound,
        "candidates": args.candidates, "select": args.select,
        "seeds": list(range(args.seed, args.seed + args.seeds)),
        "tasks": args.tasks,
        "suite": str(_suite_path(args)), "registry": str(_registry_path(args)),
    }


def cmd_adapt(args) -> int:
    settings = _adapt_settings(args)
    suite = _load_suite(Path(settings["suite"]))
    root = Path(settings["registry"])
    reg = Registry(root)
    if not (root / BASE_FILE).exists() or len(reg) == 0:
        raise StateError(f"registry {root} is empty; run `loracompose train` first")
    base = load_base(root / BASE_FILE)
    unseen = {s.task_id: s for s in suite.unseen}
    tasks = settings["tasks"] or list(unseen)
    missing = [t for t in tasks if t not in unseen]
    if missing:
        raise UsageError(f"unknown unseen task ids: {missing}")
    try:
        config = AdaptConfig(alpha=settings["alpha"], shots=settings["shots"], budget=settings["budget"],
                             bound=settings["bound"], candidates=settings["candidates"], select=settings["select"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    spec = ExperimentSpec(tuple(tasks), tuple(settings["seeds"]), config)
    data = {t: generate(unseen[t]) for t in tasks}
    started = time.perf_counter()
    results = run_experiment(spec, base, reg, data, jobs=args.jobs)
    elapsed = time.perf_counter() - started

    out = args.out or home() / "results"
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(results.to_csv())
    (out / "results.json").write_text(results.to_json())
    manifest = {
        "tool": "loracompose",
        "version": __version__,
        "config": settings,
        "defaults": {d.key: d.value for d in DEFAULTS},
        "timings": {"adapt_seconds": round(elapsed, 3)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for s in results.summaries:
        print(f"{s.task_id:<20} zero {s.zero_shot:.3f}  avg {s.lorahub_avg:.3f}  best {s.lorahub_best:.3f}")
    print(f"wrote {out / 'results.csv'} and {out / 'results.json'}")
    return EXIT_OK


def usefulness_from_runs(runs: list[dict]) -> tuple[UsefulnessTable, int]:
    """Usefulness over the runs that share the first run's candidate set."""
    @dataclass
    class _Run:
        selected_module_names: list
        best_weights: list

    ref = sorted(runs[0]["candidates"])
    group = [_Run(r["candidates"], r["best_weights"]) for r in runs if sorted(r["candidates"]) == ref]
    return usefulness(group), len(group)


def render_report(doc: dict, table: UsefulnessTable, n_runs: int, top: int) -> str:
    lines = ["# Composition results", "", "Accuracy on each unseen task's eval split.", "",
             "| Task | Zero | LoraHub_avg | LoraHub_best |", "|---|---|---|---|"]
    tasks = doc["tasks"]
    for t in tasks:
        lines.append(f"| {t['task_id']} | {t['zero_shot']:.4f} | {t['lorahub_avg']:.4f} | {t['lorahub_best']:.4f} |")
    if tasks:
        mean = lambda k: float(np.mean([t[k] for t in tasks]))
        lines.append(f"| **Average** | {mean('zero_shot'):.4f} | {mean('lorahub_avg'):.4f} | {mean('lorahub_best'):.4f} |")
    lines += ["", f"## Most useful modules ({n_runs} runs sharing one candidate pool)", "",
              "| Rank | Module | Mean abs weight |", "|---|---|---|"]
    for r in table.rows[:top]:
        lines.append(f"| {r.rank} | {r.module_name} | {r.mean_abs_weight:.4f} |")
    return "\n".join(lines) + "\n"


def cmd_analyze(args) -> int:
    out = args.results or home() / "results"
    path = out / "results.json"
    if not path.exists():
        raise UsageError(f"no results at {path}; run `loracompose adapt` first")
    doc = json.loads(path.read_text())
    if not doc["runs"]:
        raise StateError(f"{path} holds no runs")
    table, n_runs = usefulness_from_runs(doc["runs"])
    (out / "usefulness.csv").write_text(table.to_csv())
    report = render_report(doc, table, n_runs, args.top)
    (out / "report.md").write_text(report)
    sys.stdout.write(report)
    return EXIT_OK


COMMANDS = {"suite": cmd_suite, "train": cmd_train, "adapt": cmd_adapt, "analyze": cmd_analyze}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.show_defaults:
        show_defaults()
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StateError, EmptyRegistryError, NotFoundError, StorageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except LoraComposeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
