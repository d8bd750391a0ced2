"""One test per acceptance criterion; each prints a PASS/FAIL line."""
import time

import numpy as np
import pytest

from conftest import double_sum, fd_gradients, random_module, rel_fro
from loracompose import cli
from loracompose.cmaes import CmaesConfig, minimize
from loracompose.hub import decode_module, encode_module, load_module, save_module
from loracompose.lora import LoraModule, compose, effective_delta
from loracompose.model import Batch, LoraTrainConfig, init_model, lora_backward, train_lora
from loracompose.pipeline import AdaptConfig, ExperimentSpec, adapt, few_shot, run_experiment
from loracompose.tensor import make_rng


def test_a1_composition_matches_double_sum(report_line):
    start = time.perf_counter()
    worst = 0.0
    for case in range(1000):
        g = make_rng(case)
        n, d, k, r = (int(v) for v in (g.integers(1, 6), g.integers(1, 17), g.integers(1, 17), g.integers(1, 5)))
        mods = [random_module(g, {"L": (d, k)}, r, name=f"m{i}") for i in range(n)]
        w = g.uniform(-1.5, 1.5, n)
        worst = max(worst, rel_fro(effective_delta(compose(mods, w), "L"), double_sum(mods, w, "L")))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 10
    report_line("A1", ok, f"worst relative Frobenius error {worst:.2e} over 1000 cases in {elapsed:.1f}s")
    assert ok


def test_a2_gradients_match_finite_differences(report_line):
    start = time.perf_counter()
    worst = 0.0
    for case in range(100):
        g = make_rng(case)
        dims = tuple(int(v) for v in g.integers(2, 7, size=int(g.integers(2, 4))))
        model = init_model(case, dims)
        mod = random_module(g, model.layer_shapes(), int(g.integers(1, 4)), scale=0.5)
        n = int(g.integers(1, 6))
        batch = Batch(g.standard_normal((n, dims[0])), g.integers(0, dims[-1], n))
        _, grads = lora_backward(model, mod, batch)
        for (lname, key), num in fd_gradients(model, mod, batch, h=1e-5).items():
            ana = (grads.dA if key == "A" else grads.dB)[lname]
            scale = np.maximum(np.abs(ana), np.abs(num))
            # entries that are exactly zero both ways agree
            err = np.divide(np.abs(ana - num), scale, out=np.zeros_like(scale), where=scale > 0)
            worst = max(worst, float(err.max()))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 30
    report_line("A2", ok, f"worst elementwise relative error {worst:.2e} over 100 configurations in {elapsed:.1f}s")
    assert ok


def rosenbrock(x):
    return float(np.sum(100 * (x[1:] - x[:-1] ** 2) ** 2 + (1 - x[:-1]) ** 2))


def test_a3_cmaes_converges(report_line):
    start = time.perf_counter()
    sphere = lambda x: float(np.sum((x - 0.5) ** 2))
    sph = [minimize(sphere, CmaesConfig(dim=20, budget=2000), make_rng(s)).best_value for s in range(10)]
    ros = [minimize(rosenbrock, CmaesConfig(dim=5, budget=20000), make_rng(s)).best_value for s in range(10)]
    elapsed = time.perf_counter() - start
    n_sph = sum(v < 1e-6 for v in sph)
    n_ros = sum(v < 1e-3 for v in ros)
    ok = n_sph == 10 and n_ros >= 9 and elapsed < 60
    report_line("A3", ok, f"sphere {n_sph}/10 below 1e-6, Rosenbrock {n_ros}/10 below 1e-3, {elapsed:.1f}s")
    assert ok


def test_a4_target_module_gets_largest_weight(world, report_line):
    start = time.perf_counter()
    upstream = [world.modules[s.task_id] for s in world.suite.upstream]
    hits = 0
    for run in range(20):
        spec = world.suite.unseen[run]
        data = world.data[spec.task_id]
        target = train_lora(world.base, data["train"], world.train_config, name="target", task_id=spec.task_id)
        g = make_rng(np.random.SeedSequence([run, 0xA4]))
        pool = [upstream[i] for i in g.choice(len(upstream), 19, replace=False)] + [target]
        order = g.permutation(20)
        pool = [pool[i] for i in order]
        q = few_shot(data["train"], 32, run, spec.task_id)
        rep = adapt(world.base, None, q, AdaptConfig(shots=32, budget=200, seed=run),
                    candidates=pool, task_id=spec.task_id)
        top = int(np.argmax(np.abs(rep.best_weights.as_array())))
        hits += rep.selected_module_names[top] == "target"
    elapsed = time.perf_counter() - start
    ok = hits >= 16 and elapsed < 300
    report_line("A4", ok, f"target module has the largest |w| in {hits}/20 runs (need 16), {elapsed:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def a5_results(world):
    ids = tuple(s.task_id for s in world.suite.unseen)
    start = time.perf_counter()
    res = run_experiment(ExperimentSpec(ids), world.base, world.modules, world.data)
    return res, time.perf_counter() - start


def test_a5_never_worse_than_zero_shot(a5_results, report_line):
    res, elapsed = a5_results
    invariant = all(r.best_objective <= r.zero_shot_objective for r in res.reports)
    zero = {r["task"]: r["accuracy"] for r in res.rows if r["method"] == "zero-shot"}
    lora = [r for r in res.rows if r["method"] == "lorahub"]
    wins = sum(r["accuracy"] >= zero[r["task"]] for r in lora)
    ok = invariant and wins >= 0.7 * len(lora) and elapsed < 600
    gain = np.mean([r["accuracy"] - zero[r["task"]] for r in lora])
    report_line("A5", ok, f"objective invariant held in all {len(res.reports)} runs; composed >= zero-shot "
                          f"in {wins}/{len(lora)} pairs (need 70%), mean gain {gain:+.3f}, {elapsed:.1f}s")
    assert ok


def test_a6_l1_shrinks_with_alpha(world, report_line):
    start = time.perf_counter()
    spec = world.suite.unseen[0]
    train = world.data[spec.task_id]["train"]
    medians = []
    for alpha in (0.0, 0.05, 0.5):
        l1 = [adapt(world.base, world.modules, few_shot(train, 5, s, spec.task_id),
                    AdaptConfig(alpha=alpha, seed=s), task_id=spec.task_id).l1 for s in range(10)]
        medians.append(float(np.median(l1)))
    elapsed = time.perf_counter() - start
    ok = medians[0] >= medians[1] >= medians[2] and elapsed < 180
    report_line("A6", ok, "median sum|w| for alpha 0, 0.05, 0.5: "
                          + ", ".join(f"{m:.3f}" for m in medians) + f", {elapsed:.1f}s")
    assert ok


def test_a7_show_defaults(capsys, report_line):
    assert cli.main(["--show-defaults"]) == 0
    lines = {}
    for ln in capsys.readouterr().out.splitlines():
        key, value, source = ln.split(maxsplit=2)
        lines[key] = (value, source)
    expected = {"shots": "5", "budget": "40", "alpha": "0.05", "bound": "1.5", "candidates": "20",
                "initial_mean": "zeros", "rank": "16"}
    bad = [k for k, v in expected.items()
           if lines.get(k, ("", ""))[0] != v or not lines[k][1].startswith("reference setting")]
    report_line("A7", not bad, "all reference defaults reported" if not bad else f"mismatched: {bad}")
    assert not bad


def test_a8_adapt_is_byte_reproducible(world, tmp_path, report_line):
    ws = tmp_path / "ws"
    reg = ws / "registry"
    assert cli.main(["suite", "--suite", str(ws / "suite.json")]) == 0
    assert cli.main(["train", "--suite", str(ws / "suite.json"), "--registry", str(reg)]) == 0
    first, second = tmp_path / "r1", tmp_path / "r2"
    start = time.perf_counter()
    assert cli.main(["adapt", "--suite", str(ws / "suite.json"), "--registry", str(reg), "--out", str(first)]) == 0
    assert cli.main(["adapt", "--manifest", str(first / "manifest.json"), "--out", str(second)]) == 0
    elapsed = time.perf_counter() - start
    a, b = (first / "results.json").read_bytes(), (second / "results.json").read_bytes()
    ok = a == b
    report_line("A8", ok, f"two adapt runs from one manifest: results.json {'identical' if ok else 'differs'} "
                          f"({len(a)} bytes), {elapsed:.1f}s")
    assert ok


def special_module(g, i):
    shapes = {f"l{j}": (int(g.integers(1, 9)), int(g.integers(1, 9))) for j in range(int(g.integers(1, 4)))}
    rank = int(g.integers(1, 5))
    specials = np.array([0.0, -0.0, 5e-324, -5e-324, 2.2250738585072014e-308 / 7, np.inf, -np.inf, np.nan,
                         1.7976931348623157e308])
    layers = {}
    for name, (d, k) in shapes.items():
        a = g.standard_normal((d, rank)) * 10.0 ** g.integers(-300, 300, (d, rank))
        b = g.standard_normal((rank, k))
        mask = g.random(a.shape) < 0.3
        a[mask] = g.choice(specials, mask.sum())
        b.flat[0] = -0.0
        layers[name] = (a, b)
    return LoraModule(f"rand{i}", f"task{i}", rank, layers, {"i": i})


def test_a9_serialization_round_trip(tmp_path, report_line):
    g = make_rng(9)
    bad = []
    for i in range(200):
        m = special_module(g, i)
        save_module(m, tmp_path)
        for got in (load_module(m.name, tmp_path), decode_module(encode_module(m))):
            same = all(got.layers[n].A.tobytes() == m.layers[n].A.tobytes()
                       and got.layers[n].B.tobytes() == m.layers[n].B.tobytes()
                       and got.layers[n].shape == m.layers[n].shape for n in m.layers)
            if not same or list(got.layers) != list(m.layers) or got.rank != m.rank:
                bad.append(m.name)
    report_line("A9", not bad, "200 modules with subnormals and negative zeros round-trip bit-exactly"
                if not bad else f"{len(set(bad))} modules changed")
    assert not bad
