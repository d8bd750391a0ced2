import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from loracompose import taskgen
from loracompose.lora import LoraModule
from loracompose.model import LoraTrainConfig, PretrainConfig, cross_entropy, forward, pretrain_base, train_lora
from loracompose.tensor import make_rng

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def report_line():
    def add(tag: str, ok: bool, detail: str):
        line = f"{tag}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return add


def random_module(rng, shapes, rank, name="m", task_id="t", scale=1.0):
    layers = {
        lname: (rng.standard_normal((d, rank)) * scale, rng.standard_normal((rank, k)) * scale)
        for lname, (d, k) in shapes.items()
    }
    return LoraModule(name, task_id, rank, layers)


def double_sum(modules, w, layer):
    """Brute-force sum over all ordered pairs of w_i w_j A_i B_j."""
    out = 0.0
    for wi, mi in zip(w, modules):
        for wj, mj in zip(w, modules):
            out = out + wi * wj * (mi.layers[layer].A @ mj.layers[layer].B)
    return out


def fd_gradients(model, module, batch, h=1e-5):
    """Central differences of the mean loss for every factor entry."""
    grads = {}
    for lname, f in module.layers.items():
        for key in ("A", "B"):
            base = getattr(f, key).copy()
            g = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                vals = []
                for step in (h, -h):
                    m = base.copy()
                    m[idx] += step
                    layers = dict(module.layers)
                    a, b = (m, f.B) if key == "A" else (f.A, m)
                    layers[lname] = (a, b)
                    probe = type(module)(module.name, module.task_id, module.rank, layers)
                    vals.append(cross_entropy(forward(model, probe, batch.inputs), batch.labels))
                g[idx] = (vals[0] - vals[1]) / (2 * h)
            grads[(lname, key)] = g
    return grads


@pytest.fixture
def rng():
    return make_rng(1234)


class World:
    """Default suite, its data, the pretrained base and one module per upstream task."""

    def __init__(self, seed=0):
        self.suite = taskgen.make_suite(seed)
        self.data = {s.task_id: taskgen.generate(s) for s in self.suite.all_specs()}
        self.base = pretrain_base([self.data[s.task_id]["train"] for s in self.suite.upstream],
                                  PretrainConfig(seed=seed))
        cfg = LoraTrainConfig(seed=seed)
        self.train_config = cfg
        self.modules = {
            s.task_id: train_lora(self.base, self.data[s.task_id]["train"], cfg, name=s.task_id, task_id=s.task_id)
            for s in self.suite.upstream
        }


@pytest.fixture(scope="session")
def world():
    return World(0)


@pytest.fixture
def small_shapes():
    return {"fc1": (6, 5), "fc2": (5, 4)}


def rel_fro(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)
