"""Small frozen MLP classifier with low-rank adapter paths.

Every dense layer computes ``x @ (W + A @ B) + b``; hidden layers apply
ReLU and the last layer emits logits. Upstream adapters are trained with
plain minibatch SGD on the adapter factors only; the base weights never
change once :func:`pretrain_base` has returned.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, IncompatibleModulesError, LabelError, ShapeError
from .lora import LoraFactors, LoraModule
from .tensor import Matrix, as_matrix, frozen, gaussian_matrix, make_rng, stable_tag

DEFAULT_DIMS = (32, 64, 64, 8)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_dim: int
    out_dim: int
    activation: str = "relu"


@dataclass(frozen=True)
class BaseModel:
    layer_specs: tuple[LayerSpec, ...]
    weights: Mapping[str, Matrix]
    biases: Mapping[str, np.ndarray]
    frozen: bool = True

    def __post_init__(self):
        specs = tuple(self.layer_specs)
        if not specs:
            raise ShapeError("model needs at least one layer")
        for prev, cur in zip(specs, specs[1:]):
            if prev.out_dim != cur.in_dim:
                raise ShapeError(f"layer {cur.name!r} expects {cur.in_dim} inputs, {prev.name!r} gives {prev.out_dim}")
        if specs[-1].activation != "none":
            raise ShapeError("final layer must have activation 'none'")
        weights, biases = {}, {}
        for s in specs:
            if s.activation not in ("relu", "none"):
                raise ValueError(f"unknown activation {s.activation!r}")
            w = np.asarray(self.weights[s.name], dtype=np.float64)
            b = np.asarray(self.biases[s.name], dtype=np.float64).ravel()
            if w.shape != (s.in_dim, s.out_dim) or b.shape != (s.out_dim,):
                raise ShapeError(f"layer {s.name!r}: weight {w.shape}, bias {b.shape}")
            weights[s.name] = frozen(w) if self.frozen else w.copy()
            biases[s.name] = frozen(b) if self.frozen else b.copy()
        object.__setattr__(self, "layer_specs", specs)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def in_dim(self) -> int:
        return self.layer_specs[0].in_dim

    @property
    def n_classes(self) -> int:
        return self.layer_specs[-1].out_dim

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        return {s.name: (s.in_dim, s.out_dim) for s in self.layer_specs}

    def merged(self, adapter: LoraModule) -> "BaseModel":
        """A copy whose weights are ``W + A @ B`` for every adapted layer."""
        check_adapter(self, adapter)
        weights = {
            n: w + (adapter.layers[n].A @ adapter.layers[n].B if n in adapter.layers else 0.0)
            for n, w in self.weights.items()
        }
        return BaseModel(self.layer_specs, weights, self.biases)


@dataclass(frozen=True)
class Batch:
    inputs: Matrix
    labels: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] < 1:
            raise ShapeError(f"inputs must be an n x d matrix, got shape {x.shape}")
        y = np.asarray(self.labels)
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise ShapeError(f"{x.shape[0]} inputs but labels have shape {y.shape}")
        if y.size and (not np.issubdtype(y.dtype, np.integer) or y.min() < 0):
            raise LabelError("labels must be non-negative integers")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(self.inputs[idx], self.labels[idx])


def init_model(seed: int, dims: Sequence[int] = DEFAULT_DIMS) -> BaseModel:
    """He-initialised MLP with layers ``fc1 .. fcN``; biases start at zero."""
    rng = make_rng(seed)
    specs, weights, biases = [], {}, {}
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        name = f"fc{i + 1}"
        last = i == len(dims) - 2
        specs.append(LayerSpec(name, a, b, "none" if last else "relu"))
        weights[name] = gaussian_matrix(rng, a, b, np.sqrt(2.0 / a))
        biases[name] = np.zeros(b)
    return BaseModel(tuple(specs), weights, biases, frozen=False)


def check_adapter(model: BaseModel, adapter: LoraModule | None) -> None:
    if adapter is None:
        return
    shapes = model.layer_shapes()
    problems = []
    for lname, shape in adapter.layer_shapes().items():
        if lname not in shapes:
            problems.append((adapter.name, lname, "layer not in base model"))
        elif shapes[lname] != shape:
            problems.append((adapter.name, lname, f"shape {shape} vs base {shapes[lname]}"))
    if problems:
        raise IncompatibleModulesError(problems)


def _check_inputs(model: BaseModel, inputs) -> Matrix:
    x = as_matrix(inputs, "inputs")
    if x.shape[1] != model.in_dim:
        raise ShapeError(f"inputs have {x.shape[1]} columns, model expects {model.in_dim}")
    return x


def forward(model: BaseModel, adapter: LoraModule | None, inputs: Matrix) -> Matrix:
    """Logits of ``model`` with ``adapter`` injected (or none)."""
    check_adapter(model, adapter)
    h = _check_inputs(model, inputs)
    for s in model.layer_specs:
        w = model.weights[s.name]
        if adapter is not None and s.name in adapter.layers:
            f = adapter.layers[s.name]
            w = w + f.A @ f.B
        h = h @ w + model.biases[s.name]
        if s.activation == "relu":
            h = np.maximum(h, 0.0)
    return h


def _check_labels(logits: Matrix, labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise ShapeError(f"{logits.shape[0]} logit rows but {y.shape} labels")
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise LabelError(f"labels must lie in [0, {logits.shape[1]})")
    return y.astype(np.int64)


def log_softmax(logits: Matrix) -> Matrix:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: Matrix, labels) -> float:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = as_matrix(logits, "logits")
    y = _check_labels(logits, labels)
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(y)), y].mean())


@dataclass
class LoraGradients:
    dA: dict[str, Matrix]
    dB: dict[str, Matrix]


def _backprop(model: BaseModel, adapter: LoraModule | None, batch: Batch, want_base: bool):
    check_adapter(model, adapter)
    x = _check_inputs(model, batch.inputs)
    merged, hs, zs = {}, [x], []
    h = x
    for s in model.layer_specs:
        w = model.weights[s.name]
        if adapter is not None and s.name in adapter.layers:
            f = adapter.layers[s.name]
            w = w + f.A @ f.B
        merged[s.name] = w
        z = h @ w + model.biases[s.name]
        zs.append(z)
        h = np.maximum(z, 0.0) if s.activation == "relu" else z
        hs.append(h)
    y = _check_labels(h, batch.labels)
    n = len(y)
    lp = log_softmax(h)
    loss = float(-lp[np.arange(n), y].mean())

    delta = np.exp(lp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads_w, grads_b = {}, {}
    for i in range(len(model.layer_specs) - 1, -1, -1):
        s = model.layer_specs[i]
        if s.activation == "relu":
            delta = delta * (zs[i] > 0)
        grads_w[s.name] = hs[i].T @ delta
        if want_base:
            grads_b[s.name] = delta.sum(axis=0)
        if i:
            delta = delta @ merged[s.name].T
    return loss, grads_w, grads_b


def lora_backward(model: BaseModel, module: LoraModule, batch: Batch) -> tuple[float, LoraGradients]:
    """Loss and exact gradients with respect to every adapter factor.

    With ``M = W + A B`` and ``G = dL/dM`` the factor gradients are
    ``dA = G B^T`` and ``dB = A^T G``.
    """
    loss, gw, _ = _backprop(model, module, batch, want_base=False)
    dA, dB = {}, {}
    for lname, f in module.layers.items():
        g = gw[lname]
        dA[lname] = g @ f.B.T
        dB[lname] = f.A.T @ g
    return loss, LoraGradients(dA, dB)


@dataclass(frozen=True)
class LoraTrainConfig:
    """Upstream adapter training settings.

    The reference setting for large models is batch 64, learning rate
    1e-4, 10 epochs, rank 16. At this scale the learning rate is 1e-2 and
    ``A`` starts at std 0.1 rather than the customary 0.02; with the
    smaller init ten epochs leave ``B`` almost untouched.

    Every module trained with the same ``seed`` starts from the same ``A``,
    so a hub trained with one config shares its down-projections up to the
    drift of training, which keeps the cross terms of a composition
    aligned with the modules' own updates.
    """

    lr: float = 0.01
    epochs: int = 10
    batch_size: int = 64
    rank: int = 16
    seed: int = 0
    init_std: float = 0.1

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def init_lora(model: BaseModel, rank: int, seed: int, init_std: float = 0.1,
              name: str = "lora", task_id: str = "") -> LoraModule:
    """A ~ N(0, init_std^2), B = 0, for every layer of ``model``."""
    rng = make_rng(seed)
    layers = {
        s.name: LoraFactors(gaussian_matrix(rng, s.in_dim, rank, init_std), np.zeros((rank, s.out_dim)))
        for s in model.layer_specs
    }
    return LoraModule(name=name, task_id=task_id, rank=rank, layers=layers)


def _minibatches(n: int, batch_size: int, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_lora(model: BaseModel, data: Batch, config: LoraTrainConfig = LoraTrainConfig(),
               name: str = "lora", task_id: str = "", history: list | None = None,
               created: str = "") -> LoraModule:
    """Fit a fresh adapter to ``data`` with minibatch SGD.

    The factor init uses ``config.seed``; the shuffling stream is derived
    from the same seed and the task id. If ``history`` is a list, the mean
    training loss of each epoch is appended to it.
    """
    if len(data) == 0:
        raise DataError("cannot train on an empty batch")
    if config.rank < 1:
        raise ValueError("rank must be >= 1")
    module = init_lora(model, config.rank, config.seed, config.init_std, name, task_id)
    A = {n: f.A.copy() for n, f in module.layers.items()}
    B = {n: f.B.copy() for n, f in module.layers.items()}
    rng = make_rng(np.random.SeedSequence([config.seed, stable_tag(task_id)]))
    for _ in range(config.epochs):
        losses, sizes = [], []
        for idx in _minibatches(len(data), config.batch_size, rng):
            current = LoraModule(name, task_id, config.rank, {n: LoraFactors(A[n], B[n]) for n in A})
            loss, g = lora_backward(model, current, data.subset(idx))
            for n in A:
                A[n] -= config.lr * g.dA[n]
                B[n] -= config.lr * g.dB[n]
            losses.append(loss)
            sizes.append(len(idx))
        if history is not None:
            history.append(float(np.average(losses, weights=sizes)))
    meta = {"seed": config.seed, "config_digest": config.digest(), "created": created}
    return LoraModule(name, task_id, config.rank, {n: LoraFactors(A[n], B[n]) for n in A}, meta)


@dataclass(frozen=True)
class PretrainConfig:
    lr: float = 0.05
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    dims: tuple[int, ...] = DEFAULT_DIMS


def pretrain_base(data: Sequence[Batch] | Batch, config: PretrainConfig = PretrainConfig(),
                  history: list | None = None) -> BaseModel:
    """Full-parameter SGD on the pooled ``data``; returns a frozen model."""
    if isinstance(data, Batch):
        data = [data]
    data = [d for d in data if len(d)]
    if not data:
        raise DataError("cannot pretrain on empty data")
    pooled = Batch(np.vstack([d.inputs for d in data]), np.concatenate([d.labels for d in data]))
    model = init_model(config.seed, config.dims)
    W = {n: w.copy() for n, w in model.weights.items()}
    b = {n: v.copy() for n, v in model.biases.items()}
    rng = make_rng(np.random.SeedSequence([config.seed, 1]))
    for _ in range(config.epochs):
        losses = []
        for idx in _minibatches(len(pooled), config.batch_size, rng):
            current = BaseModel(model.layer_specs, W, b, frozen=False)
            loss, gw, gb = _backprop(current, None, pooled.subset(idx), want_base=True)
            for n in W:
                W[n] -= config.lr * gw[n]
                b[n] -= config.lr * gb[n]
            losses.append(loss)
        if history is not None:
            history.append(float(np.mean(losses)))
    return BaseModel(model.layer_specs, W, b, frozen=True)


def evaluate(model: BaseModel, adapter: LoraModule | None, batch: Batch) -> dict[str, float]:
    logits = forward(model, adapter, batch.inputs)
    loss = cross_entropy(logits, batch.labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == batch.labels))
    return {"loss": loss, "accuracy": acc, "exact_match": acc}
