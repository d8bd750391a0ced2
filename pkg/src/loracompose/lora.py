"""Low-rank adapter modules and their weighted composition.

A module stores, for every adapted layer, a factor pair ``(A, B)`` with
``A`` of shape ``d x r`` and ``B`` of shape ``r x k``; the layer update is
the product ``A @ B``. Composition with coefficients ``w`` sums the factors
first and multiplies afterwards::

    A_hat = sum_i w_i A_i
    B_hat = sum_i w_i B_i
    delta = A_hat @ B_hat

which expands to ``sum_ij w_i w_j A_i B_j``, cross terms included. The
linear alternative ``sum_i w_i A_i B_i`` is available as
:func:`linear_delta` for comparison only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import IncompatibleModulesError, NotFoundError, ShapeError, WeightArityError
from .tensor import Matrix, as_matrix, frozen

DEFAULT_WEIGHT_BOUND = 1.5


@dataclass(frozen=True)
class LoraFactors:
    A: Matrix
    B: Matrix

    def __post_init__(self):
        a = frozen(as_matrix(self.A, "A"))
        b = frozen(as_matrix(self.B, "B"))
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "B", b)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.A.shape[0], self.B.shape[1])


@dataclass(frozen=True)
class LoraModule:
    """Per-layer low-rank factor pairs trained for one task.

    ``layers`` maps layer name to :class:`LoraFactors`; insertion order is
    the layer order of the base model.
    """

    name: str
    task_id: str
    rank: int
    layers: Mapping[str, LoraFactors]
    metadata: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.rank < 1:
            raise ShapeError(f"rank must be positive, got {self.rank}")
        layers = {}
        for lname, f in self.layers.items():
            if not isinstance(f, LoraFactors):
                f = LoraFactors(*f)
            if f.A.shape[1] != self.rank or f.B.shape[0] != self.rank:
                raise ShapeError(
                    f"layer {lname!r}: A is {f.A.shape}, B is {f.B.shape}, expected rank {self.rank}"
                )
            layers[lname] = f
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "metadata", dict(self.metadata))

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        return {n: f.shape for n, f in self.layers.items()}

    def delta(self, layer: str) -> Matrix:
        return effective_delta(self, layer)


@dataclass(frozen=True)
class ComposedModule(LoraModule):
    """A module produced by :func:`compose`; remembers where it came from."""

    sources: tuple[str, ...] = ()
    weights: tuple[float, ...] = ()


@dataclass(frozen=True)
class WeightVector:
    values: tuple[float, ...]
    bound: float = DEFAULT_WEIGHT_BOUND

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in np.ravel(self.values)))
        if not self.bound > 0:
            raise ValueError(f"bound must be positive, got {self.bound}")

    def __len__(self):
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.array(self.values, dtype=np.float64)

    def within_bound(self) -> bool:
        return all(abs(v) <= self.bound for v in self.values)


@dataclass
class CompatibilityReport:
    problems: list[tuple[str, str, str]]

    @property
    def ok(self) -> bool:
        return not self.problems

    def __bool__(self):
        return self.ok


def validate_compatibility(modules: Sequence[LoraModule]) -> CompatibilityReport:
    """Check that all modules share rank, layer names and layer shapes.

    The first module is the reference. Each problem is reported as a
    ``(module name, layer name, reason)`` triple.
    """
    problems = []
    if not modules:
        return CompatibilityReport(problems)
    ref = modules[0]
    ref_shapes = ref.layer_shapes()
    for m in modules[1:]:
        if m.rank != ref.rank:
            problems.append((m.name, "*", f"rank mismatch: {m.rank} vs {ref.rank}"))
        shapes = m.layer_shapes()
        for lname, shape in ref_shapes.items():
            if lname not in shapes:
                problems.append((m.name, lname, f"missing layer {lname!r}"))
            elif shapes[lname] != shape:
                problems.append((m.name, lname, f"shape mismatch: {shapes[lname]} vs {shape}"))
        for lname in shapes:
            if lname not in ref_shapes:
                problems.append((m.name, lname, f"unexpected layer {lname!r}"))
        if list(shapes) != list(ref_shapes) and set(shapes) == set(ref_shapes):
            problems.append((m.name, "*", "layer order differs"))
    return CompatibilityReport(problems)


def _weights_array(w, n: int) -> np.ndarray:
    values = w.as_array() if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64).ravel()
    if values.shape[0] != n:
        raise WeightArityError(f"got {values.shape[0]} weights for {n} modules")
    return values


def compose(modules: Sequence[LoraModule], w, name: str = "composed") -> ComposedModule:
    """Weighted element-wise composition of ``modules``.

    Only the factors are combined here; ``A_hat @ B_hat`` is formed on
    demand by :func:`effective_delta`.
    """
    if not modules:
        raise IncompatibleModulesError([("<none>", "*", "need at least one module")])
    report = validate_compatibility(modules)
    if not report.ok:
        raise IncompatibleModulesError(report.problems)
    weights = _weights_array(w, len(modules))
    ref = modules[0]
    layers = {}
    for lname in ref.layers:
        a_hat = np.zeros_like(ref.layers[lname].A)
        b_hat = np.zeros_like(ref.layers[lname].B)
        for wi, m in zip(weights, modules):
            f = m.layers[lname]
            a_hat += wi * f.A
            b_hat += wi * f.B
        layers[lname] = LoraFactors(a_hat, b_hat)
    return ComposedModule(
        name=name,
        task_id=ref.task_id if len(modules) == 1 else "composed",
        rank=ref.rank,
        layers=layers,
        metadata={},
        sources=tuple(m.name for m in modules),
        weights=tuple(float(x) for x in weights),
    )


def effective_delta(module: LoraModule, layer: str) -> Matrix:
    try:
        f = module.layers[layer]
    except KeyError:
        raise NotFoundError(f"module {module.name!r} has no layer {layer!r}") from None
    return f.A @ f.B


def linear_delta(modules: Sequence[LoraModule], w, layer: str) -> Matrix:
    """``sum_i w_i A_i B_i``: the cross-term-free reading of composition."""
    weights = _weights_array(w, len(modules))
    return sum(wi * effective_delta(m, layer) for wi, m in zip(weights, modules))


def zero_module(like: LoraModule, name: str = "zero") -> LoraModule:
    layers = {n: LoraFactors(np.zeros_like(f.A), np.zeros_like(f.B)) for n, f in like.layers.items()}
    return LoraModule(name=name, task_id=like.task_id, rank=like.rank, layers=layers)
