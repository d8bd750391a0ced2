"""Covariance matrix adaptation evolution strategy with a box and a budget.

Standard (mu/mu_w, lambda)-CMA-ES with log-rank recombination weights,
cumulative step-size adaptation, and rank-one plus rank-mu covariance
updates, using the usual default strategy parameters. Sampled points are
clipped coordinatewise into ``[-bound, bound]`` and the clipped points are
what the caller evaluates and tells back.

The budget counts objective evaluations, not generations. When fewer than
``lambda`` evaluations remain, :meth:`CmaesState.ask` returns a truncated
population; telling a truncated population only updates the best-so-far
record, since the recombination weights are defined for a full one.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BudgetExhaustedError, ShapeError
from .tensor import Rng

EIGEN_FLOOR = 1e-14


def default_popsize(n: int) -> int:
    return 4 + int(3 * math.log(n))


@dataclass
class CmaesConfig:
    dim: int
    initial_mean: np.ndarray | None = None
    initial_sigma: float = 0.5
    popsize: int | None = None
    parents: int | None = None
    bound: float = 1.5
    budget: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.initial_mean is None:
            self.initial_mean = np.zeros(self.dim)
        self.initial_mean = np.asarray(self.initial_mean, dtype=np.float64).copy()
        if self.initial_mean.shape != (self.dim,):
            raise ShapeError(f"initial_mean has shape {self.initial_mean.shape}, expected ({self.dim},)")
        if self.popsize is None:
            self.popsize = default_popsize(self.dim)
        if self.parents is None:
            self.parents = self.popsize // 2
        if not 1 <= self.parents <= self.popsize:
            raise ValueError(f"need 1 <= mu <= lambda, got mu={self.parents}, lambda={self.popsize}")
        if not self.initial_sigma > 0 or not self.bound > 0:
            raise ValueError("initial_sigma and bound must be positive")
        if self.budget < 1:
            raise ValueError("budget must be positive")


class CmaesState:
    """Mutable search state driven through :meth:`ask` and :meth:`tell`."""

    def __init__(self, config: CmaesConfig):
        self.config = config
        n = config.dim
        lam, mu = config.popsize, config.parents
        raw = math.log((lam + 1) / 2) - np.log(np.arange(1, mu + 1))
        if mu == 1:
            raw = np.ones(1)
        self.weights = raw / raw.sum()
        self.mueff = 1.0 / np.sum(self.weights ** 2)
        self.cc = (4 + self.mueff / n) / (n + 4 + 2 * self.mueff / n)
        self.cs = (self.mueff + 2) / (n + self.mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + self.mueff)
        self.cmu = min(1 - self.c1, 2 * (self.mueff - 2 + 1 / self.mueff) / ((n + 2) ** 2 + self.mueff))
        self.damps = 1 + 2 * max(0.0, math.sqrt((self.mueff - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n ** 2))

        self.mean = np.clip(config.initial_mean, -config.bound, config.bound)
        self.sigma = float(config.initial_sigma)
        self.C = np.eye(n)
        self.p_sigma = np.zeros(n)
        self.p_c = np.zeros(n)
        self.generation = 0
        self.evals_used = 0
        self.best_point = self.mean.copy()
        self.best_value = math.inf
        self._eigvals = np.ones(n)
        self._eigvecs = np.eye(n)
        self._pending = 0

    @property
    def remaining(self) -> int:
        return self.config.budget - self.evals_used

    def _decompose(self):
        self.C = (self.C + self.C.T) / 2
        vals, vecs = np.linalg.eigh(self.C)
        if vals.min() < EIGEN_FLOOR:
            vals = np.maximum(vals, EIGEN_FLOOR)
            self.C = (vecs * vals) @ vecs.T
            self.C = (self.C + self.C.T) / 2
        self._eigvals, self._eigvecs = vals, vecs

    def ask(self, rng: Rng) -> np.ndarray:
        """Sample up to ``lambda`` clipped points, one per row."""
        if self.remaining <= 0:
            raise BudgetExhaustedError(f"budget of {self.config.budget} evaluations used up")
        k = min(self.config.popsize, self.remaining)
        z = rng.standard_normal((k, self.config.dim))
        y = (z * np.sqrt(self._eigvals)) @ self._eigvecs.T
        x = self.mean + self.sigma * y
        self._pending = k
        return np.clip(x, -self.config.bound, self.config.bound)

    def record(self, points, values) -> None:
        """Account for evaluations without touching the distribution."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        values = np.asarray(values, dtype=np.float64).ravel()
        if points.shape[0] != values.shape[0]:
            raise ShapeError(f"{points.shape[0]} points but {values.shape[0]} values")
        self.evals_used += len(values)
        if len(values):
            i = int(np.argmin(values))
            if values[i] < self.best_value:
                self.best_value = float(values[i])
                self.best_point = points[i].copy()

    def tell(self, points, values) -> "CmaesState":
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        values = np.asarray(values, dtype=np.float64).ravel()
        if points.shape[0] != values.shape[0]:
            raise ShapeError(f"{points.shape[0]} points but {values.shape[0]} values")
        if points.shape[1] != self.config.dim:
            raise ShapeError(f"points have dimension {points.shape[1]}, expected {self.config.dim}")
        # ties broken on coordinates so the update ignores input order
        order = np.lexsort(tuple(points.T[::-1]) + (values,))
        points, values = points[order], values[order]
        self.record(points, values)
        self._pending = 0
        if len(values) < self.config.popsize:
            return self

        n, mu, cfg = self.config.dim, self.config.parents, self.config
        self.generation += 1
        old = self.mean
        ys = (points[:mu] - old) / self.sigma
        yw = self.weights @ ys
        self.mean = old + self.sigma * yw

        inv_sqrt = (self._eigvecs / np.sqrt(self._eigvals)) @ self._eigvecs.T
        self.p_sigma = (1 - self.cs) * self.p_sigma + math.sqrt(self.cs * (2 - self.cs) * self.mueff) * (inv_sqrt @ yw)
        ps_norm = float(np.linalg.norm(self.p_sigma))
        hsig = ps_norm / math.sqrt(1 - (1 - self.cs) ** (2 * self.generation)) / self.chi_n < 1.4 + 2 / (n + 1)
        self.p_c = (1 - self.cc) * self.p_c + hsig * math.sqrt(self.cc * (2 - self.cc) * self.mueff) * yw

        c1a = self.c1 * (1 - (1 - hsig) * self.cc * (2 - self.cc))
        rank_mu = (ys.T * self.weights) @ ys
        self.C = (1 - c1a - self.cmu) * self.C + self.c1 * np.outer(self.p_c, self.p_c) + self.cmu * rank_mu
        self.sigma *= math.exp(min(1.0, (self.cs / self.damps) * (ps_norm / self.chi_n - 1)))
        self._decompose()
        return self


@dataclass
class MinimizeResult:
    best_point: np.ndarray
    best_value: float
    history: list[tuple[np.ndarray, float]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    state: CmaesState | None = None

    @property
    def evaluations(self) -> int:
        return len(self.history)


def minimize(objective: Callable[[np.ndarray], float], config: CmaesConfig, rng: Rng,
             initial_points: Sequence[np.ndarray] = ()) -> MinimizeResult:
    """Run CMA-ES until ``config.budget`` evaluations are spent.

    ``initial_points`` are evaluated first, in order, and count against the
    budget; they enter the best-so-far record but not the distribution
    update. A NaN objective value is replaced by ``+inf`` and noted in
    ``result.warnings``.
    """
    state = CmaesState(config)
    history: list[tuple[np.ndarray, float]] = []
    notes: list[str] = []

    def evaluate(x):
        v = float(objective(x.copy()))
        if math.isnan(v):
            notes.append(f"objective returned NaN at evaluation {len(history) + 1}; using +inf")
            warnings.warn(notes[-1], RuntimeWarning, stacklevel=3)
            v = math.inf
        history.append((x.copy(), v))
        return v

    for p in initial_points[: config.budget]:
        p = np.clip(np.asarray(p, dtype=np.float64), -config.bound, config.bound)
        state.record(p[None, :], [evaluate(p)])
    while state.remaining > 0:
        pop = state.ask(rng)
        vals = [evaluate(x) for x in pop]
        state.tell(pop, vals)

    return MinimizeResult(state.best_point.copy(), state.best_value, history, notes, state)
