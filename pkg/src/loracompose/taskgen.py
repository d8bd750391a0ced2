"""Seeded synthetic classification tasks.

Inputs live near a low-dimensional subspace: a standard normal latent
``z`` of size ``latent_dim`` is embedded into ``in_dim`` coordinates by a
fixed orthonormal map (scaled to unit variance per coordinate) and small
isotropic noise is added. A task labels an input with the argmax of class
scores computed from its latent:

``teacher``
    scores are ``x @ T`` for a random teacher matrix ``T``. When the params
    carry an ``anchor_seed``, ``T`` is a shared anchor teacher plus
    ``spread`` times a family-specific matrix, so all tasks of a suite are
    related; columns are centred and unit-norm.
``rotation``
    the teacher applied to ``x`` rotated by Givens rotations
    ``(i, j, angle)``.
``permutation``
    a teacher or rotation task whose class ids are relabelled through
    ``permutation``.
``mixture``
    the weighted sum of the component tasks' (permuted) scores.

Train and eval inputs come from different child streams of the task seed,
so the two splits never share rows.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import SpecError
from .model import Batch
from .tensor import make_rng

KINDS = ("teacher", "rotation", "permutation", "mixture")
IN_DIM = 32
LATENT_DIM = 8
INPUT_NOISE = 0.1
INPUT_SEED = 0
N_CLASSES = 8
MAX_RESAMPLES = 200
MARGIN = 0.2
N_FAMILIES = 4
SPREAD = 3.0
JITTER = 0.3
MAX_ANGLE = np.pi / 8


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    kind: str
    params: dict[str, Any]
    n_train: int = 512
    n_eval: int = 256
    seed: int = 0
    in_dim: int = IN_DIM
    n_classes: int = N_CLASSES
    latent_dim: int = LATENT_DIM
    input_noise: float = INPUT_NOISE
    input_seed: int = INPUT_SEED
    margin: float = MARGIN

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)


def _raw_teacher(seed: int, dim: int, n_classes: int) -> np.ndarray:
    t = make_rng(np.random.SeedSequence([seed, 0x7E4C])).standard_normal((dim, n_classes))
    t -= t.mean(axis=1, keepdims=True)
    return t / np.linalg.norm(t, axis=0)


def anchor_matrix(anchor_seed: int, dim: int = LATENT_DIM, n_classes: int = N_CLASSES) -> np.ndarray:
    """Centred orthonormal columns: a regular simplex, so classes are balanced."""
    g = make_rng(np.random.SeedSequence([anchor_seed, 0xA2C4])).standard_normal((dim, n_classes))
    q, _ = np.linalg.qr(g)
    q -= q.mean(axis=1, keepdims=True)
    return q / np.linalg.norm(q, axis=0)


def teacher_matrix(teacher_seed: int, dim: int = LATENT_DIM, n_classes: int = N_CLASSES,
                   anchor_seed: int | None = None, spread: float = 1.0,
                   jitter_seed: int | None = None, jitter: float = 0.0) -> np.ndarray:
    t = _raw_teacher(teacher_seed, dim, n_classes)
    if jitter_seed is not None and jitter:
        t = t + jitter * _raw_teacher(jitter_seed, dim, n_classes)
    if anchor_seed is not None:
        t = anchor_matrix(anchor_seed, dim, n_classes) + spread * t
        t -= t.mean(axis=1, keepdims=True)
        t /= np.linalg.norm(t, axis=0)
    return t


def rotation_matrix(angles, dim: int = LATENT_DIM) -> np.ndarray:
    r = np.eye(dim)
    for i, j, theta in angles:
        g = np.eye(dim)
        c, s = np.cos(theta), np.sin(theta)
        g[i, i] = g[j, j] = c
        g[i, j], g[j, i] = -s, s
        r = r @ g
    return r


def _check(spec: TaskSpec) -> None:
    if spec.kind not in KINDS:
        raise SpecError(f"unknown task kind {spec.kind!r}")
    if spec.kind == "mixture":
        w = np.asarray(spec.params["weights"], dtype=np.float64)
        comps = spec.params["components"]
        if len(comps) != len(w) or len(w) == 0:
            raise SpecError(f"{spec.task_id}: {len(comps)} components but {len(w)} weights")
        if (w < 0).any() or abs(w.sum() - 1) > 1e-9:
            raise SpecError(f"{spec.task_id}: mixture weights must be non-negative and sum to 1")
    if spec.kind == "permutation":
        perm = spec.params["permutation"]
        if sorted(perm) != list(range(spec.n_classes)):
            raise SpecError(f"{spec.task_id}: not a permutation of the classes: {perm}")


def embedding(input_seed: int, in_dim: int = IN_DIM, latent_dim: int = LATENT_DIM) -> np.ndarray:
    g = make_rng(np.random.SeedSequence([input_seed, 0xE3B0])).standard_normal((in_dim, latent_dim))
    q, _ = np.linalg.qr(g)
    return q * np.sqrt(in_dim / latent_dim)


def scores(spec: TaskSpec, z: np.ndarray) -> np.ndarray:
    """Class scores of ``spec`` on latents ``z`` (rows)."""
    _check(spec)
    p = spec.params
    if spec.kind == "mixture":
        comps = [TaskSpec.from_dict(c) for c in p["components"]]
        return sum(w * scores(c, z) for w, c in zip(p["weights"], comps))
    if p.get("angles"):
        z = z @ rotation_matrix(p["angles"], spec.latent_dim)
    s = z @ teacher_matrix(p["teacher_seed"], spec.latent_dim, spec.n_classes,
                           p.get("anchor_seed"), p.get("spread", 1.0),
                           p.get("jitter_seed"), p.get("jitter", 0.0))
    if spec.kind == "permutation":
        out = np.empty_like(s)
        out[:, p["permutation"]] = s
        s = out
    return s


def labels(spec: TaskSpec, z: np.ndarray) -> np.ndarray:
    return np.argmax(scores(spec, z), axis=1)


def _balanced(y: np.ndarray, c: int) -> bool:
    if len(y) < 64 * c:
        return True
    freq = np.bincount(y, minlength=c) / len(y)
    return bool(freq.min() >= 0.5 / c and freq.max() <= 2.0 / c)


def _latents(spec: TaskSpec, rng, n: int) -> tuple[np.ndarray, np.ndarray]:
    """``n`` latents whose top two class scores differ by at least the margin."""
    keep_z, keep_y, have = [], [], 0
    while have < n:
        z = rng.standard_normal((2 * n, spec.latent_dim))
        s = scores(spec, z)
        top2 = np.sort(s, axis=1)[:, -2:]
        ok = top2[:, 1] - top2[:, 0] >= spec.margin
        keep_z.append(z[ok])
        keep_y.append(np.argmax(s[ok], axis=1))
        have += int(ok.sum())
    return np.concatenate(keep_z)[:n], np.concatenate(keep_y)[:n]


def _draw(spec: TaskSpec, split: int, n: int) -> Batch:
    for attempt in range(MAX_RESAMPLES):
        rng = make_rng(np.random.SeedSequence([spec.seed, split, attempt]))
        z, y = _latents(spec, rng, n)
        if _balanced(y, spec.n_classes):
            x = z @ embedding(spec.input_seed, spec.in_dim, spec.latent_dim).T
            x += spec.input_noise * rng.standard_normal((n, spec.in_dim))
            return Batch(x, y)
    raise SpecError(f"{spec.task_id}: could not draw a class-balanced batch")


def generate(spec: TaskSpec) -> dict[str, Batch]:
    _check(spec)
    return {"train": _draw(spec, 0, spec.n_train), "eval": _draw(spec, 1, spec.n_eval)}


def _random_angles(rng, dim: int, count: int, max_angle: float) -> list:
    out = []
    for _ in range(count):
        i, j = rng.choice(dim, size=2, replace=False)
        out.append([int(i), int(j), float(rng.uniform(max_angle / 2, max_angle))])
    return out


def _swap_permutation(rng, n_classes: int) -> list[int]:
    perm = list(range(n_classes))
    i, j = rng.choice(n_classes, size=2, replace=False)
    perm[i], perm[j] = perm[j], perm[i]
    return perm


@dataclass
class Suite:
    seed: int
    upstream: list[TaskSpec]
    unseen: list[TaskSpec] = field(default_factory=list)

    def all_specs(self) -> list[TaskSpec]:
        return self.upstream + self.unseen

    def by_id(self) -> dict[str, TaskSpec]:
        return {s.task_id: s for s in self.all_specs()}

    def to_json(self) -> str:
        doc = {
            "format_version": 1,
            "seed": self.seed,
            "upstream": [s.to_dict() for s in self.upstream],
            "unseen": [s.to_dict() for s in self.unseen],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Suite":
        doc = json.loads(Path(path).read_text())
        return cls(
            seed=doc["seed"],
            upstream=[TaskSpec.from_dict(d) for d in doc["upstream"]],
            unseen=[TaskSpec.from_dict(d) for d in doc["unseen"]],
        )


def make_suite(seed: int, n_upstream: int = 40, n_unseen: int = 20,
               n_train: int = 512, n_eval: int = 256, n_families: int = N_FAMILIES,
               spread: float = SPREAD, jitter: float = JITTER, max_angle: float = MAX_ANGLE,
               cross_family: bool = False) -> Suite:
    """Upstream task families plus unseen mixtures of upstream tasks.

    All teachers share one anchor drawn from the suite seed. Each family
    adds its own offset (scaled by ``spread``) to the anchor; upstream
    tasks cycle through the families and through three variant kinds: a
    jittered teacher, a rotated teacher, and a teacher with two classes
    swapped. Every unseen task mixes two or three unrelabelled upstream
    tasks of one family (or of distinct families, with ``cross_family``)
    under fresh Dirichlet weights, so its labelling function is new but
    reachable by combining upstream skills.
    """
    if n_upstream < 1 or n_unseen < 0:
        raise ValueError("n_upstream must be >= 1 and n_unseen >= 0")
    ss = np.random.SeedSequence(seed)
    up_seq, unseen_seq, task_seq = ss.spawn(3)
    rng = make_rng(up_seq)
    anchor_seed = int(rng.integers(0, 2**31))
    n_families = max(1, min(n_families, n_upstream))
    family_seeds = [int(v) for v in rng.integers(0, 2**31, size=n_families)]
    task_seeds = iter(int(v) for v in make_rng(task_seq).integers(0, 2**31, size=n_upstream + n_unseen))

    upstream = []
    for i in range(n_upstream):
        fam, variant = i % n_families, i // n_families % 3
        kind = ("teacher", "rotation", "permutation")[variant]
        params: dict[str, Any] = {
            "teacher_seed": family_seeds[fam],
            "anchor_seed": anchor_seed,
            "spread": spread,
            "family": fam,
            "jitter_seed": int(rng.integers(0, 2**31)),
            "jitter": jitter,
        }
        if kind == "rotation":
            params["angles"] = _random_angles(rng, LATENT_DIM, 2, max_angle)
        if kind == "permutation":
            params["permutation"] = _swap_permutation(rng, N_CLASSES)
        upstream.append(TaskSpec(f"up{i:03d}_{kind}", kind, params, n_train, n_eval, next(task_seeds)))

    # relabelled tasks stay out of mixtures: blending two different class
    # swaps shrinks some class scores and starves those classes
    members = [
        [j for j in range(f, n_upstream, n_families) if upstream[j].kind != "permutation"]
        for f in range(n_families)
    ]
    usable = [f for f in range(n_families) if members[f]]
    rng = make_rng(unseen_seq)
    unseen = []
    for i in range(n_unseen):
        k = 2 + i % 2
        if cross_family:
            fams = rng.choice(usable, size=min(k, len(usable)), replace=False)
            idx = sorted(int(rng.choice(members[f])) for f in fams)
        else:
            f = int(rng.choice(usable))
            idx = sorted(int(v) for v in rng.choice(members[f], size=min(k, len(members[f])), replace=False))
        w = [float(v) for v in rng.dirichlet(np.ones(len(idx)))]
        w[-1] = max(0.0, 1.0 - sum(w[:-1]))
        params = {
            "component_ids": [upstream[j].task_id for j in idx],
            "components": [upstream[j].to_dict() for j in idx],
            "weights": w,
        }
        unseen.append(TaskSpec(f"new{i:03d}_mixture", "mixture", params, n_train, n_eval, next(task_seeds)))
    return Suite(seed, upstream, unseen)
