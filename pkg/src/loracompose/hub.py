"""On-disk registry of LoRA modules.

Each module lives in its own file::

    MAGIC (8 bytes) | header length (u64, little-endian) | JSON header | payload

The header carries the module name, task id, rank, ``format_version`` and a
layer table giving, for every factor matrix, its shape and byte offset into
the payload. The payload is the raw little-endian f64 data of each matrix,
so every float (negative zero and subnormals included) round-trips exactly.

``registry.json`` in the same directory indexes the files by name with a
64-bit BLAKE2b checksum of each file's bytes. Index writes go through a
temporary file and ``os.replace`` so readers never see a half-written index.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence
from urllib.parse import quote

import numpy as np

from .errors import (
    ConflictError,
    CorruptionError,
    EmptyRegistryError,
    FormatError,
    NotFoundError,
    StorageError,
)
from .lora import LoraFactors, LoraModule
from .model import BaseModel, LayerSpec
from .tensor import make_rng

FORMAT_VERSION = 1
MAGIC = b"LORAHUB\x00"
INDEX_NAME = "registry.json"
SUFFIX = ".lora"
DEFAULT_CANDIDATES = 20
_LEN = struct.Struct("<Q")
_F64 = np.dtype("<f8")
_PREFILTER_TAG = 0x9F17


def checksum(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def file_checksum(path) -> str:
    return checksum(Path(path).read_bytes())


@dataclass(frozen=True)
class IndexEntry:
    name: str
    task_id: str
    rank: int
    layers: tuple[tuple[str, tuple[int, int]], ...]
    path: str
    checksum: str

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "task_id": self.task_id,
            "rank": self.rank,
            "layers": [[n, list(s)] for n, s in self.layers],
            "path": self.path,
            "checksum": self.checksum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IndexEntry":
        layers = tuple((str(n), (int(s[0]), int(s[1]))) for n, s in d["layers"])
        return cls(str(d["name"]), str(d["task_id"]), int(d["rank"]), layers, str(d["path"]), str(d["checksum"]))


@dataclass(frozen=True)
class RegistryIndex:
    entries: tuple[IndexEntry, ...] = ()
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        entries = tuple(sorted(self.entries, key=lambda e: e.name))
        names = [e.name for e in entries]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ConflictError(f"duplicate module names in index: {dup}")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def get(self, name: str) -> IndexEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise NotFoundError(f"no module named {name!r} in the registry")

    def with_entry(self, entry: IndexEntry) -> "RegistryIndex":
        if entry.name in self.names():
            raise ConflictError(f"a module named {entry.name!r} is already registered")
        return RegistryIndex(self.entries + (entry,), self.format_version)

    def to_json(self) -> str:
        doc = {"format_version": self.format_version, "entries": [e.to_dict() for e in self.entries]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RegistryIndex":
        doc = json.loads(text)
        if doc.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"unsupported index format_version {doc.get('format_version')!r}")
        return cls(tuple(IndexEntry.from_dict(d) for d in doc["entries"]), FORMAT_VERSION)


@dataclass(frozen=True)
class ModuleRecord:
    module: LoraModule
    path: Path
    checksum: str


# -- module files ---------------------------------------------------------

def file_name(name: str) -> str:
    return quote(name, safe="") + SUFFIX


def encode_module(module: LoraModule) -> bytes:
    table = []
    chunks = []
    offset = 0
    for lname, f in module.layers.items():
        row = {"name": lname}
        for key, m in (("A", f.A), ("B", f.B)):
            raw = np.ascontiguousarray(m, dtype=_F64).tobytes()
            row[key] = {"shape": list(m.shape), "offset": offset, "nbytes": len(raw)}
            chunks.append(raw)
            offset += len(raw)
        table.append(row)
    header = {
        "format_version": FORMAT_VERSION,
        "name": module.name,
        "task_id": module.task_id,
        "rank": module.rank,
        "layers": table,
        "metadata": dict(module.metadata),
        "payload_bytes": offset,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(hb)) + hb + b"".join(chunks)


def _matrix(payload: bytes, spec: dict, lname: str, key: str) -> np.ndarray:
    try:
        rows, cols = (int(v) for v in spec["shape"])
        start, nbytes = int(spec["offset"]), int(spec["nbytes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"layer {lname!r}: bad {key} entry in layer table") from exc
    if rows < 1 or cols < 1 or nbytes != rows * cols * 8 or start < 0:
        raise FormatError(f"layer {lname!r}: {key} shape {spec['shape']} does not match {nbytes} bytes")
    if start + nbytes > len(payload):
        raise CorruptionError(f"layer {lname!r}: {key} extends past the end of the payload")
    return np.frombuffer(payload, dtype=_F64, count=rows * cols, offset=start).reshape(rows, cols).astype(np.float64)


def decode_module(data: bytes) -> LoraModule:
    """Parse module file bytes. Truncation raises ``CorruptionError``;
    structurally inconsistent content raises ``FormatError``."""
    if len(data) < len(MAGIC) + _LEN.size:
        raise CorruptionError("module file is truncated")
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError("not a module file (bad magic)")
    (hlen,) = _LEN.unpack_from(data, len(MAGIC))
    start = len(MAGIC) + _LEN.size
    if start + hlen > len(data):
        raise CorruptionError("module file is truncated inside the header")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"unreadable module header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported module format_version {header.get('format_version')!r}")
    payload = data[start + hlen :]
    if len(payload) != header.get("payload_bytes", len(payload)):
        raise CorruptionError(f"payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    rank = int(header["rank"])
    layers = {}
    for row in header["layers"]:
        lname = row["name"]
        a = _matrix(payload, row["A"], lname, "A")
        b = _matrix(payload, row["B"], lname, "B")
        if a.shape[1] != rank or b.shape[0] != rank:
            raise FormatError(f"layer {lname!r}: A is {a.shape}, B is {b.shape}, header rank is {rank}")
        layers[lname] = LoraFactors(a, b)
    return LoraModule(header["name"], header["task_id"], rank, layers, header.get("metadata", {}))


def read_module_file(path) -> LoraModule:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise NotFoundError(f"module file {path} does not exist") from None
    return decode_module(data)


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


# -- index ----------------------------------------------------------------

def _entry(module: LoraModule, fname: str, digest: str) -> IndexEntry:
    shapes = tuple((n, s) for n, s in module.layer_shapes().items())
    return IndexEntry(module.name, module.task_id, module.rank, shapes, fname, digest)


def load_index(root) -> RegistryIndex:
    path = Path(root) / INDEX_NAME
    if not path.exists():
        return RegistryIndex()
    try:
        return RegistryIndex.from_json(path.read_text())
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptionError(f"{path}: unreadable index: {exc}") from exc


def write_index(root, index: RegistryIndex) -> None:
    try:
        _atomic_write(Path(root) / INDEX_NAME, index.to_json().encode("utf-8"))
    except OSError as exc:
        raise StorageError(f"could not write index in {root}: {exc}") from exc


def rebuild_index(root) -> RegistryIndex:
    """Recreate the index from the module files found in ``root``."""
    entries = []
    for path in sorted(Path(root).glob("*" + SUFFIX)):
        data = path.read_bytes()
        entries.append(_entry(decode_module(data), path.name, checksum(data)))
    return RegistryIndex(tuple(entries))


def save_module(module: LoraModule, root) -> ModuleRecord:
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create registry directory {root}: {exc}") from exc
    index = load_index(root)
    fname = file_name(module.name)
    if module.name in index.names():
        raise ConflictError(f"a module named {module.name!r} is already registered")
    # an unindexed file is left over from an interrupted save; overwrite it
    data = encode_module(module)
    digest = checksum(data)
    new_index = index.with_entry(_entry(module, fname, digest))
    try:
        _atomic_write(root / fname, data)
    except OSError as exc:
        raise StorageError(f"could not write {root / fname}: {exc}") from exc
    write_index(root, new_index)
    return ModuleRecord(module, root / fname, digest)


def verify_entry(root, entry: IndexEntry) -> bool:
    path = Path(root) / entry.path
    return path.exists() and file_checksum(path) == entry.checksum


def load_record(name: str, root, index: RegistryIndex | None = None) -> ModuleRecord:
    root = Path(root)
    index = load_index(root) if index is None else index
    entry = index.get(name)
    path = root / entry.path
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise NotFoundError(f"module {name!r} is indexed but {path} is missing") from None
    digest = checksum(data)
    if digest != entry.checksum:
        raise CorruptionError(f"{path}: checksum {digest} does not match index {entry.checksum}")
    module = decode_module(data)
    if module.name != name:
        raise FormatError(f"{path}: file holds module {module.name!r}, index says {name!r}")
    return ModuleRecord(module, path, digest)


def load_module(name: str, root) -> LoraModule:
    return load_record(name, root).module


# -- candidate selection --------------------------------------------------

def prefilter(index: RegistryIndex | Sequence[str], count: int = DEFAULT_CANDIDATES, seed=0) -> list[str]:
    """Pick ``min(count, len(index))`` distinct names uniformly at random."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    names = index.names() if isinstance(index, RegistryIndex) else sorted(index)
    if not names:
        raise EmptyRegistryError("the registry holds no modules")
    if not isinstance(seed, np.random.SeedSequence):
        # own stream, so the same integer seed elsewhere draws unrelated numbers
        seed = np.random.SeedSequence([int(seed), _PREFILTER_TAG])
    picks = make_rng(seed).choice(len(names), size=min(count, len(names)), replace=False)
    return [names[int(i)] for i in picks]


@dataclass
class Registry:
    """Convenience wrapper around a registry directory."""

    root: Path
    _index: RegistryIndex | None = field(default=None, repr=False)

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def index(self) -> RegistryIndex:
        if self._index is None:
            self._index = load_index(self.root)
        return self._index

    def refresh(self) -> RegistryIndex:
        self._index = None
        return self.index

    def __len__(self):
        return len(self.index)

    def __contains__(self, name: str) -> bool:
        return name in self.index.names()

    def names(self) -> list[str]:
        return self.index.names()

    def save(self, module: LoraModule) -> ModuleRecord:
        rec = save_module(module, self.root)
        self._index = None
        return rec

    def load(self, name: str) -> LoraModule:
        return load_record(name, self.root, self.index).module

    def load_many(self, names: Iterable[str]) -> list[LoraModule]:
        return [self.load(n) for n in names]

    def verify(self, name: str) -> bool:
        try:
            return verify_entry(self.root, self.index.get(name))
        except NotFoundError:
            return False

    def prefilter(self, count: int = DEFAULT_CANDIDATES, seed=0) -> list[str]:
        return prefilter(self.index, count, seed)


# -- base model -----------------------------------------------------------

def save_base(model: BaseModel, path) -> None:
    path = Path(path)
    specs = [[s.name, s.in_dim, s.out_dim, s.activation] for s in model.layer_specs]
    arrays = {"specs": np.array(json.dumps(specs))}
    for i, spec in enumerate(model.layer_specs):
        arrays[f"w{i}"] = model.weights[spec.name]
        arrays[f"b{i}"] = model.biases[spec.name]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
    except OSError as exc:
        raise StorageError(f"could not write base model to {path}: {exc}") from exc


def load_base(path) -> BaseModel:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"no base model at {path}")
    with np.load(path, allow_pickle=False) as z:
        specs = [LayerSpec(n, int(i), int(o), a) for n, i, o, a in json.loads(str(z["specs"]))]
        weights = {s.name: z[f"w{i}"] for i, s in enumerate(specs)}
        biases = {s.name: z[f"b{i}"] for i, s in enumerate(specs)}
    return BaseModel(specs, weights, biases)
