"""Partitionable parameter trees, weighted averaging and the checkpoint container.

A :class:`ParameterTree` is an immutable, lexicographically ordered mapping from
layer path to a float32 array. Every entry carries a partition tag assigned when
the owning model is built; aggregation scope is decided by tags, never by names.

Checkpoint layout (little endian)::

    b"PFLS" | u32 version | u32 n_entries
    per entry: u32 len | utf-8 path | u8 tag | u32 rank | u32 dims[rank] | f32 payload
"""

from __future__ import annotations

import io
import re
import struct
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AggregationError, CheckpointError, ConfigError

TAGS = ("upstream", "downstream", "pb", "mapper", "discriminator")
TAG_CODES = {tag: code for code, tag in enumerate(TAGS)}
GENERATOR_CB_TAGS = frozenset({"upstream", "downstream"})
SHARED_TAGS = frozenset({"downstream", "mapper"})

MAGIC = b"PFLS"
FORMAT_VERSION = 1

_STAGE_RE = re.compile(r"^([erd])(\d+)$")
_STAGE_GROUP = {"e": 0, "r": 1, "d": 2}


def stage_key(stage: str) -> tuple[int, int]:
    """Sort key placing encoder < residual < decoder stages, then by index."""
    m = _STAGE_RE.match(stage)
    if m is None:
        raise ConfigError(f"unknown stage identifier {stage!r}")
    return _STAGE_GROUP[m.group(1)], int(m.group(2))


def stage_of(path: str) -> str | None:
    """Return the synthesizer stage named in ``path`` (first matching segment)."""
    for part in path.split("."):
        if _STAGE_RE.match(part):
            return part
    return None


class ParameterTree(Mapping):
    """Immutable ordered map ``path -> float32 array`` with per-entry tags."""

    __slots__ = ("_tensors", "_tags")

    def __init__(self, tensors: Mapping[str, np.ndarray], tags: Mapping[str, str]):
        if set(tensors) != set(tags):
            missing = sorted(set(tensors) ^ set(tags))
            raise ConfigError(f"tensor/tag path sets differ: {missing[:5]}")
        store = {}
        tag_store = {}
        for path in sorted(tensors):
            tag = tags[path]
            if tag not in TAG_CODES:
                raise ConfigError(f"unknown partition tag {tag!r} for {path}")
            arr = np.array(tensors[path], dtype=np.float32, copy=True)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {path}")
            arr.setflags(write=False)
            store[path] = arr
            tag_store[path] = tag
        self._tensors = store
        self._tags = tag_store

    def __getitem__(self, path: str) -> np.ndarray:
        return self._tensors[path]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        return f"ParameterTree({len(self)} entries, {count_params(self)} params)"

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterTree):
            return NotImplemented
        if list(self) != list(other) or self._tags != other._tags:
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._tensors.values(), other._tensors.values())
        )

    __hash__ = None

    def tag(self, path: str) -> str:
        return self._tags[path]

    @property
    def tags(self) -> dict[str, str]:
        return dict(self._tags)

    def select(self, tags: Iterable[str]) -> "ParameterTree":
        wanted = set(tags)
        keep = [p for p in self if self._tags[p] in wanted]
        return ParameterTree({p: self[p] for p in keep}, {p: self._tags[p] for p in keep})

    def union(self, other: "ParameterTree") -> "ParameterTree":
        overlap = set(self) & set(other)
        if overlap:
            raise ConfigError(f"cannot union trees sharing paths: {sorted(overlap)[:5]}")
        tensors = {**self._tensors, **other._tensors}
        return ParameterTree(tensors, {**self._tags, **other._tags})

    def stages(self) -> list[str]:
        """Synthesizer stages owning convolutional-block entries, in network order."""
        found = {stage_of(p) for p in self if self._tags[p] in GENERATOR_CB_TAGS}
        found.discard(None)
        return sorted(found, key=stage_key)


@dataclass(frozen=True)
class SiteWeights:
    """Relative site weights ``alpha_k = n_k / sum(n)``."""

    sample_counts: tuple[int, ...]
    weights: tuple[float, ...]

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "SiteWeights":
        counts = tuple(int(c) for c in counts)
        if not counts or any(c < 0 for c in counts) or sum(counts) == 0:
            raise ConfigError(f"sample counts must be non-negative with positive sum: {counts}")
        total = sum(counts)
        return cls(counts, tuple(c / total for c in counts))

    @classmethod
    def explicit(cls, weights: Sequence[float]) -> "SiteWeights":
        """Weights given directly (no sample counts); must sum to one."""
        w = tuple(float(x) for x in weights)
        if abs(sum(w) - 1.0) > 1e-9 or any(x < 0 for x in w):
            raise ConfigError(f"weights must be non-negative and sum to 1: {w}")
        return cls((), w)

    def __len__(self) -> int:
        return len(self.weights)


def partition(
    tree: ParameterTree, split_stage: str, stages: Sequence[str] | None = None
) -> tuple[ParameterTree, ParameterTree]:
    """Split ``tree`` at ``split_stage`` into ``(local_part, shared_part)``.

    Convolutional-block entries at or before ``split_stage`` go to the local part
    (re-tagged ``upstream``), later ones to the shared part (``downstream``).
    PB and discriminator entries are always local; mapper entries always shared.
    """
    order = list(stages) if stages is not None else tree.stages()
    if split_stage not in order:
        raise ConfigError(f"unknown split stage {split_stage!r}; valid: {order}")
    ordered = sorted(order, key=stage_key)
    split_pos = ordered.index(split_stage)
    position = {s: i for i, s in enumerate(ordered)}

    local_t, local_g, shared_t, shared_g = {}, {}, {}, {}
    for path in tree:
        tag = tree.tag(path)
        if tag in GENERATOR_CB_TAGS:
            stage = stage_of(path)
            if stage not in position:
                raise ConfigError(f"{path} has no recognised stage")
            if position[stage] <= split_pos:
                local_t[path], local_g[path] = tree[path], "upstream"
            else:
                shared_t[path], shared_g[path] = tree[path], "downstream"
        elif tag == "mapper":
            shared_t[path], shared_g[path] = tree[path], tag
        else:
            local_t[path], local_g[path] = tree[path], tag
    return ParameterTree(local_t, local_g), ParameterTree(shared_t, shared_g)


def weighted_average(trees: Sequence[ParameterTree], weights: SiteWeights) -> ParameterTree:
    """Return ``sum_k alpha_k * tree_k``, accumulated in ascending site order.

    Accumulation runs in float64 and is rounded once to float32, so averaging
    identical trees returns them bit-exactly.
    """
    if not trees:
        raise AggregationError("no trees to aggregate")
    if len(trees) != len(weights):
        raise AggregationError(f"{len(trees)} trees but {len(weights)} weights")
    ref = trees[0]
    for k, t in enumerate(trees[1:], start=1):
        if list(t) != list(ref):
            diff = sorted(set(t) ^ set(ref))
            raise AggregationError(f"site {k} path mismatch at {diff[0] if diff else '<order>'}")
        for path in ref:
            if t[path].shape != ref[path].shape:
                raise AggregationError(
                    f"site {k} shape mismatch at {path}: {t[path].shape} vs {ref[path].shape}"
                )
            if t.tag(path) != ref.tag(path):
                raise AggregationError(f"site {k} tag mismatch at {path}")
    out = {}
    for path in ref:
        acc = np.zeros(ref[path].shape, dtype=np.float64)
        for alpha, t in zip(weights.weights, trees):
            acc += alpha * t[path].astype(np.float64)
        out[path] = acc.astype(np.float32)
    return ParameterTree(out, ref.tags)


def count_params(tree: Mapping[str, np.ndarray]) -> int:
    return int(sum(np.asarray(v).size for v in tree.values()))


# -- container encoding ------------------------------------------------------


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def _read(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _decode_tensor_from(buf: io.BytesIO) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read(buf, 4))
    if rank > 16:
        raise CheckpointError(f"implausible tensor rank {rank}")
    dims = struct.unpack(f"<{rank}I", _read(buf, 4 * rank))
    size = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = np.frombuffer(_read(buf, 4 * size), dtype="<f4")
    return payload.reshape(dims).astype(np.float32)


def decode_tensor(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    arr = _decode_tensor_from(buf)
    if buf.read(1):
        raise CheckpointError("trailing bytes after tensor")
    return arr


def encode_tree(tree: ParameterTree) -> bytes:
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tree))]
    for path in tree:
        raw = path.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", TAG_CODES[tree.tag(path)]))
        out.append(encode_tensor(tree[path]))
    return b"".join(out)


def decode_tree(data: bytes) -> ParameterTree:
    buf = io.BytesIO(data)
    if _read(buf, 4) != MAGIC:
        raise CheckpointError("bad magic bytes")
    version, n = struct.unpack("<II", _read(buf, 8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors, tags = {}, {}
    for _ in range(n):
        (plen,) = struct.unpack("<I", _read(buf, 4))
        try:
            path = _read(buf, plen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("path is not valid utf-8") from exc
        (code,) = struct.unpack("<B", _read(buf, 1))
        if code >= len(TAGS):
            raise CheckpointError(f"unknown tag byte {code} for {path}")
        if path in tensors:
            raise CheckpointError(f"duplicate path {path}")
        tensors[path] = _decode_tensor_from(buf)
        tags[path] = TAGS[code]
    if buf.read(1):
        raise CheckpointError("trailing bytes after last entry")
    try:
        return ParameterTree(tensors, tags)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc


def save_checkpoint(tree: ParameterTree, path) -> None:
    Path(path).write_bytes(encode_tree(tree))


def load_checkpoint(path) -> ParameterTree:
    return decode_tree(Path(path).read_bytes())
