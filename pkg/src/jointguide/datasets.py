"""Synthetic confusable-action skeletons and the on-disk dataset format.

File layout (all integers little-endian)::

    magic  b"JGDS" | u16 version | u8 split (0 train, 1 test) | u8 0
    u32 C | u32 T | u32 V | u32 N_c | u32 count
    count records: u32 label | u8 ndim (=3) | ndim x u32 shape | float32[C*T*V]
    u32 n_classes, then per class: u16 nbytes | utf-8 name
    u32 n_pairs, then per pair: u32 a | u32 b | u32 n | n x u32 joint
    u16 nbytes | utf-8 joint-vocabulary reference
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, FormatError

MAGIC = b"JGDS"
VERSION = 1
SPLITS = ("train", "test")

DEFAULT_CLASS_NAMES = (
    "writing",
    "typing on a keyboard",
    "hand waving",
    "drinking water",
    "kicking something",
    "hopping",
    "sitting down",
    "standing up",
)

# Canonical rest pose (x, y, z) for the 12-joint body in graph.DEFAULT_EDGES order.
REST_POSE = np.array([
    [0.0, 1.70, 0.0],    # head
    [0.0, 1.30, 0.0],    # torso
    [-0.20, 1.45, 0.0],  # left shoulder
    [-0.45, 1.20, 0.0],  # left elbow
    [-0.55, 0.95, 0.1],  # left wrist
    [0.20, 1.45, 0.0],   # right shoulder
    [0.45, 1.20, 0.0],   # right elbow
    [0.55, 0.95, 0.1],   # right wrist
    [-0.12, 0.50, 0.0],  # left knee
    [-0.12, 0.05, 0.0],  # left ankle
    [0.12, 0.50, 0.0],   # right knee
    [0.12, 0.05, 0.0],   # right ankle
]).T  # (3, 12)


class SkeletonSequence(NamedTuple):
    data: np.ndarray  # (C, T, V)
    label: int


@dataclass(frozen=True)
class ConfusablePair:
    a: int
    b: int
    joints: tuple[int, ...]
    delta: float


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 8
    num_joints: int = 12
    frames: int = 48
    train_per_class: int = 200
    test_per_class: int = 50
    pairs: tuple[ConfusablePair, ...] = (
        ConfusablePair(0, 1, (3, 4), 0.12),
        ConfusablePair(4, 5, (10, 11), 0.12),
    )
    noise: float = 0.5
    seed: int = 0
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES

    def validate(self):
        if min(self.num_classes, self.num_joints, self.frames,
               self.train_per_class, self.test_per_class) < 1:
            raise ConfigurationError("class, joint, frame and sample counts must be >= 1")
        if len(self.class_names) != self.num_classes:
            raise ConfigurationError(
                f"{len(self.class_names)} class names for {self.num_classes} classes"
            )
        if self.noise < 0:
            raise ConfigurationError("noise scale must be >= 0")
        for p in self.pairs:
            if not (0 <= p.a < self.num_classes and 0 <= p.b < self.num_classes) or p.a == p.b:
                raise ConfigurationError(f"pair ({p.a}, {p.b}) references invalid classes")
            if not p.joints or any(not 0 <= j < self.num_joints for j in p.joints):
                raise ConfigurationError(f"pair ({p.a}, {p.b}) has invalid joints {p.joints}")
            if p.delta < 0:
                raise ConfigurationError(f"pair ({p.a}, {p.b}) has negative delta")
        paired = [c for p in self.pairs for c in (p.a, p.b)]
        if len(paired) != len(set(paired)):
            raise ConfigurationError("a class may belong to at most one confusable pair")


@dataclass
class DatasetSplit:
    data: np.ndarray      # (N, C, T, V) float32
    labels: np.ndarray    # (N,) int64
    split: str
    class_names: tuple[str, ...]
    pairs: tuple[tuple[int, int, tuple[int, ...]], ...] = ()
    vocabulary: str = "joints.txt"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigurationError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.data.ndim != 4 or len(self.data) != len(self.labels):
            raise ConfigurationError("data must be (N, C, T, V) with one label per sequence")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> SkeletonSequence:
        return SkeletonSequence(self.data[i], int(self.labels[i]))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


def class_prototypes(spec: SyntheticSpec) -> np.ndarray:
    """(N_c, 3, T, V) noise-free trajectories."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0])
    T, V = spec.frames, spec.num_joints
    t = np.arange(T) / T
    if V == REST_POSE.shape[1]:
        rest = REST_POSE
    else:
        rest = np.random.default_rng([spec.seed, 1]).uniform(-1, 1, size=(3, V))
    amp = rng.uniform(0.1, 0.4, size=(spec.num_classes, 3, 1, V))
    freq = rng.integers(1, 3, size=(spec.num_classes, 3, 1, V))
    phase = rng.uniform(0, 2 * np.pi, size=(spec.num_classes, 3, 1, V))
    protos = rest[None, :, None, :] + amp * np.sin(2 * np.pi * freq * t[None, None, :, None] + phase)
    for p in spec.pairs:
        protos[p.b] = protos[p.a]
        for j in p.joints:
            f = rng.integers(1, 4, size=(3, 1))
            ph = rng.uniform(0, 2 * np.pi, size=(3, 1))
            protos[p.b, :, :, j] += p.delta * np.sin(2 * np.pi * f * t[None, :] + ph)
    return protos


def generate(spec: SyntheticSpec) -> tuple[DatasetSplit, DatasetSplit]:
    """Prototype-plus-Gaussian-noise train and test splits, class balanced."""
    protos = class_prototypes(spec)
    pairs = tuple((p.a, p.b, tuple(p.joints)) for p in spec.pairs)
    out = []
    for split, per_class, stream in (("train", spec.train_per_class, 2), ("test", spec.test_per_class, 3)):
        rng = np.random.default_rng([spec.seed, stream])
        labels = np.repeat(np.arange(spec.num_classes), per_class)
        noise = rng.standard_normal((len(labels), *protos.shape[1:]))
        data = (protos[labels] + spec.noise * noise).astype(np.float32)
        out.append(DatasetSplit(data, labels.astype(np.int64), split, tuple(spec.class_names), pairs))
    return out[0], out[1]


def _interval_bounds(T: int, T_out: int):
    edges = np.linspace(0, T, T_out + 1)
    starts = np.floor(edges[:-1]).astype(np.int64)
    ends = np.maximum(starts + 1, np.floor(edges[1:]).astype(np.int64))
    return edges, starts, np.minimum(ends, T)


def frame_indices(T: int, T_out: int, mode: str, rng: np.random.Generator | None = None,
                  count: int | None = None) -> np.ndarray:
    """Frame indices for uniform-interval sampling.

    ``test`` takes the center of each of ``T_out`` equal intervals; ``train``
    draws one frame uniformly inside each interval. Sequences shorter than
    ``T_out`` repeat frames: output frame i is input frame floor(i * T / T_out).
    With ``count`` set, returns one row of indices per sequence.
    """
    if T_out < 1:
        raise ValueError(f"T_out must be >= 1, got {T_out}")
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    shape = (T_out,) if count is None else (count, T_out)
    if T < T_out:
        idx = (np.arange(T_out) * T) // T_out
        return np.broadcast_to(idx, shape).copy()
    edges, starts, ends = _interval_bounds(T, T_out)
    if mode == "test":
        idx = np.floor((edges[:-1] + edges[1:]) / 2).astype(np.int64)
        return np.broadcast_to(np.minimum(idx, T - 1), shape).copy()
    if rng is None:
        raise ValueError("train-mode sampling needs a random generator")
    u = rng.random(shape)
    return starts + np.floor(u * (ends - starts)).astype(np.int64)


def sample_frames(seq: SkeletonSequence, T_out: int, mode: str = "test", seed=None) -> SkeletonSequence:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = frame_indices(seq.data.shape[1], T_out, mode, rng)
    return SkeletonSequence(seq.data[:, idx, :], seq.label)


def _w_str(buf, s: str):
    b = s.encode("utf-8")
    buf.write(struct.pack("<H", len(b)))
    buf.write(b)


def dumps(split: DatasetSplit) -> bytes:
    buf = io.BytesIO()
    n, C, T, V = split.data.shape
    buf.write(MAGIC)
    buf.write(struct.pack("<HBB", VERSION, SPLITS.index(split.split), 0))
    buf.write(struct.pack("<5I", C, T, V, split.num_classes, n))
    data = np.ascontiguousarray(split.data, dtype="<f4")
    for i in range(n):
        buf.write(struct.pack("<IB3I", int(split.labels[i]), 3, C, T, V))
        buf.write(data[i].tobytes())
    buf.write(struct.pack("<I", split.num_classes))
    for name in split.class_names:
        _w_str(buf, name)
    buf.write(struct.pack("<I", len(split.pairs)))
    for a, b, joints in split.pairs:
        buf.write(struct.pack(f"<3I{len(joints)}I", a, b, len(joints), *joints))
    _w_str(buf, split.vocabulary)
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated file: needed {n} bytes, {len(self.raw) - self.pos} left",
                              offset=self.pos)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        at = self.pos
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("invalid utf-8 string", offset=at) from None


def loads(raw: bytes) -> DatasetSplit:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise FormatError("not a dataset file (bad magic)", offset=0)
    version, split_code, _ = r.unpack("<HBB")
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}", offset=4)
    if split_code >= len(SPLITS):
        raise FormatError(f"bad split code {split_code}", offset=6)
    C, T, V, n_classes, n = r.unpack("<5I")
    data = np.empty((n, C, T, V), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        at = r.pos
        label, ndim, *shape = r.unpack("<IB3I")
        if ndim != 3 or tuple(shape) != (C, T, V):
            raise FormatError(f"record {i} has shape {shape}, header says {(C, T, V)}", offset=at)
        if label >= n_classes:
            raise FormatError(f"record {i} label {label} >= {n_classes}", offset=at)
        labels[i] = label
        data[i] = np.frombuffer(r.take(4 * C * T * V), dtype="<f4").reshape(C, T, V)
    (nc,) = r.unpack("<I")
    names = tuple(r.string() for _ in range(nc))
    (npairs,) = r.unpack("<I")
    pairs = []
    for _ in range(npairs):
        a, b, k = r.unpack("<3I")
        pairs.append((a, b, tuple(r.unpack(f"<{k}I"))))
    vocab = r.string()
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes", offset=r.pos)
    return DatasetSplit(data, labels, SPLITS[split_code], names, tuple(pairs), vocab)


def save(split: DatasetSplit, path):
    Path(path).write_bytes(dumps(split))


def load(path) -> DatasetSplit:
    return loads(Path(path).read_bytes())
