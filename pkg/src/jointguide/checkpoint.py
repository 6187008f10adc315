"""Self-describing checkpoint container.

Layout (little-endian)::

    magic b"JGCK" | u16 version | u16 0
    u32 nbytes | utf-8 JSON metadata (model config, class names, epoch, config hash)
    u32 n_arrays, then per array:
        u16 nbytes | utf-8 name | u8 dtype (0 f32, 1 f64, 2 i64) | u8 ndim | ndim x u32 shape | raw data

Arrays hold every model parameter and buffer, the skeleton adjacency
(``graph.adjacency``) and, when present, the last confusion matrix
(``confusion.counts``).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .datasets import _Reader
from .errors import FormatError
from .graph import SkeletonGraph
from .model import ModelConfig, Recognizer
from .questioner import ConfusionMatrix

MAGIC = b"JGCK"
VERSION = 1
DTYPES = ("<f4", "<f8", "<i8")


def _write_array(buf, name: str, arr: np.ndarray):
    code = DTYPES.index(arr.dtype.str)
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)) + nb)
    buf.write(struct.pack(f"<BB{arr.ndim}I", code, arr.ndim, *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())


def _as_le(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.float32:
        return arr.astype("<f4")
    if arr.dtype == np.float64:
        return arr.astype("<f8")
    if arr.dtype.kind in "iu":
        return arr.astype("<i8")
    raise TypeError(f"unsupported array dtype {arr.dtype}")


def dumps(arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<HH", VERSION, 0))
    mb = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(mb)) + mb)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        _write_array(buf, name, _as_le(np.asarray(arrays[name])))
    return buf.getvalue()


def loads(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", offset=0)
    version, _ = r.unpack("<HH")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (n,) = r.unpack("<I")
    at = r.pos
    try:
        meta = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("corrupt metadata block", offset=at) from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        name = r.string()
        at = r.pos
        code, ndim = r.unpack("<BB")
        if code >= len(DTYPES):
            raise FormatError(f"array {name!r} has unknown dtype code {code}", offset=at)
        shape = r.unpack(f"<{ndim}I")
        dtype = np.dtype(DTYPES[code])
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(r.take(size), dtype=dtype).reshape(shape).copy()
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes", offset=r.pos)
    return arrays, meta


@dataclass
class Checkpoint:
    model: Recognizer
    meta: dict
    confusion: ConfusionMatrix | None


def save_checkpoint(path, model: Recognizer, *, config_hash: str, epoch: int,
                    class_names=(), confusion: ConfusionMatrix | None = None):
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["graph.adjacency"] = model.graph.adjacency
    meta = {
        "format": "jointguide-checkpoint",
        "config_hash": config_hash,
        "epoch": int(epoch),
        "model": asdict(model.config),
        "class_names": list(class_names),
    }
    if confusion is not None:
        arrays["confusion.counts"] = confusion.counts
        meta["confusion_epoch"] = confusion.epoch
    Path(path).write_bytes(dumps(arrays, meta))


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = loads(Path(path).read_bytes())
    cfg = dict(meta["model"])
    cfg["channels"] = tuple(cfg["channels"])
    cfg["strides"] = tuple(cfg["strides"])
    graph = SkeletonGraph(arrays.pop("graph.adjacency"))
    model = Recognizer(ModelConfig(**cfg), graph)
    counts = arrays.pop("confusion.counts", None)
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise FormatError(f"checkpoint/model mismatch: missing {missing}, unexpected {unexpected}")
    model.mark_initialized()
    confusion = None
    if counts is not None:
        confusion = ConfusionMatrix(counts.shape[0], meta.get("confusion_epoch", 0), counts)
    return Checkpoint(model, meta, confusion)
