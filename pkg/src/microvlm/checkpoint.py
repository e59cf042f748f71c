"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MAEMI01"
    u64 metadata length, metadata as UTF-8 JSON
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 dtype code, u8 ndim,
                ndim x u64 dims, raw payload
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .adapters import AdapterLinear, QuantizedMatrix
from .errors import BadMagic, CheckpointIOError, ShapeMismatchOnLoad
from .layers import Module

MAGIC = b"MAEMI01"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("i1"), 3: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


def state_items(model: Module):
    """Every stored tensor of ``model`` in a fixed order."""
    out = []
    for path, mod in model.walk():
        if isinstance(mod, AdapterLinear):
            if mod.quantized:
                out.append((f"{path}.W0.q", mod.W0.q))
                out.append((f"{path}.W0.scales", mod.W0.scales))
            else:
                out.append((f"{path}.W0", mod.W0))
            out.append((f"{path}.A", mod.A))
            out.append((f"{path}.B", mod.B))
        elif isinstance(mod, Module):
            for key, arr in mod.params.items():
                out.append((f"{path}.{key}" if path else key, arr))
    return out


def encode_tensors(items) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt not in _CODES:
            raise TypeError(f"cannot serialize dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.astype(dt, copy=False).tobytes())
    return buf.getvalue()


def dumps(metadata: dict, items) -> bytes:
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(meta)) + meta + encode_tensors(items)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointIOError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes):
    """Parse checkpoint bytes into ``(metadata, {name: array})``."""
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise BadMagic("not a checkpoint (bad magic)")
    r = _Reader(data)
    r.take(len(MAGIC))
    (meta_len,) = r.unpack("<Q")
    try:
        metadata = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIOError(f"corrupt checkpoint metadata: {exc}") from exc
    if metadata.get("format_version") != FORMAT_VERSION:
        raise BadMagic(f"unsupported checkpoint version {metadata.get('format_version')}")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8", errors="strict")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointIOError(f"unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}Q")
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(size), dtype=dt).reshape(shape).copy()
    if r.pos != len(data):
        raise CheckpointIOError("trailing bytes after the last tensor")
    return metadata, tensors


def model_metadata(model, extra=None) -> dict:
    meta = {
        "format_version": FORMAT_VERSION,
        "fusion_config": model.cfg.to_dict(),
        "vision_config": model.vision_cfg.to_dict(),
        "vocab": list(model.vocab.itos) if model.vocab is not None else None,
        "vocab_sha256": model.vocab.digest() if model.vocab is not None else None,
        "seed": model.seed,
        "dtype": str(model.dtype),
    }
    meta.update(extra or {})
    return meta


def save_checkpoint(model, path, extra=None) -> None:
    data = dumps(model_metadata(model, extra), state_items(model))
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise CheckpointIOError(f"cannot write checkpoint {path}: {exc}") from exc


def restore_state(model, tensors: dict) -> None:
    """Copy stored tensors into ``model``; names and shapes must match exactly."""
    expected = {}
    for path, mod in model.walk():
        if isinstance(mod, AdapterLinear):
            expected[f"{path}.A"] = (mod, "A")
            expected[f"{path}.B"] = (mod, "B")
            if f"{path}.W0.q" in tensors:
                q, s = tensors[f"{path}.W0.q"], tensors[f"{path}.W0.scales"]
                if q.shape != mod.W0.shape or s.shape != (mod.W0.shape[1],):
                    raise ShapeMismatchOnLoad(f"{path}.W0: stored {q.shape}, model {mod.W0.shape}")
                mod.W0 = QuantizedMatrix(q.astype(np.int8), s.astype(np.float32))
                mod._dense = None
            elif f"{path}.W0" in tensors:
                w = tensors[f"{path}.W0"]
                if w.shape != mod.W0.shape:
                    raise ShapeMismatchOnLoad(f"{path}.W0: stored {w.shape}, model {mod.W0.shape}")
                mod.W0 = w
                mod._dense = None
            else:
                raise ShapeMismatchOnLoad(f"checkpoint lacks {path}.W0")
        elif isinstance(mod, Module):
            for key in mod.params:
                expected[f"{path}.{key}" if path else key] = (mod, key)
    base = {n for n in tensors if not n.endswith((".W0", ".W0.q", ".W0.scales"))}
    missing = set(expected) - base
    unknown = base - set(expected)
    if missing or unknown:
        raise ShapeMismatchOnLoad(f"tensor set mismatch: missing={sorted(missing)[:5]} unknown={sorted(unknown)[:5]}")
    for name, (owner, key) in expected.items():
        arr = tensors[name]
        if isinstance(owner, AdapterLinear):
            current = getattr(owner, key)
            if arr.shape != current.shape:
                raise ShapeMismatchOnLoad(f"{name}: stored {arr.shape}, model {current.shape}")
            setattr(owner, key, arr.astype(current.dtype, copy=False))
        else:
            current = owner.params[key]
            if arr.shape != current.shape:
                raise ShapeMismatchOnLoad(f"{name}: stored {arr.shape}, model {current.shape}")
            owner.params[key] = arr.astype(current.dtype, copy=False)


def load_checkpoint(path):
    """Rebuild a :class:`~microvlm.fusion.FusionModel`; returns ``(model, metadata)``."""
    from .fusion import FusionConfig, FusionModel
    from .tokenizer import Vocabulary
    from .vision import VisionConfig

    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointIOError(f"cannot read checkpoint {path}: {exc}") from exc
    metadata, tensors = loads(data)
    try:
        cfg = FusionConfig(**metadata["fusion_config"])
        vcfg = VisionConfig(**metadata["vision_config"])
        vocab = Vocabulary(metadata["vocab"]) if metadata.get("vocab") else None
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointIOError(f"corrupt checkpoint metadata: {exc}") from exc
    if vocab is not None and vocab.digest() != metadata.get("vocab_sha256"):
        raise CheckpointIOError("vocabulary hash mismatch")
    dtype = np.dtype(metadata.get("dtype", "float32"))
    # construction is cheap; every tensor is overwritten below
    model = FusionModel(cfg, vcfg, vocab, seed=metadata.get("seed", 0), dtype=dtype)
    restore_state(model, tensors)
    return model, metadata
