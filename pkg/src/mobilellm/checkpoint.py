"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"MLLM"  u32 version
    u32 n    n bytes of UTF-8 JSON (model config, sorted keys)
    u32      tensor count
    per tensor:
        u32 n, name                                  (UTF-8)
        [version 2] u32 n, dtype tag                 ("f32" | "u8+scale+zp")
        u32 rank, rank x u64 extents
        f32 tag: raw f32 values
        u8 tag:  u8 payload, u32 k, k x u32 slice axes,
                 u64 s, s x f32 scale, s x i32 zero_point, s x f32 offset

Version 1 holds float tensors only. Version 2 tags every tensor and marks
the JSON with ``"quantization": "w8a8"``. A tied output head is not stored.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .architecture import ModelConfig
from .model import BLOCK_FIELDS, Model
from .quantization import QuantizedTensor, dequantize_array, fake_quant_per_token

MAGIC = b"MLLM"
VERSION_FLOAT = 1
VERSION_QUANT = 2
TAG_F32 = "f32"
TAG_U8 = "u8+scale+zp"


class CheckpointError(ValueError):
    pass


def _u32(f, v): f.write(struct.pack("<I", v))
def _u64(f, v): f.write(struct.pack("<Q", v))


def _str(f, s: str):
    b = s.encode("utf-8")
    _u32(f, len(b))
    f.write(b)


def dumps(model: Model) -> bytes:
    quantized = getattr(model, "quantized", None) or {}
    version = VERSION_QUANT if quantized else VERSION_FLOAT
    meta = model.config.to_dict()
    if quantized:
        meta["quantization"] = "w8a8"
    f = io.BytesIO()
    f.write(MAGIC)
    _u32(f, version)
    _str(f, json.dumps(meta, sort_keys=True))
    named = model.named_parameters()
    _u32(f, len(named))
    for name, t in named:
        _str(f, name)
        qt = quantized.get(name)
        if version == VERSION_QUANT:
            _str(f, TAG_U8 if qt is not None else TAG_F32)
        _u32(f, t.ndim)
        for e in t.shape:
            _u64(f, e)
        if qt is None:
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        else:
            f.write(np.ascontiguousarray(qt.q, dtype=np.uint8).tobytes())
            _u32(f, len(qt.axis))
            for a in qt.axis:
                _u32(f, a)
            _u64(f, qt.n_slices)
            f.write(np.ascontiguousarray(qt.scale, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(qt.zero_point, dtype="<i4").tobytes())
            f.write(np.ascontiguousarray(qt.offset, dtype="<f4").tobytes())
    return f.getvalue()


def save(model: Model, path) -> None:
    Path(path).write_bytes(dumps(model))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def str(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * itemsize), dtype=dtype).copy()


def loads(raw: bytes) -> Model:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = r.u32()
    if version not in (VERSION_FLOAT, VERSION_QUANT):
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.str())
    quant_mode = meta.pop("quantization", None)
    config = ModelConfig.from_dict(meta)
    tensors: dict[str, np.ndarray] = {}
    quantized: dict[str, QuantizedTensor] = {}
    for _ in range(r.u32()):
        name = r.str()
        tag = r.str() if version == VERSION_QUANT else TAG_F32
        shape = tuple(r.u64() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        if tag == TAG_F32:
            tensors[name] = r.array("<f4", count).reshape(shape).astype(np.float32)
        elif tag == TAG_U8:
            q = r.array("u1", count).reshape(shape)
            axis = tuple(r.u32() for _ in range(r.u32()))
            n = r.u64()
            slice_shape = tuple(shape[a] for a in axis)
            qt = QuantizedTensor(
                q=q,
                scale=r.array("<f4", n).astype(np.float32).reshape(slice_shape),
                zero_point=r.array("<i4", n).astype(np.int32).reshape(slice_shape),
                offset=r.array("<f4", n).astype(np.float32).reshape(slice_shape),
                axis=axis, shape=shape, dtype=np.dtype(np.float32),
            )
            quantized[name] = qt
            tensors[name] = dequantize_array(qt)
        else:
            raise CheckpointError(f"unknown tensor dtype tag {tag!r}")
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after last tensor")

    try:
        blocks = [{n: tensors[f"blocks.{i}.{n}"] for n in BLOCK_FIELDS} for i in range(config.n_layers)]
        model = Model.from_parts(
            config,
            embedding=tensors["embedding"],
            blocks=blocks,
            final_norm=tensors["final_norm"],
            output_head=tensors.get("output_head"),
            dtype="float32",
        )
    except KeyError as e:
        raise CheckpointError(f"checkpoint is missing tensor {e}") from None
    if quant_mode is not None:
        model.quantized = quantized
        model.act_quantizer = fake_quant_per_token
    return model


def load(path) -> Model:
    return loads(Path(path).read_bytes())
