"""Binary checkpoints: spec document, named float32 parameters, optional EMA shadow.

Layout (little-endian)::

    b"RLCK" | u32 version | u64 len + spec JSON | u64 len + meta JSON
    u64 count | count x (u64 len + name, tensor)
    u8 has_ema | [count x tensor, same order]
    u64 step | i64 seed

Tensors use :func:`robustlab.tensor.tensor_to_bytes`.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .arch import Model, ModelSpec, param_layout
from .tensor import Tensor

MAGIC = b"RLCK"
VERSION = 1


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] | None = None
    step: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def to_model(self, use_ema: bool = False) -> Model:
        source = self.ema if use_ema else self.params
        if source is None:
            raise ValueError("checkpoint has no EMA shadow")
        model = Model(self.spec, {n: Tensor(np.array(a, dtype=np.float32), requires_grad=True, name=n)
                                  for n, a in source.items()})
        check_against_spec(model.params, self.spec)
        return model


def check_against_spec(params: dict, spec: ModelSpec) -> None:
    """Every parameter declared by ``spec`` present once with the declared shape, nothing else."""
    layout = {name: shape for name, shape, _ in param_layout(spec)}
    for name, shape in layout.items():
        if name not in params:
            raise KeyError(f"checkpoint is missing parameter {name!r} required by {spec.name}")
        got = tuple(np.shape(params[name].data if isinstance(params[name], Tensor) else params[name]))
        if got != tuple(shape):
            raise ValueError(f"parameter {name!r}: checkpoint shape {got} != spec shape {tuple(shape)}")
    extra = [n for n in params if n not in layout]
    if extra:
        raise KeyError(f"checkpoint parameter {extra[0]!r} is not declared by {spec.name}")


def _blob(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<Q", len(raw)) + raw


def _read_blob(buf: bytes, off: int, what: str) -> tuple[str, int]:
    if off + 8 > len(buf):
        raise ValueError(f"truncated checkpoint: {what} length at byte {off}")
    (n,) = struct.unpack_from("<Q", buf, off)
    off += 8
    if off + n > len(buf):
        raise ValueError(f"truncated checkpoint: {what} at byte {off}")
    return buf[off:off + n].decode("utf-8"), off + n


def to_bytes(ckpt: Checkpoint) -> bytes:
    names = list(ckpt.params)
    parts = [MAGIC, struct.pack("<I", VERSION), _blob(ckpt.spec.dumps()),
             _blob(json.dumps(ckpt.meta, sort_keys=True)), struct.pack("<Q", len(names))]
    for name in names:
        parts.append(_blob(name))
        parts.append(T.tensor_to_bytes(ckpt.params[name]))
    if ckpt.ema is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        for name in names:
            if name not in ckpt.ema:
                raise KeyError(f"EMA shadow is missing parameter {name!r}")
            parts.append(T.tensor_to_bytes(ckpt.ema[name]))
    parts.append(struct.pack("<Qq", ckpt.step, ckpt.seed))
    return b"".join(parts)


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise ValueError(f"not a checkpoint: bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise ValueError("truncated checkpoint header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version} (expected {VERSION})")
    off = 8
    spec_text, off = _read_blob(buf, off, "spec document")
    spec = ModelSpec.loads(spec_text)
    meta_text, off = _read_blob(buf, off, "metadata")
    (count,) = struct.unpack_from("<Q", buf, off)
    off += 8
    params = {}
    for _ in range(count):
        name, off = _read_blob(buf, off, "parameter name")
        if name in params:
            raise ValueError(f"parameter {name!r} appears twice")
        params[name], off = T.tensor_from_bytes(buf, off)
    if off >= len(buf):
        raise ValueError(f"truncated checkpoint: EMA flag at byte {off}")
    ema = None
    if buf[off] == 1:
        off += 1
        ema = {}
        for name in params:
            ema[name], off = T.tensor_from_bytes(buf, off)
    elif buf[off] == 0:
        off += 1
    else:
        raise ValueError(f"bad EMA flag {buf[off]} at byte {off}")
    if off + 16 != len(buf):
        raise ValueError(f"checkpoint trailer expected at byte {off}, file has {len(buf)} bytes")
    step, seed = struct.unpack_from("<Qq", buf, off)
    check_against_spec(params, spec)
    return Checkpoint(spec, params, ema, step, seed, json.loads(meta_text))


def make_checkpoint(model: Model, ema: dict[str, np.ndarray] | None = None, step: int = 0,
                    seed: int = 0, meta: dict | None = None) -> Checkpoint:
    params = {n: np.asarray(p.data, dtype=np.float32).copy() for n, p in model.params.items()}
    shadow = None if ema is None else {n: np.asarray(ema[n], dtype=np.float32).copy() for n in params}
    return Checkpoint(model.spec, params, shadow, step, seed, dict(meta or {}))


def save_checkpoint(model_or_ckpt, path: str, ema=None, step: int = 0, seed: int = 0,
                    meta: dict | None = None) -> Checkpoint:
    ckpt = model_or_ckpt if isinstance(model_or_ckpt, Checkpoint) else \
        make_checkpoint(model_or_ckpt, ema, step, seed, meta)
    data = to_bytes(ckpt)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return ckpt


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def load_into(ckpt: Checkpoint, spec: ModelSpec, use_ema: bool = False) -> Model:
    """Materialise ``ckpt`` against a caller-supplied ``spec``; mismatches are named."""
    source = ckpt.ema if use_ema else ckpt.params
    if source is None:
        raise ValueError("checkpoint has no EMA shadow")
    check_against_spec(source, spec)
    return Model(spec, {n: Tensor(np.array(source[n], dtype=np.float32), requires_grad=True, name=n)
                        for n, _, _ in param_layout(spec)})
