"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"GAAT" | u32 version | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 dtype | u8 rank | u32 dims[rank] | payload

dtype codes: 0 = f32, 1 = f64, 2 = u8, 3 = i64. Entry names are prefixed
``param/``, ``adam_m/``, ``adam_v/`` or ``meta/``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ParseError

MAGIC = b"GAAT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2, np.dtype(np.int64): 3}


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = 0
    config_hash: str = ""
    version: int = VERSION


def _entries(ckpt: Checkpoint):
    for k, v in ckpt.params.items():
        yield "param/" + k, v
    for k, v in ckpt.adam_m.items():
        yield "adam_m/" + k, v
    for k, v in ckpt.adam_v.items():
        yield "adam_v/" + k, v
    yield "meta/adam_t", np.array([ckpt.adam_t], dtype=np.int64)
    yield "meta/epoch", np.array([ckpt.epoch], dtype=np.int64)
    yield "meta/config_hash", np.frombuffer(ckpt.config_hash.encode(), dtype=np.uint8)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    entries = list(_entries(ckpt))
    chunks = [MAGIC, struct.pack("<II", ckpt.version, len(entries))]
    for name, arr in entries:
        arr = np.ascontiguousarray(arr)
        code = _CODES.get(arr.dtype.newbyteorder("=") if arr.dtype.byteorder == ">" else arr.dtype)
        if code is None:
            raise TypeError(f"cannot store dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(_DTYPES[code], copy=False).tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ParseError(path, 0, "bad magic, not a checkpoint")
    if len(data) < 12:
        raise ParseError(path, len(data), "truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ParseError(path, 4, f"unsupported checkpoint version {version}")
    pos = 12
    ck = Checkpoint({})
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", data, pos)
            if code not in _DTYPES:
                raise ParseError(path, pos, f"unknown dtype code {code}")
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(data):
                raise ParseError(path, pos, f"payload of {name!r} truncated")
            arr = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
            kind, _, key = name.partition("/")
            if kind == "param":
                ck.params[key] = arr
            elif kind == "adam_m":
                ck.adam_m[key] = arr
            elif kind == "adam_v":
                ck.adam_v[key] = arr
            elif name == "meta/adam_t":
                ck.adam_t = int(arr[0])
            elif name == "meta/epoch":
                ck.epoch = int(arr[0])
            elif name == "meta/config_hash":
                ck.config_hash = arr.tobytes().decode()
    except struct.error as exc:
        raise ParseError(path, pos, f"truncated entry header ({exc})") from exc
    return ck


def capture(model: torch.nn.Module, optimizer=None, epoch: int = 0, config_hash: str = "") -> Checkpoint:
    names = [n for n, _ in model.named_parameters()]
    params = {n: p.detach().cpu().numpy().copy() for n, p in model.named_parameters()}
    ck = Checkpoint(params, epoch=epoch, config_hash=config_hash)
    if optimizer is not None:
        st = optimizer.state
        ck.adam_t = st.t
        ck.adam_m = {n: m.detach().cpu().numpy().copy() for n, m in zip(names, st.m)}
        ck.adam_v = {n: v.detach().cpu().numpy().copy() for n, v in zip(names, st.v)}
    return ck


def restore(ck: Checkpoint, model: torch.nn.Module, optimizer=None) -> None:
    named = dict(model.named_parameters())
    missing = set(named) - set(ck.params)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    with torch.no_grad():
        for n, p in named.items():
            p.copy_(torch.from_numpy(ck.params[n]).to(p.dtype))
    if optimizer is not None and ck.adam_m:
        names = list(named)
        optimizer.state.t = ck.adam_t
        for i, n in enumerate(names):
            optimizer.state.m[i].copy_(torch.from_numpy(ck.adam_m[n]))
            optimizer.state.v[i].copy_(torch.from_numpy(ck.adam_v[n]))
