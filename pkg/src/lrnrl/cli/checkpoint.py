"""Single-file versioned checkpoint container.

Layout (all integers little-endian)::

    magic    8 bytes   b"LRNRLCK\\x00"
    version  u32
    count    u32       number of sections
    section  repeated: u16 tag length, tag (ASCII), u64 payload length, payload

Sections, in this order:

* ``config``  UTF-8 config text, as produced by ``serialize``
* ``meta``    UTF-8 JSON: ``{"global_step": int, "updates": int}``
* ``params``  array table of named parameters
* ``adam_m``, ``adam_v``  array tables of the optimiser moments (same names)
* ``adam``    UTF-8 JSON: ``{"step", "beta1", "beta2", "eps"}``
* ``runtime`` UTF-8 JSON: random stream and environment states

An array table is ``u32 n`` followed by ``n`` records of: u16 name length,
name (UTF-8), 4-byte dtype code (``"<f4 "`` or ``"<f8 "``), u32 ndim, ndim x
u32 dims, then the row-major data.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass
from typing import Any

import numpy as np

from .config import ExperimentConfig, parse_text, serialize

MAGIC = b"LRNRLCK\x00"
VERSION = 1
SECTIONS = ("config", "meta", "params", "adam_m", "adam_v", "adam", "runtime")
_DTYPES = {b"<f4 ": np.dtype("<f4"), b"<f8 ": np.dtype("<f8")}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: ExperimentConfig
    global_step: int
    updates: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam: dict[str, Any]
    runtime: dict[str, Any]


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = b"<f4 " if arr.dtype == np.float32 else b"<f8 "
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw + code + struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def _unpack_arrays(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    (n,), pos = struct.unpack_from("<I", view, 0), 4
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + ln]).decode("utf-8")
        pos += ln
        code = bytes(view[pos:pos + 4])
        pos += 4
        if code not in _DTYPES:
            raise CheckpointError(f"array {name!r} has unknown dtype code {code!r}")
        (ndim,) = struct.unpack_from("<I", view, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(view[pos:pos + size], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        pos += size
    return out


def _json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, allow_nan=False).encode("utf-8")


def encode(ck: Checkpoint) -> bytes:
    payloads = {
        "config": serialize(ck.config).encode("utf-8"),
        "meta": _json({"global_step": ck.global_step, "updates": ck.updates}),
        "params": _pack_arrays(ck.params),
        "adam_m": _pack_arrays(ck.adam_m),
        "adam_v": _pack_arrays(ck.adam_v),
        "adam": _json(ck.adam),
        "runtime": _json(ck.runtime),
    }
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(payloads)))
    for tag in SECTIONS:
        raw = tag.encode("ascii")
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<Q", len(payloads[tag])))
        buf.write(payloads[tag])
    return buf.getvalue()


def decode(blob: bytes, source: str = "<checkpoint>") -> Checkpoint:
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{source} is not a checkpoint (bad magic bytes)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"{source} has checkpoint format version {version}; this build reads version {VERSION}")
    pos = 16
    sections = {}
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", blob, pos)
            tag = blob[pos + 2:pos + 2 + ln].decode("ascii")
            pos += 2 + ln
            (size,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            if pos + size > len(blob):
                raise CheckpointError(f"{source} is truncated in section {tag!r}")
            sections[tag] = blob[pos:pos + size]
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"{source} is truncated") from exc
    missing = [t for t in SECTIONS if t not in sections]
    if missing:
        raise CheckpointError(f"{source} lacks sections {missing}")
    meta = json.loads(sections["meta"])
    return Checkpoint(
        config=parse_text(sections["config"].decode("utf-8"), source=f"{source}[config]", environ={}),
        global_step=int(meta["global_step"]),
        updates=int(meta["updates"]),
        params=_unpack_arrays(sections["params"]),
        adam_m=_unpack_arrays(sections["adam_m"]),
        adam_v=_unpack_arrays(sections["adam_v"]),
        adam=json.loads(sections["adam"]),
        runtime=json.loads(sections["runtime"]),
    )


def save(path: str, ck: Checkpoint) -> None:
    """Atomic write: a crash leaves either the old file or the new one."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(ck))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read(), source=path)


# trainer glue ----------------------------------------------------------------------------

def from_trainer(trainer, config: ExperimentConfig) -> Checkpoint:
    named = trainer.model.named_parameters()
    st = trainer.optimizer.state
    return Checkpoint(
        config=config,
        global_step=trainer.global_step,
        updates=trainer.updates,
        params={n: p.data for n, p in named},
        adam_m={n: m for (n, _), m in zip(named, st.m)},
        adam_v={n: v for (n, _), v in zip(named, st.v)},
        adam={"step": st.step, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps},
        runtime=trainer.runtime_state(),
    )


def restore_model(model, params: dict[str, np.ndarray]) -> None:
    named = model.named_parameters()
    expected = [n for n, _ in named]
    if sorted(expected) != sorted(params):
        raise CheckpointError("checkpoint parameters do not match the configured model "
                              f"(missing {sorted(set(expected) - set(params))}, "
                              f"unexpected {sorted(set(params) - set(expected))})")
    for name, p in named:
        if params[name].shape != p.shape:
            raise CheckpointError(f"parameter {name} has shape {params[name].shape}, model expects {p.shape}")
        p.data[...] = params[name]


def restore_trainer(trainer, ck: Checkpoint) -> None:
    restore_model(trainer.model, ck.params)
    st = trainer.optimizer.state
    for (name, _), m, v in zip(trainer.model.named_parameters(), st.m, st.v):
        m[...] = ck.adam_m[name]
        v[...] = ck.adam_v[name]
    st.step = int(ck.adam["step"])
    trainer.load_runtime_state(ck.runtime)
