"""Checkpoint container.

Layout (little endian)::

    b"PSYN0001" | u32 metadata length | metadata (UTF-8 JSON) | float32 payloads

The metadata holds the config, stage, step counter, training history and
a tensor directory ``[{"name", "shape"}, ...]``; payloads follow in
directory order.  Parameters are stored as ``param/<name>`` and Adam
moments as ``adam_m/<name>`` and ``adam_v/<name>``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import ModelConfig, init_model
from .training import Adam, Checkpoint

MAGIC = b"PSYN0001"
FORMAT_VERSION = 1
_LEN = struct.Struct("<I")


def _tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{name}", t.data) for name, t in ckpt.model.named_parameters().items()]
    opt = ckpt.optimizer
    out += [(f"adam_m/{name}", opt.m[name]) for name in sorted(opt.m)]
    out += [(f"adam_v/{name}", opt.v[name]) for name in sorted(opt.v)]
    return out


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors = _tensors(ckpt)
    opt = ckpt.optimizer
    meta = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "stage": ckpt.stage,
        "step": ckpt.step,
        "history": ckpt.history,
        "optimizer": {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "t": opt.t},
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in tensors],
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, _LEN.pack(len(blob)), blob]
    parts += [np.ascontiguousarray(arr, dtype="<f4").tobytes() for _, arr in tensors]
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def checkpoint_from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if raw[:8] != MAGIC:
        raise FormatError(f"{source}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise FormatError(f"{source}: truncated header")
    (size,) = _LEN.unpack_from(raw, 8)
    try:
        meta = json.loads(raw[12:12 + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: unreadable metadata ({exc})") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported format version {meta.get('format_version')}")
    model = init_model(ModelConfig.from_dict(meta["config"]))
    model.stage = int(meta["stage"])
    params = model.named_parameters()
    o = meta["optimizer"]
    opt = Adam(o["beta1"], o["beta2"], o["eps"], int(o["t"]))
    offset = 12 + size
    seen = set()
    for entry in meta["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(raw):
            raise FormatError(f"{source}: payload for {name} runs past the end of the file")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset = end
        kind, _, key = name.partition("/")
        if kind == "param":
            if key not in params:
                raise FormatError(f"{source}: unknown parameter {key}")
            if params[key].shape != shape:
                raise FormatError(f"{source}: parameter {key} has shape {shape}, config implies {params[key].shape}")
            params[key].data = arr
            seen.add(key)
        elif kind == "adam_m":
            opt.m[key] = arr
        elif kind == "adam_v":
            opt.v[key] = arr
        else:
            raise FormatError(f"{source}: unknown tensor group in {name}")
    if offset != len(raw):
        raise FormatError(f"{source}: {len(raw) - offset} trailing bytes after the last payload")
    missing = set(params) - seen
    if missing:
        raise FormatError(f"{source}: missing parameters {sorted(missing)[:3]}")
    history = meta.get("history") or {"stage1": [], "stage2": []}
    return Checkpoint(model, opt, int(meta["step"]), history)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read checkpoint ({exc})") from None
    return checkpoint_from_bytes(raw, str(path))
