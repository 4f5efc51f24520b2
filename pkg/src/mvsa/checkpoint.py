"""Binary model snapshots: architecture text + named float32 tensors.

Layout (all integers little-endian u32):

    magic  b"MVSA"
    version
    len(config_text)   config_text (utf-8, flat key = value architecture block)
    len(extras_text)   extras_text (utf-8, free-form `key = value` string pairs)
    n_tensors
    per tensor: len(name), name (utf-8), ndim, dims..., float32 data (C order)

Values are stored at float32 precision; loading widens back to float64, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct

import numpy as np

from .config import ModelConfig, format_model_config, parse_model_config
from .errors import DataError

MAGIC = b"MVSA"
VERSION = 1


def _format_extras(extras: dict[str, str]) -> str:
    lines = []
    for key in sorted(extras):
        value = extras[key]
        if "\n" in key or "\n" in value or "=" in key:
            raise DataError(f"extras entry {key!r} contains characters the header format cannot hold")
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + ("\n" if lines else "")


def _parse_extras(text: str) -> dict[str, str]:
    extras: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise DataError(f"malformed extras line {line!r}")
        key, value = line.split("=", 1)
        extras[key.strip()] = value.strip()
    return extras


def save_checkpoint(path, model_config: ModelConfig, tensors: dict[str, np.ndarray], extras: dict[str, str] | None = None) -> None:
    """Write one snapshot; `tensors` values may be Tensors or arrays."""
    config_bytes = format_model_config(model_config).encode("utf-8")
    extras_bytes = _format_extras(extras or {}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
        fh.write(struct.pack("<I", len(extras_bytes)))
        fh.write(extras_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            value = tensors[name]
            data = np.ascontiguousarray(getattr(value, "data", value), dtype="<f4")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    chunk = fh.read(n)
    if len(chunk) != n:
        raise DataError(f"checkpoint truncated while reading {what} ({len(chunk)} of {n} bytes)")
    return chunk


def _read_u32(fh, what: str) -> int:
    return struct.unpack("<I", _read_exact(fh, 4, what))[0]


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, str], dict[str, np.ndarray]]:
    """Read a snapshot back; tensors come out as float64 arrays."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DataError(f"not a model checkpoint: bad magic {magic!r}")
        version = _read_u32(fh, "version")
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        config_text = _read_exact(fh, _read_u32(fh, "config length"), "config block").decode("utf-8")
        extras_text = _read_exact(fh, _read_u32(fh, "extras length"), "extras block").decode("utf-8")
        model_config = parse_model_config(config_text)
        extras = _parse_extras(extras_text)
        tensors: dict[str, np.ndarray] = {}
        n_tensors = _read_u32(fh, "tensor count")
        for _ in range(n_tensors):
            name = _read_exact(fh, _read_u32(fh, "tensor name length"), "tensor name").decode("utf-8")
            ndim = _read_u32(fh, f"rank of {name}")
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, f"shape of {name}"))
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            raw = _read_exact(fh, 4 * count, f"data of {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
        trailing = fh.read(1)
        if trailing:
            raise DataError("checkpoint has trailing bytes after the last tensor")
    return model_config, extras, tensors
