"""Checkpoint container.

Layout (little-endian)::

    b"LTRJ"  u32 version
    u32 n, n bytes of UTF-8 config text (one key=value per line)
    u32 record count
    per record: u32 name length, name, u32 rank, rank x u32 dims, float64 data

Mixture parameters live in the same container under ``gmm.`` names.
"""

from __future__ import annotations

import struct

import numpy as np

from .data import _Reader
from .errors import ParseError, UnsupportedVersionError

MAGIC = b"LTRJ"
VERSION = 1


def format_config(config: dict) -> str:
    lines = []
    for key in sorted(config):
        val = config[key]
        if "\n" in str(key) or "=" in str(key) or "\n" in str(val):
            raise ValueError(f"config entry {key!r} cannot be serialized")
        if val is None:
            text = "none"
        elif isinstance(val, bool):
            text = "true" if val else "false"
        elif isinstance(val, float):
            text = repr(val)
        else:
            text = str(val)
        lines.append(f"{key}={text}")
    return "\n".join(lines)


def parse_value(text: str):
    low = text.strip().lower()
    if low == "none":
        return None
    if low in ("true", "on", "yes"):
        return True
    if low in ("false", "off", "no"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip()


def parse_config(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"config line {lineno} is not key=value: {line!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = parse_value(val)
    return out


def checkpoint_to_bytes(params: dict, config: dict) -> bytes:
    cfg = format_config(config).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<{1 + arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> tuple[dict, dict]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise ParseError("bad magic, not a checkpoint", 0)
    version = r.u32("version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}", 4)
    n = r.u32("config length")
    start = r.pos
    try:
        config = parse_config(r.take(n, "config block").decode("utf-8"))
    except UnicodeDecodeError:
        raise ParseError("config block is not UTF-8", start) from None
    params = {}
    for _ in range(r.u32("record count")):
        name = r.take(r.u32("name length"), "parameter name").decode("utf-8")
        rank = r.u32("rank")
        dims = tuple(r.u32("dimension") for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        params[name] = np.frombuffer(r.take(8 * count, f"data of {name}"), dtype="<f8") \
            .reshape(dims).astype(np.float64)
    if r.pos != len(buf):
        raise ParseError("trailing bytes after last record", r.pos)
    return params, config


def write_checkpoint(path, params: dict, config: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(params, config))


def read_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
