"""Versioned binary checkpoint container.

Layout: magic, version, endian flag, a length-prefixed JSON header (config,
ordered parameter/optimizer-state names and shapes, loop counters), then the
raw little-endian float64 payloads in header order. Loading a checkpoint into
a training run with a different configuration is refused via a config hash.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VPCK"
VERSION = 1
LITTLE_ENDIAN_FLAG = 0x01


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, config: dict, params: dict, opt_arrays: dict, extra: dict):
    """params/opt_arrays map name -> float64 array; extra must be JSON-able."""
    param_items = sorted(params.items())
    opt_items = sorted(opt_arrays.items())
    header = {
        "config": config,
        "config_hash": config_hash(config),
        "params": [[name, list(np.shape(arr))] for name, arr in param_items],
        "opt": [[name, list(np.shape(arr))] for name, arr in opt_items],
        "extra": extra,
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HB", VERSION, LITTLE_ENDIAN_FLAG))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, arr in param_items + opt_items:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, expect_config: dict | None = None):
    """Returns (config, params, opt_arrays, extra)."""
    raw = Path(path).read_bytes()
    if len(raw) < 15 or raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, endian = struct.unpack("<HB", raw[4:7])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if endian != LITTLE_ENDIAN_FLAG:
        raise ValueError(f"{path}: foreign byte order")
    (hlen,) = struct.unpack("<Q", raw[7:15])
    try:
        header = json.loads(raw[15 : 15 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupted header ({exc})") from exc
    if expect_config is not None and config_hash(expect_config) != header["config_hash"]:
        raise ValueError(
            f"{path}: checkpoint config hash {header['config_hash'][:12]} does not "
            f"match the requested configuration {config_hash(expect_config)[:12]}"
        )
    off = 15 + hlen
    out_params = {}
    out_opt = {}
    for section, target in (("params", out_params), ("opt", out_opt)):
        for name, shape in header[section]:
            n = int(np.prod(shape)) if shape else 1
            end = off + 8 * n
            if end > len(raw):
                raise ValueError(f"{path}: truncated payload at {name}")
            arr = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).copy()
            target[name] = arr
            off = end
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after payload")
    return header["config"], out_params, out_opt, header["extra"]
