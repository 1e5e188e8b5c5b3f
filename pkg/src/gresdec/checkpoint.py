"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes   b"GRESCKPT"
    version    uint32    1
    hdr_len    uint32    byte length of the JSON header
    header     hdr_len   UTF-8 JSON: {"config": ..., "meta": ..., "n_tensors": K}
    K records, each:
        key_len  uint16, key  (UTF-8, dotted module path)
        ndim     uint8,  dims uint32 * ndim
        data     float32 * prod(dims), row-major
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"GRESCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: dict[str, torch.Tensor], config: dict, meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"config": config, "meta": meta, "n_tensors": len(state)}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header)
        for key in sorted(state):
            arr = state[key].detach().cpu().numpy().astype("<f4", copy=False)
            k = key.encode()
            f.write(struct.pack("<H", len(k)) + k)
            f.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())
    return path


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict, dict]:
    """Returns (state, config dict, meta dict)."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 16
    header = json.loads(buf[pos:pos + hlen].decode())
    pos += hlen
    state = {}
    for _ in range(header["n_tensors"]):
        (klen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        key = buf[pos:pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        state[key] = torch.from_numpy(arr.copy())
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return state, header["config"], header["meta"]
