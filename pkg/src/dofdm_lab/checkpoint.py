"""Binary checkpoint container: magic, JSON config payload, named f32 blobs.

Round trips are bit-exact: arrays are stored little-endian float32 and read
back verbatim. The config payload is free-form JSON owned by the caller
(model type and config, optimizer state, manifest hash).
"""

from __future__ import annotations

import json
import struct

import numpy as np

CHECKPOINT_MAGIC = b"TDCK"
CHECKPOINT_VERSION = 1

_HEAD = struct.Struct("<4sII")
_BLOB_NAME = struct.Struct("<I")
_BLOB_COUNT = struct.Struct("<Q")


def save_checkpoint(path, config: dict, arrays: dict) -> None:
    payload = json.dumps(config, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            raw = name.encode()
            fh.write(_BLOB_NAME.pack(len(raw)))
            fh.write(raw)
            fh.write(_BLOB_COUNT.pack(arr.size))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple:
    """Returns (config dict, {name: float32 array}); shapes are the caller's job."""
    with open(path, "rb") as fh:
        head = fh.read(_HEAD.size)
        if len(head) != _HEAD.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, cfg_len = _HEAD.unpack(head)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (magic {magic!r})")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        config = json.loads(fh.read(cfg_len).decode())
        (n_blobs,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(n_blobs):
            (name_len,) = _BLOB_NAME.unpack(fh.read(_BLOB_NAME.size))
            name = fh.read(name_len).decode()
            (count,) = _BLOB_COUNT.unpack(fh.read(_BLOB_COUNT.size))
            data = fh.read(count * 4)
            if len(data) != count * 4:
                raise ValueError(f"{path}: blob {name!r} truncated")
            arrays[name] = np.frombuffer(data, dtype="<f4").copy()
        return config, arrays
