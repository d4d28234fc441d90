"""Binary checkpoint format with a bit-exact round trip.

Layout (all integers little-endian uint32):

    magic b"SLV1"
    format version
    config text length, canonical config text (utf-8 key=value lines)
    record count
    per record: name length, name (utf-8), rank, extents...,
                raw little-endian float32 data

Parameters are stored as float32 regardless of the in-memory dtype;
loading a checkpoint saved from a float32 model reproduces every array
bit for bit.
"""

from __future__ import annotations

import struct

import numpy as np

from .config import ModelConfig

MAGIC = b"SLV1"
VERSION = 1


def save_checkpoint(path, model) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        text = model.config.canonical_text().encode("utf-8")
        f.write(struct.pack("<I", len(text)))
        f.write(text)
        names = sorted(model.params)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(model.params[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                f.write(struct.pack("<I", extent))
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Returns (config, params dict of float32 arrays)."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path} is not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (text_len,) = struct.unpack("<I", f.read(4))
        config = ModelConfig.from_canonical_text(f.read(text_len).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            params[name] = np.array(data)  # own, writable copy
        return config, params
