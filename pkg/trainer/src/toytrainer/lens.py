"""LENS weight file writer.

Same container the inference engine reads: magic 'LENS', little-endian u32
version and tensor count, then per tensor a u16 name length, UTF-8 name,
u8 dtype code (0 = float32), u8 rank, u32 dims and the raw element bytes,
zero-padded so every record starts at a file offset divisible by 8 (the last
tensor included). Names are written sorted, so exporting the same tensor map
twice produces byte-identical files.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

MAGIC = b"LENS"
VERSION = 1
_DTYPE_F32 = 0


def write_lens(path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        off = 12
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            enc = name.encode("utf-8")
            rec = struct.pack("<H", len(enc)) + enc
            rec += struct.pack("<BB", _DTYPE_F32, arr.ndim)
            rec += struct.pack(f"<{arr.ndim}I", *arr.shape)
            rec += arr.tobytes()
            f.write(rec)
            off += len(rec)
            pad = (-off) % 8
            if pad:
                f.write(b"\x00" * pad)
                off += pad
