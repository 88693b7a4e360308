"""LENS weight file format.

Layout (all integers little-endian):

    magic 'LENS' | u32 version=1 | u32 tensor_count
    per tensor:
        u16 name_len | name bytes (UTF-8) | u8 dtype (0 = float32) |
        u8 rank | u32 dims[rank] | raw little-endian element data
    zero padding after each tensor so the next record starts at a file
    offset divisible by 8 (the last tensor is padded the same way)

The writer emits tensors in sorted name order, so identical tensor maps
produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import InputError, LensVersionError

MAGIC = b"LENS"
VERSION = 1
_DTYPE_F32 = 0


def read_lens(path) -> dict[str, np.ndarray]:
    """Parse a LENS file into a name -> float32 array map."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such weight file: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise InputError(f"{path} is not a LENS file (magic {blob[:4]!r})")
    if len(blob) < 12:
        raise InputError(f"{path} truncated before the tensor table")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise LensVersionError(f"weight format version {version}, engine supports {VERSION}")
    (count,) = struct.unpack_from("<I", blob, 8)

    tensors: dict[str, np.ndarray] = {}
    off = 12
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            dtype_code, rank = struct.unpack_from("<BB", blob, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
            off += 4 * rank
        except (struct.error, UnicodeDecodeError) as exc:
            raise InputError(f"{path}: corrupt tensor record: {exc}") from exc
        if dtype_code != _DTYPE_F32:
            raise InputError(f"{path}: tensor {name!r} has unsupported dtype code {dtype_code}")
        n = 1
        for d in dims:
            n *= d
        nbytes = 4 * n
        if off + nbytes > len(blob):
            raise InputError(f"{path}: tensor {name!r} data runs past end of file")
        if name in tensors:
            raise InputError(f"{path}: duplicate tensor name {name!r}")
        data = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
        tensors[name] = np.ascontiguousarray(data)
        off += nbytes
        off += (-off) % 8  # records are 8-byte aligned
    return tensors


def write_lens(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write a tensor map; names are sorted so output bytes are deterministic."""
    names = sorted(tensors)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(names)))
        off = 12
        for name in names:
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


def config_fingerprint(canonical: Mapping) -> str:
    """Stable hash of a canonical config dict."""
    blob = json.dumps(canonical, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class ModelWeights:
    """Validated, immutable tensor map plus provenance of its config."""

    tensors: Mapping[str, np.ndarray] = field(repr=False)
    version: int
    fingerprint: str
    config: object = None

    def __post_init__(self):
        for arr in self.tensors.values():
            arr.setflags(write=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def param_count(self) -> int:
        return int(sum(arr.size for arr in self.tensors.values()))
