"""Minimal NIfTI-1 writer for the synthetic case cache.

Writes single-file little-endian volumes the inference engine reads directly:
float32 images (datatype 16) and uint16 label maps (datatype 512). Arrays are
indexed (z, y, x); spacing is (z, y, x) voxel size in mm. The affine is the
diagonal voxel-size map in the on-disk (x, y, z) convention, stored as an
sform with code 2.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348


def write_nifti(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    if data.ndim != 3:
        raise ValueError(f"volume must be 3D, got {data.ndim}D")
    if np.issubdtype(data.dtype, np.integer):
        arr = np.ascontiguousarray(data, dtype="<u2")
        datatype = 512
    else:
        arr = np.ascontiguousarray(data, dtype="<f4")
        datatype = 16
    nz, ny, nx = arr.shape
    sz, sy, sx = (float(s) for s in spacing)

    header = bytearray(HEADER_SIZE + 4)  # trailing 4 zero bytes: no extensions
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, datatype, arr.dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, sx, sy, sz, 0, 0, 0, 0)
    struct.pack_into("<f", header, 108, float(HEADER_SIZE + 4))
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<2h", header, 252, 0, 2)  # no qform, sform "aligned"
    struct.pack_into("<4f", header, 280, sx, 0, 0, 0)
    struct.pack_into("<4f", header, 296, 0, sy, 0, 0)
    struct.pack_into("<4f", header, 312, 0, 0, sz, 0)
    header[344:348] = b"n+1\x00"

    path = Path(path)
    payload = bytes(header) + arr.tobytes()
    if path.suffix == ".gz":
        with open(path, "wb") as raw:
            with gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as f:
                f.write(payload)
    else:
        path.write_bytes(payload)
