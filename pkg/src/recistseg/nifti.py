"""NIfTI-1 volume I/O.

Reads and writes single-file NIfTI-1 volumes (.nii, optionally gzip-compressed),
preserving geometry so written masks align voxel-for-voxel with their source
images. Data is held in (z, y, x) index order; ``spacing`` follows the same
(z, y, x) order. The affine keeps the on-disk convention: it maps homogeneous
voxel indices ordered (x, y, z, 1) to world millimetres, and is never
reoriented.

Only 3D volumes (or 4D with a singleton fourth dimension) are supported;
NIfTI-2 and .hdr/.img pairs are not.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionalityError, InputError, NiftiParseError, UnsupportedDtypeError

HEADER_SIZE = 348
GZIP_MAGIC = b"\x1f\x8b"

# NIfTI-1 datatype codes we accept on disk; everything is converted to f32
# (labels to u16) in memory.
_DTYPE_CODES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    512: np.dtype(np.uint16),
}
_CODE_FOR_DTYPE = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class Volume:
    """A 3D scalar grid with voxel spacing and affine geometry.

    data:    float32 array indexed (z, y, x)
    spacing: per-axis voxel size in mm, (z, y, x) order, strictly positive
    affine:  4x4 voxel-to-world transform in the on-disk (x, y, z) convention
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray = field(default=None)
    dtype_on_disk: str = "float32"

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise DimensionalityError(f"volume data must be 3D, got {self.data.ndim}D")
        if self.data.dtype != np.float32 and not np.issubdtype(self.data.dtype, np.integer):
            self.data = self.data.astype(np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise InputError(f"spacing must be 3 strictly positive values, got {self.spacing}")
        if self.affine is None:
            self.affine = np.diag([self.spacing[2], self.spacing[1], self.spacing[0], 1.0])
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.affine.shape != (4, 4):
            raise InputError(f"affine must be 4x4, got {self.affine.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def same_geometry(self, other: "Volume", tol: float = 1e-5) -> bool:
        return (
            self.shape == other.shape
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.affine, other.affine, atol=tol)
        )


@dataclass
class LabelVolume(Volume):
    """Integer label map sharing Volume's geometry; 0 is background."""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if not np.issubdtype(self.data.dtype, np.integer):
            raise InputError(f"label data must be integer, got {self.data.dtype}")
        if self.data.size and (self.data.min() < 0 or self.data.max() > np.iinfo(np.uint16).max):
            raise InputError("labels must be non-negative and fit in 16 bits")
        self.data = self.data.astype(np.uint16, copy=False)
        super().__post_init__()
        self.dtype_on_disk = "uint16"


def _unpack(fmt: str, header: bytes, offset: int):
    return struct.unpack_from(fmt, header, offset)


def _parse_header(header: bytes):
    """Parse the 348-byte header, returning a dict of the fields we use."""
    if len(header) < HEADER_SIZE:
        raise NiftiParseError(f"file too short for a NIfTI-1 header ({len(header)} bytes)")
    (sizeof_hdr_le,) = struct.unpack_from("<i", header, 0)
    if sizeof_hdr_le == HEADER_SIZE:
        endian = "<"
    else:
        (sizeof_hdr_be,) = struct.unpack_from(">i", header, 0)
        if sizeof_hdr_be != HEADER_SIZE:
            raise NiftiParseError(f"sizeof_hdr is {sizeof_hdr_le}, expected 348")
        endian = ">"

    magic = header[344:348]
    if magic not in (b"n+1\x00",):
        raise NiftiParseError(f"magic is {magic!r}, expected b'n+1\\x00'")

    dim = _unpack(endian + "8h", header, 40)
    datatype, bitpix = _unpack(endian + "2h", header, 70)
    pixdim = _unpack(endian + "8f", header, 76)
    (vox_offset,) = _unpack(endian + "f", header, 108)
    scl_slope, scl_inter = _unpack(endian + "2f", header, 112)
    qform_code, sform_code = _unpack(endian + "2h", header, 252)
    quatern = _unpack(endian + "3f", header, 256)
    qoffset = _unpack(endian + "3f", header, 268)
    srow_x = _unpack(endian + "4f", header, 280)
    srow_y = _unpack(endian + "4f", header, 296)
    srow_z = _unpack(endian + "4f", header, 312)

    if dim[0] == 4:
        if dim[4] != 1:
            raise DimensionalityError(f"4D volume with dim[4]={dim[4]}; only singleton supported")
    elif dim[0] != 3:
        raise DimensionalityError(f"dim[0] is {dim[0]}; only 3D (or 4D singleton) supported")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if nx <= 0 or ny <= 0 or nz <= 0:
        raise NiftiParseError(f"dim has non-positive extent {(nx, ny, nz)}")
    if any(p <= 0 for p in pixdim[1:4]):
        raise NiftiParseError(f"pixdim has non-positive spacing {pixdim[1:4]}")

    if datatype not in _DTYPE_CODES:
        raise UnsupportedDtypeError(f"on-disk datatype code {datatype} not supported")
    dtype = _DTYPE_CODES[datatype].newbyteorder(endian)
    if bitpix != dtype.itemsize * 8:
        raise NiftiParseError(f"bitpix {bitpix} inconsistent with datatype {datatype}")

    vox_offset = int(vox_offset) if vox_offset >= HEADER_SIZE else HEADER_SIZE + 4
    return {
        "endian": endian,
        "shape_zyx": (nz, ny, nx),
        "dtype": dtype,
        "pixdim": pixdim,
        "vox_offset": vox_offset,
        "scl_slope": scl_slope,
        "scl_inter": scl_inter,
        "qform_code": qform_code,
        "sform_code": sform_code,
        "quatern": quatern,
        "qoffset": qoffset,
        "srows": (srow_x, srow_y, srow_z),
    }


def _affine_from_header(h) -> np.ndarray:
    if h["sform_code"] > 0:
        aff = np.eye(4)
        aff[0, :] = h["srows"][0]
        aff[1, :] = h["srows"][1]
        aff[2, :] = h["srows"][2]
        return aff
    if h["qform_code"] > 0:
        b, c, d = (float(q) for q in h["quatern"])
        a = float(np.sqrt(max(0.0, 1.0 - b * b - c * c - d * d)))
        rot = np.array(
            [
                [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
                [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
                [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
            ]
        )
        qfac = h["pixdim"][0]
        qfac = 1.0 if qfac == 0 else float(qfac)
        scale = np.array([h["pixdim"][1], h["pixdim"][2], h["pixdim"][3] * qfac])
        aff = np.eye(4)
        aff[:3, :3] = rot * scale[np.newaxis, :]
        aff[:3, 3] = h["qoffset"]
        return aff
    return np.diag([h["pixdim"][1], h["pixdim"][2], h["pixdim"][3], 1.0])


def _read_stored(path):
    """Read header + raw voxel array; gzip containers detected by magic bytes."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    with open(path, "rb") as raw:
        magic = raw.read(2)
        raw.seek(0)
        stream = gzip.GzipFile(fileobj=raw) if magic == GZIP_MAGIC else raw
        try:
            header = stream.read(HEADER_SIZE)
            h = _parse_header(header)
            skip = h["vox_offset"] - HEADER_SIZE
            if skip:
                stream.read(skip)
            nz, ny, nx = h["shape_zyx"]
            count = nz * ny * nx
            buf = stream.read(count * h["dtype"].itemsize)
        except (OSError, EOFError) as exc:  # truncated gzip stream etc.
            raise NiftiParseError(f"failed to read voxel data: {exc}") from exc
    if len(buf) < count * h["dtype"].itemsize:
        raise NiftiParseError(
            f"voxel data truncated: expected {count * h['dtype'].itemsize} bytes, got {len(buf)}"
        )
    stored = np.frombuffer(buf, dtype=h["dtype"], count=count).reshape(nz, ny, nx)
    pix = h["pixdim"]
    spacing = (float(pix[3]), float(pix[2]), float(pix[1]))
    return stored, spacing, _affine_from_header(h), h


def read_nifti(path) -> Volume:
    """Read a NIfTI-1 volume as float32, applying scl_slope/scl_inter if set.

    Raises NiftiParseError / UnsupportedDtypeError / DimensionalityError on
    malformed input. Beyond the raw read buffer, allocates only the one f32
    conversion buffer.
    """
    stored, spacing, affine, h = _read_stored(path)
    base = h["dtype"].newbyteorder("=")
    slope, inter = h["scl_slope"], h["scl_inter"]
    scaled = np.isfinite(slope) and slope != 0 and not (slope == 1 and inter == 0)

    data = stored.astype(np.float32)
    if scaled:
        data *= np.float32(slope)
        if np.isfinite(inter) and inter != 0:
            data += np.float32(inter)
    return Volume(data, spacing, affine, dtype_on_disk=str(base))


def read_labels(path) -> LabelVolume:
    """Read a volume as an integer label map (u16 in memory)."""
    stored, spacing, affine, h = _read_stored(path)
    if np.issubdtype(h["dtype"].newbyteorder("="), np.integer):
        vals = stored
    else:
        vals = np.rint(stored)
        if not np.array_equal(vals, stored):
            raise InputError(f"{path} holds non-integer values; not a label map")
    if vals.size and (vals.min() < 0 or vals.max() > np.iinfo(np.uint16).max):
        raise InputError(f"{path} holds labels outside the 16-bit range")
    return LabelVolume(vals.astype(np.uint16), spacing, affine)


def write_nifti(vol: Volume, path, compress: bool | None = None) -> None:
    """Write a volume as single-file NIfTI-1 (little-endian).

    LabelVolume data is stored as u16, Volume data as f32. ``compress=None``
    infers gzip from a .gz suffix.
    """
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"

    if isinstance(vol, LabelVolume):
        arr = np.ascontiguousarray(vol.data, dtype="<u2")
        datatype = 512
    else:
        arr = np.ascontiguousarray(vol.data, dtype="<f4")
        datatype = 16
    nz, ny, nx = arr.shape

    header = bytearray(HEADER_SIZE + 4)  # +4: empty extension flag
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, datatype, arr.dtype.itemsize * 8)
    struct.pack_into(
        "<8f", header, 76, 1.0, vol.spacing[2], vol.spacing[1], vol.spacing[0], 0, 0, 0, 0
    )
    struct.pack_into("<f", header, 108, float(HEADER_SIZE + 4))
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<2h", header, 252, 0, 2)  # qform unused, sform "aligned"
    aff = vol.affine
    struct.pack_into("<4f", header, 280, *aff[0, :])
    struct.pack_into("<4f", header, 296, *aff[1, :])
    struct.pack_into("<4f", header, 312, *aff[2, :])
    header[344:348] = b"n+1\x00"

    if compress:
        # mtime=0 and no embedded filename keep bytes deterministic
        with open(path, "wb") as raw:
            with gzip.GzipFile(
                filename="", fileobj=raw, mode="wb", compresslevel=4, mtime=0
            ) as f:
                f.write(bytes(header))
                f.write(arr.tobytes())
    else:
        with open(path, "wb") as f:
            f.write(bytes(header))
            f.write(arr.tobytes())
