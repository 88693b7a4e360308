"""Minimal 3D tensor kernels for CPU inference.

All activations are "Tensor4" arrays: contiguous float32 of shape
(C, D, H, W). Ops are pure functions; with a fixed single-thread BLAS the
results are bitwise deterministic because accumulation order is fixed.

conv3d has two routes: a fast per-offset tensordot accumulation and a plain
sliding-window loop (conv3d_direct) kept as a correctness anchor. They must
agree to 1e-5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


def check_tensor4(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4D (C,D,H,W), got {x.ndim}D")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has a non-positive dim: {x.shape}")
    return np.ascontiguousarray(x, dtype=np.float32)


@dataclass(frozen=True)
class PadSpec:
    """Per-spatial-axis (before, after) pad amounts; crop() is the exact inverse."""

    d: tuple[int, int]
    h: tuple[int, int]
    w: tuple[int, int]

    def __post_init__(self):
        for axis in (self.d, self.h, self.w):
            if axis[0] < 0 or axis[1] < 0:
                raise ShapeError(f"pad amounts must be non-negative: {self}")

    def crop(self, x: np.ndarray) -> np.ndarray:
        (db, da), (hb, ha), (wb, wa) = self.d, self.h, self.w
        nd, nh, nw = x.shape[-3:]
        return x[..., db : nd - da, hb : nh - ha, wb : nw - wa]


def conv3d(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray | None = None,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """3D convolution (cross-correlation), zero padding, isotropic stride.

    x: (C_in, D, H, W), w: (C_out, C_in, k, k, k), b: (C_out,) or None.
    Output spatial dims are floor((dim + 2*padding - k) / stride) + 1.
    """
    x = check_tensor4(x, "conv input")
    if w.ndim != 5:
        raise ShapeError(f"kernel must be 5D (C_out,C_in,k,k,k), got {w.ndim}D")
    c_out, c_in, kd, kh, kw = w.shape
    if c_in != x.shape[0]:
        raise ShapeError(f"kernel expects {c_in} input channels, tensor has {x.shape[0]}")
    if not (kd == kh == kw) or kd % 2 == 0:
        raise ShapeError(f"kernel must be cubic with odd size, got {(kd, kh, kw)}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"bad stride/padding: {stride}/{padding}")

    k = kd
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (padding, padding)))
    _, d, h, wdim = x.shape
    od = (d - k) // stride + 1
    oh = (h - k) // stride + 1
    ow = (wdim - k) // stride + 1
    if min(od, oh, ow) < 1:
        raise ShapeError(f"kernel {k} does not fit input {x.shape[1:]} at stride {stride}")

    w = np.ascontiguousarray(w, dtype=np.float32)
    out = np.zeros((c_out, od, oh, ow), dtype=np.float32)
    # accumulate one kernel offset at a time; each tap is a (C_out,C_in) matmul
    # against a strided view, so no im2row buffer is ever materialised
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                win = x[
                    :,
                    dz : dz + (od - 1) * stride + 1 : stride,
                    dy : dy + (oh - 1) * stride + 1 : stride,
                    dx : dx + (ow - 1) * stride + 1 : stride,
                ]
                out += np.tensordot(w[:, :, dz, dy, dx], win, axes=([1], [0]))
    if b is not None:
        out += np.asarray(b, dtype=np.float32).reshape(c_out, 1, 1, 1)
    return out


def conv3d_direct(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray | None = None,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Sliding-window reference convolution. Slow; for cross-checking conv3d."""
    x = check_tensor4(x, "conv input")
    c_out, c_in, k = w.shape[0], w.shape[1], w.shape[2]
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (padding, padding)))
    _, d, h, wdim = x.shape
    od = (d - k) // stride + 1
    oh = (h - k) // stride + 1
    ow = (wdim - k) // stride + 1
    out = np.empty((c_out, od, oh, ow), dtype=np.float32)
    wf = w.astype(np.float32).reshape(c_out, -1)
    for z in range(od):
        for y in range(oh):
            for xx in range(ow):
                block = x[
                    :,
                    z * stride : z * stride + k,
                    y * stride : y * stride + k,
                    xx * stride : xx * stride + k,
                ].reshape(-1)
                out[:, z, y, xx] = wf @ block
    if b is not None:
        out += np.asarray(b, dtype=np.float32).reshape(c_out, 1, 1, 1)
    return out


def instance_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Per-channel standardization over (D,H,W); no learned affine.

    Uses the biased variance. Constant channels come out all-zero thanks to
    the eps floor.
    """
    x = check_tensor4(x, "norm input")
    mean = x.mean(axis=(1, 2, 3), keepdims=True, dtype=np.float64)
    var = x.var(axis=(1, 2, 3), keepdims=True, dtype=np.float64)
    scale = 1.0 / np.sqrt(var + eps)
    return ((x - mean) * scale).astype(np.float32)


def _axis_resize_linear(x: np.ndarray, axis: int, out_n: int) -> np.ndarray:
    """Linear resize along one axis with half-pixel sample centers."""
    in_n = x.shape[axis]
    if in_n == out_n:
        return x
    # source coordinate of each output center; clamp keeps edges replicated
    src = (np.arange(out_n, dtype=np.float64) + 0.5) * (in_n / out_n) - 0.5
    src = np.clip(src, 0.0, in_n - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_n - 1)
    frac = (src - lo).astype(np.float32)
    shape = [1] * x.ndim
    shape[axis] = out_n
    frac = frac.reshape(shape)
    lo_vals = np.take(x, lo, axis=axis)
    hi_vals = np.take(x, hi, axis=axis)
    return lo_vals * (1.0 - frac) + hi_vals * frac


def trilinear_resize(x: np.ndarray, target: tuple[int, int, int]) -> np.ndarray:
    """Trilinear interpolation to target (D,H,W), half-pixel-center convention.

    Separable per-axis passes; identical shape returns the input unchanged.
    """
    x = check_tensor4(x, "resize input")
    if len(target) != 3 or min(target) < 1:
        raise ShapeError(f"target dims must be 3 positive ints, got {target}")
    if tuple(x.shape[1:]) == tuple(target):
        return x
    for axis, out_n in zip((1, 2, 3), target):
        x = _axis_resize_linear(x, axis, int(out_n))
    return np.ascontiguousarray(x, dtype=np.float32)


def max_pool_downscale(x: np.ndarray, factor: tuple[int, int, int]) -> np.ndarray:
    """Block max pooling by per-axis integer factors.

    Edge blocks that overhang the volume are padded with -inf internally, so
    every output voxel is the max of the real voxels it covers. Output dims
    are ceil(dim / factor).
    """
    x = check_tensor4(x, "pool input")
    if len(factor) != 3 or min(factor) < 1:
        raise ShapeError(f"pool factors must be 3 positive ints, got {factor}")
    fd, fh, fw = (int(f) for f in factor)
    if (fd, fh, fw) == (1, 1, 1):
        return x
    c, d, h, w = x.shape
    pd = (-d) % fd
    ph = (-h) % fh
    pw = (-w) % fw
    if pd or ph or pw:
        x = np.pad(x, ((0, 0), (0, pd), (0, ph), (0, pw)), constant_values=-np.inf)
    od, oh, ow = (d + pd) // fd, (h + ph) // fh, (w + pw) // fw
    return x.reshape(c, od, fd, oh, fh, ow, fw).max(axis=(2, 4, 6))


def l2_normalize(x: np.ndarray, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    """Scale vectors along ``axis`` to unit L2 norm; zero vectors stay zero."""
    norm = np.sqrt(np.sum(np.square(x, dtype=np.float32), axis=axis, keepdims=True))
    return (x / np.maximum(norm, eps)).astype(np.float32)


def pad_to_multiple(x: np.ndarray, m: int) -> tuple[np.ndarray, PadSpec]:
    """Zero-pad spatial dims at the high end up to the next multiple of m."""
    x = check_tensor4(x, "pad input")
    if m < 1:
        raise ShapeError(f"multiple must be >= 1, got {m}")
    _, d, h, w = x.shape
    spec = PadSpec((0, (-d) % m), (0, (-h) % m), (0, (-w) % m))
    if spec.d[1] or spec.h[1] or spec.w[1]:
        x = np.pad(x, ((0, 0), spec.d, spec.h, spec.w))
    return x, spec
