"""Training-sample extraction: category pick, margin crop, flips, pooling.

The geometry mirrors what the inference engine does to a case so the model
trains on the distribution it will be prompted with: one joint crop around
the union of the lesions' enclosing spheres, max-pool downscale when the
crop exceeds the patch budget, min-max normalization, zero-pad to multiples
of 8, and endpoint coordinates carried through every step. Flips are the
one training-only augmentation: each axis reverses with probability 1/2 and
endpoint coordinates reflect as c' = extent - 1 - c.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import TrainCase

R_MIN_VOX = 1.5


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 75
    lr: float = 0.002
    batch: int = 1
    margin_range: tuple[int, int] = (1, 64)
    flip_prob: float = 0.5
    max_patch: tuple[int, int, int] = (16, 16, 16)
    muon_momentum: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.batch != 1:
            raise ValueError("batch size is fixed at 1")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        lo, hi = self.margin_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad margin range {self.margin_range}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


@dataclass(frozen=True)
class Sample:
    patch: np.ndarray  # (1, D, H, W) float32, dims divisible by 8
    targets: np.ndarray  # (P, D, H, W) float32 binary masks
    token_positions: np.ndarray  # (2P, 3) float32 in [0, 1)
    labels: tuple[int, ...]
    margin: int
    flips: tuple[bool, bool, bool]
    origin: tuple[int, int, int]
    extent: tuple[int, int, int]
    pool: tuple[int, int, int]


def pick_case(dataset: list[TrainCase], rng: np.random.Generator) -> TrainCase:
    """Uniform over categories first, then uniform within the category."""
    cats = sorted({c.category for c in dataset})
    cat = cats[rng.integers(len(cats))]
    members = [c for c in dataset if c.category == cat]
    return members[rng.integers(len(members))]


def _sphere(ann) -> tuple[np.ndarray, float]:
    p0 = np.asarray(ann.p0)
    p1 = np.asarray(ann.p1)
    radius = max(float(np.linalg.norm(p1 - p0)) / 2.0, R_MIN_VOX)
    return (p0 + p1) / 2.0, radius


def _max_pool(x: np.ndarray, factor: tuple[int, int, int]) -> np.ndarray:
    """Block max over (C, D, H, W); overhanging blocks padded with -inf."""
    if max(factor) == 1:
        return x
    c, d, h, w = x.shape
    fd, fh, fw = factor
    pads = ((0, 0), (0, (-d) % fd), (0, (-h) % fh), (0, (-w) % fw))
    if any(p[1] for p in pads):
        x = np.pad(x, pads, constant_values=-np.inf)
    od, oh, ow = (s // f for s, f in zip(x.shape[1:], factor))
    return x.reshape(c, od, fd, oh, fh, ow, fw).max(axis=(2, 4, 6))


def sample_case(dataset: list[TrainCase], cfg: TrainConfig,
                rng: np.random.Generator) -> Sample:
    case = pick_case(dataset, rng)
    margin = int(rng.integers(cfg.margin_range[0], cfg.margin_range[1] + 1))

    spheres = [_sphere(a) for a in case.anns]
    lo, hi = [], []
    for axis in range(3):
        low = min(c[axis] - r for c, r in spheres)
        high = max(c[axis] + r for c, r in spheres)
        lo.append(max(0, math.floor(low) - margin))
        hi.append(min(case.shape[axis], math.ceil(high) + margin + 1))
    origin, extent = tuple(lo), tuple(h - l for h, l in zip(hi, lo))

    sl = tuple(slice(l, h) for l, h in zip(lo, hi))
    img = case.image[sl]
    gt = case.labels[sl]
    endpoints = np.array(
        [p for a in case.anns for p in sorted((a.p0, a.p1))], dtype=np.float64
    ) - np.asarray(lo, dtype=np.float64)

    flips = tuple(bool(rng.random() < cfg.flip_prob) for _ in range(3))
    for axis, flip in enumerate(flips):
        if flip:
            img = np.flip(img, axis=axis)
            gt = np.flip(gt, axis=axis)
            endpoints[:, axis] = (extent[axis] - 1) - endpoints[:, axis]

    pool = tuple(-(-e // m) for e, m in zip(extent, cfg.max_patch))
    x = _max_pool(np.ascontiguousarray(img, dtype=np.float32)[None], pool)
    planes = [
        _max_pool((gt == a.label).astype(np.float32)[None], pool)[0]
        for a in case.anns
    ]

    mn, mx = float(x.min()), float(x.max())
    if mx > mn:
        x = (x - mn) / np.float32(mx - mn)
    else:
        x = np.zeros_like(x)

    pooled = x.shape[1:]
    pads = tuple((-s) % 8 for s in pooled)
    if any(pads):
        widths = ((0, 0),) + tuple((0, p) for p in pads)
        x = np.pad(x, widths)
        planes = [np.pad(t, widths[1:]) for t in planes]
    patch_shape = x.shape[1:]

    positions = np.empty((len(endpoints), 3), dtype=np.float32)
    for i, p in enumerate(endpoints):
        for axis in range(3):
            f = pool[axis]
            j = (p[axis] + 0.5) / f - 0.5 if f > 1 else p[axis]
            j = min(max(j, 0.0), pooled[axis] - 1)
            positions[i, axis] = j / patch_shape[axis]

    return Sample(
        patch=np.ascontiguousarray(x, dtype=np.float32),
        targets=np.stack(planes).astype(np.float32),
        token_positions=positions,
        labels=tuple(a.label for a in case.anns),
        margin=margin,
        flips=flips,
        origin=origin,
        extent=extent,
        pool=pool,
    )
