"""Synthetic training volumes: bright ellipsoids on a textured background.

Each case carries the image, the multi-label ground truth, and a marking
volume in which every lesion's longest in-plane diameter is rasterized on its
largest-area z-slice, endpoints on the lesion boundary. That is exactly the
marking format the inference engine prompts from, so cases written to disk
with write_case() are consumable by its CLI unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nifti import write_nifti

N_CATEGORIES = 4


@dataclass(frozen=True)
class Annotation:
    label: int
    p0: tuple[float, float, float]  # (z, y, x), lexicographically <= p1
    p1: tuple[float, float, float]


@dataclass(frozen=True)
class TrainCase:
    image: np.ndarray  # (D, H, W) float32
    labels: np.ndarray  # (D, H, W) uint16, 0 background
    marking: np.ndarray  # (D, H, W) uint16 diameter rasters
    anns: tuple[Annotation, ...]
    category: int

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.image.shape


def _textured_background(rng: np.random.Generator, shape) -> np.ndarray:
    base = rng.uniform(0.2, 0.35)
    coarse = rng.normal(0.0, 0.05, [max(1, s // 4) for s in shape]).astype(np.float32)
    tex = coarse
    for axis, s in enumerate(shape):  # blocky 4x upsample, then fine noise
        tex = np.repeat(tex, -(-s // tex.shape[axis]), axis=axis)
    tex = tex[: shape[0], : shape[1], : shape[2]]
    img = base + tex + rng.normal(0.0, 0.02, shape).astype(np.float32)
    return img.astype(np.float32)


# lesions closer than the bottleneck cell size cannot be told apart by the
# positional attention, so keep centers at least one cell apart
MIN_SEPARATION = 7.5


def _place_lesions(rng: np.random.Generator, shape, n: int):
    """Sample n well-separated ellipsoids; returns (center, semi_axes) pairs."""
    placed = []
    attempts = 0
    while len(placed) < n:
        attempts += 1
        if attempts > 200:  # crowded draw, accept fewer lesions
            break
        axes = rng.uniform(1.6, 2.8, size=3)
        center = np.array([
            rng.uniform(axes[i] + 1.0, shape[i] - axes[i] - 2.0) for i in range(3)
        ])
        if any(np.linalg.norm(center - c) < MIN_SEPARATION for c, _ in placed):
            continue
        placed.append((center, axes))
    return placed


def _longest_slice_diameter(mask: np.ndarray) -> tuple[int, np.ndarray, np.ndarray]:
    """(z, p_start, p_end): the farthest in-plane pair on the biggest z-slice."""
    areas = mask.sum(axis=(1, 2))
    z = int(np.argmax(areas))
    pts = np.argwhere(mask[z])  # (n, 2) of (y, x)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    i, j = np.unravel_index(int(np.argmax(d2)), d2.shape)
    return z, pts[i], pts[j]


def _rasterize_segment(marking, z, p, q, label) -> None:
    steps = max(2, int(math.ceil(np.linalg.norm(q - p))) * 2 + 1)
    ts = np.linspace(0.0, 1.0, steps)
    ys = np.rint(p[0] + ts * (q[0] - p[0])).astype(int)
    xs = np.rint(p[1] + ts * (q[1] - p[1])).astype(int)
    marking[z, ys, xs] = label


def make_case(rng: np.random.Generator, shape=(16, 16, 16), max_lesions: int = 3,
              category: int = 0) -> TrainCase:
    image = _textured_background(rng, shape)
    labels = np.zeros(shape, dtype=np.uint16)
    marking = np.zeros(shape, dtype=np.uint16)

    grid = np.indices(shape).astype(np.float32)
    anns = []
    for center, axes in _place_lesions(rng, shape, int(rng.integers(1, max_lesions + 1))):
        dist = sum(((grid[i] - center[i]) / axes[i]) ** 2 for i in range(3))
        mask = dist <= 1.0
        if mask.sum() < 8:
            continue
        label = len(anns) + 1
        labels[mask] = label
        image[mask] = rng.uniform(0.7, 0.9) + rng.normal(0.0, 0.03, int(mask.sum()))

        z, p, q = _longest_slice_diameter(mask)
        _rasterize_segment(marking, z, p, q, label)
        a = (float(z), float(p[0]), float(p[1]))
        b = (float(z), float(q[0]), float(q[1]))
        if b < a:
            a, b = b, a
        anns.append(Annotation(label=label, p0=a, p1=b))

    if not anns:  # pathological draw: retry with fresh randomness
        return make_case(rng, shape, max_lesions, category)
    return TrainCase(image, labels, marking, tuple(anns), category)


def make_dataset(n: int, seed: int = 0, shape=(16, 16, 16), max_lesions: int = 3):
    """n seeded cases with categories cycling 0..3 so each is equally common."""
    rng = np.random.default_rng(seed)
    return [
        make_case(rng, shape, max_lesions, category=i % N_CATEGORIES) for i in range(n)
    ]


def write_case(case: TrainCase, out_dir, case_id: str, spacing=(1.0, 1.0, 1.0)):
    """Write <id>_img/_mrk/_gt NIfTI files; img+mrk form an engine case pair."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = (
        out / f"{case_id}_img.nii",
        out / f"{case_id}_mrk.nii",
        out / f"{case_id}_gt.nii",
    )
    write_nifti(paths[0], case.image, spacing)
    write_nifti(paths[1], case.marking, spacing)
    write_nifti(paths[2], case.labels, spacing)
    return paths
