"""Lesion prompts from dense marking volumes.

Each nonzero label in a marking volume is a hand-drawn diameter. We reduce it
to its two most distant voxels (the endpoints), derive the enclosing sphere,
and embed the endpoints as unit-norm tokens for the bottleneck attention.

Coordinates are voxel indices in (z, y, x) order throughout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import InputError, RecistSegError
from .nifti import LabelVolume
from .ops import l2_normalize

R_MIN_VOX = 1.5  # radius floor so degenerate markings still cover voxels
_HULL_THRESHOLD = 10_000

# weight tensor names consumed by embed_prompts
POINT_EMBED = "prompt.point_embed"  # (E,) shared lesion prompt vector
ROLE_EMBED = "prompt.role_embed"  # (2, E) start/end endpoint roles


@dataclass(frozen=True)
class RecistAnnotation:
    """One marked lesion: its label and diameter endpoints.

    p0 is lexicographically <= p1, which fixes the start/end roles no matter
    how the marking was rasterized.
    """

    label: int
    p0: tuple[float, float, float]
    p1: tuple[float, float, float]
    length_vox: float
    slice_z: int


@dataclass(frozen=True)
class RecistSphere:
    center: tuple[float, float, float]
    radius_vox: float


@dataclass(frozen=True)
class PromptTokens:
    """Endpoint tokens: rows 2i and 2i+1 belong to annotation i.

    embeddings: (2A, E) float32, every row unit L2 norm
    positions:  (2A, 3) float32, patch-normalized (z, y, x) in [0, 1]
    labels:     (A,) annotation labels in row order
    """

    embeddings: np.ndarray
    positions: np.ndarray
    labels: tuple[int, ...]

    @property
    def count(self) -> int:
        return self.embeddings.shape[0]


def _farthest_pair(pts: np.ndarray) -> tuple[int, int]:
    """Indices of the most distant pair; first such pair in row-major order."""
    n = pts.shape[0]
    if n == 1:
        return 0, 0
    if n > _HULL_THRESHOLD:
        try:
            from scipy.spatial import ConvexHull

            verts = np.sort(ConvexHull(pts).vertices)
            i, j = _farthest_pair(pts[verts])
            return int(verts[i]), int(verts[j])
        except Exception:  # degenerate (coplanar/collinear) sets: scan all
            pass
    best_d2 = -1.0
    best = (0, 0)
    chunk = 256
    for i0 in range(0, n, chunk):
        block = pts[i0 : i0 + chunk]
        d2 = ((block[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
        flat = int(np.argmax(d2))
        val = float(d2.reshape(-1)[flat])
        if val > best_d2:  # strict: keeps the earliest maximal pair
            best_d2 = val
            best = (i0 + flat // n, flat % n)
    return best


def extract_endpoints(marking: LabelVolume) -> list[RecistAnnotation]:
    """One annotation per distinct nonzero label, sorted by label.

    Endpoints are the label's two voxels at maximal Euclidean separation.
    A marking that strays across several z-slices is accepted (endpoints are
    then genuinely 3D) but triggers a warning.
    """
    data = marking.data
    zz, yy, xx = np.nonzero(data)
    if zz.size == 0:
        return []
    vals = data[zz, yy, xx]
    coords = np.stack([zz, yy, xx], axis=1).astype(np.float64)
    order = np.argsort(vals, kind="stable")  # stable keeps row-major order per label
    vals = vals[order]
    coords = coords[order]
    labels = np.unique(vals)
    starts = np.searchsorted(vals, labels, side="left")
    stops = np.searchsorted(vals, labels, side="right")

    anns = []
    for label, start, stop in zip(labels, starts, stops):
        pts = coords[start:stop]
        if np.unique(pts[:, 0]).size > 1:
            warnings.warn(
                f"marking label {int(label)} spans multiple z-slices; "
                "endpoints computed in 3D",
                stacklevel=2,
            )
        i, j = _farthest_pair(pts)
        a, b = tuple(pts[i]), tuple(pts[j])
        if b < a:
            a, b = b, a
        length = float(np.linalg.norm(np.subtract(b, a)))
        anns.append(
            RecistAnnotation(
                label=int(label),
                p0=tuple(float(v) for v in a),
                p1=tuple(float(v) for v in b),
                length_vox=length,
                slice_z=int(round(a[0])),
            )
        )
    return anns


def recist_sphere(ann: RecistAnnotation, r_min: float = R_MIN_VOX) -> RecistSphere:
    """Sphere centered on the diameter midpoint, radius floored at r_min."""
    center = tuple((a + b) / 2.0 for a, b in zip(ann.p0, ann.p1))
    return RecistSphere(center=center, radius_vox=max(ann.length_vox / 2.0, float(r_min)))


def embed_prompts(
    anns: list[RecistAnnotation],
    crop_geom,
    weights: Mapping[str, np.ndarray],
) -> PromptTokens:
    """Map endpoints into the patch and build unit-norm tokens.

    crop_geom must expose map_to_patch((z,y,x)) -> patch voxel coords and
    patch_shape. Each token embedding is the shared prompt vector plus its
    endpoint-role vector, L2-normalized. Positions are patch coords divided
    by the patch extent, so they land in [0, 1).
    """
    point = np.asarray(weights[POINT_EMBED], dtype=np.float32)
    roles = np.asarray(weights[ROLE_EMBED], dtype=np.float32)
    if roles.shape[0] != 2 or roles.shape[1] != point.shape[0]:
        raise InputError(f"prompt embedding shapes disagree: {roles.shape} vs {point.shape}")

    shape = tuple(crop_geom.patch_shape)
    positions = np.empty((2 * len(anns), 3), dtype=np.float32)
    for i, ann in enumerate(anns):
        # role assignment is lexicographic in coordinates, so a swapped
        # annotation yields the same token set
        for r, endpoint in enumerate(sorted((ann.p0, ann.p1))):
            p = crop_geom.map_to_patch(endpoint)
            for axis in range(3):
                if not (-1e-6 <= p[axis] <= shape[axis] - 1 + 1e-6):
                    raise RecistSegError(
                        f"endpoint {endpoint} maps outside the patch: {p} vs {shape}"
                    )
            positions[2 * i + r] = [p[a] / shape[a] for a in range(3)]

    embeddings = l2_normalize(point[None, :] + roles, axis=1)  # (2, E)
    embeddings = np.tile(embeddings, (len(anns), 1))
    return PromptTokens(
        embeddings=embeddings,
        positions=positions,
        labels=tuple(a.label for a in anns),
    )
