"""Per-prompt logits to one multi-label mask, with presence guarantees.

Every annotated lesion must appear in the final mask. Per prompt,
guarantee_presence lifts in-sphere logits by an exponential offset schedule
until something turns positive; combine_labels then resolves overlaps by
running argmax; assemble_mask re-checks presence afterwards and claims
single voxels for any label that lost all of its territory to overlapping
neighbours.

Operations mutate the per-prompt buffers in place; the only full-volume
allocations are the running-best buffer and the output mask.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .nifti import LabelVolume
from .prompts import RecistSphere

HIST_WIDTH = 65536  # u16 label space


@dataclass
class OffsetSchedule:
    """Exponential boost sequence delta0 * growth**k, k = 0..max_iters-1."""

    delta0: float = 1.0
    growth: float = 2.0
    max_iters: int = 32

    def __post_init__(self):
        if self.delta0 <= 0 or self.growth <= 1 or self.max_iters < 1:
            raise ValueError(f"offsets must strictly increase: {self}")

    def offsets(self):
        for k in range(self.max_iters):
            yield self.delta0 * self.growth**k


@dataclass
class LogitVolume:
    """One prompt's logit grid at image geometry.

    NaN and +inf are rejected; -inf is allowed because voxels outside the
    processed crop are filled with it ("never this tumor").
    """

    data: np.ndarray
    label: int
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ShapeError(f"logit volume must be 3D, got {self.data.ndim}D")
        peak = self.data.max()  # max propagates NaN and +inf; one cheap pass
        if np.isnan(peak) or np.isposinf(peak):
            raise ShapeError(f"logits for label {self.label} contain NaN/+inf")
        if self.label < 1:
            raise ShapeError(f"prompt label must be positive, got {self.label}")


def _sphere_box_mask(shape, sphere: RecistSphere):
    """Bounding-box slices plus an in-sphere mask of voxel centers."""
    lo = []
    hi = []
    for axis in range(3):
        c = sphere.center[axis]
        lo.append(max(0, int(np.ceil(c - sphere.radius_vox))))
        hi.append(min(shape[axis], int(np.floor(c + sphere.radius_vox)) + 1))
    if any(l >= h for l, h in zip(lo, hi)):
        return None, None
    box = tuple(slice(l, h) for l, h in zip(lo, hi))
    zz, yy, xx = np.ogrid[box]
    d2 = (
        (zz - sphere.center[0]) ** 2
        + (yy - sphere.center[1]) ** 2
        + (xx - sphere.center[2]) ** 2
    )
    mask = d2 <= sphere.radius_vox**2
    return box, mask


def _nearest_voxel(shape, center):
    return tuple(int(np.clip(round(center[a]), 0, shape[a] - 1)) for a in range(3))


def guarantee_presence(
    logits: LogitVolume, sphere: RecistSphere, sched: OffsetSchedule | None = None
) -> LogitVolume:
    """Ensure at least one voxel of this prompt is positive.

    No-op when the volume already has a positive logit anywhere. Otherwise
    in-sphere logits become original + delta0*growth**k for the smallest k
    that pushes the in-sphere max above zero. If even the largest offset is
    not enough (or the sphere covers no voxel center), the voxel nearest the
    sphere center is set to +1 and a warning is emitted.

    Modifies logits.data in place and returns the same object.
    """
    sched = sched or OffsetSchedule()
    data = logits.data
    if float(data.max()) > 0.0:
        return logits

    box, mask = _sphere_box_mask(data.shape, sphere)
    if box is not None and mask.any():
        region = data[box]  # view; writes land in logits.data
        peak = region.max(initial=-np.inf, where=mask).astype(np.float32)
        for off in sched.offsets():
            # test in f32 so the decision matches the in-place f32 add below
            off32 = np.float32(off)
            if peak + off32 > np.float32(0.0):
                region[mask] += off32
                return logits
    warnings.warn(
        f"offset schedule exhausted for label {logits.label}; "
        "forcing the voxel nearest the sphere center",
        stacklevel=2,
    )
    data[_nearest_voxel(data.shape, sphere.center)] = 1.0
    return logits


def combine_labels(per_prompt: list[LogitVolume]) -> LabelVolume:
    """Running argmax over prompts: positive logits win, ties go to the
    smaller label, voxels nobody claims stay 0."""
    if not per_prompt:
        raise ShapeError("combine_labels needs at least one logit volume")
    first = per_prompt[0]
    for lv in per_prompt[1:]:
        if lv.data.shape != first.data.shape or not np.allclose(lv.spacing, first.spacing):
            raise ShapeError(
                f"logit volumes disagree on geometry: label {lv.label} has "
                f"{lv.data.shape}/{lv.spacing} vs {first.data.shape}/{first.spacing}"
            )

    out = np.zeros(first.data.shape, dtype=np.uint16)
    best = np.zeros(first.data.shape, dtype=np.float32)
    # ascending label order + strict comparison = ties to the smaller label
    for lv in sorted(per_prompt, key=lambda v: v.label):
        wins = lv.data > best
        out[wins] = lv.label
        np.maximum(best, lv.data, out=best)
    return LabelVolume(out, first.spacing, first.affine)


def class_presence(mask: LabelVolume, expected: list[int]) -> dict[int, int]:
    """Voxel count per expected label via one chunked counting pass.

    No sort, no unique-set construction; scratch memory stays at the
    histogram size no matter how large the mask is.
    """
    width = HIST_WIDTH
    hist = np.zeros(width, dtype=np.int64)
    flat = mask.data.ravel()
    step = 1 << 16
    for i in range(0, flat.size, step):
        hist += np.bincount(flat[i : i + step], minlength=width)
    return {int(label): int(hist[int(label)]) for label in expected}


def assemble_mask(
    per_prompt,
    spheres: dict[int, RecistSphere],
    sched: OffsetSchedule | None = None,
) -> LabelVolume:
    """guarantee_presence + running argmax + presence repair.

    per_prompt is any iterable of LogitVolume in strictly ascending label
    order (so ties resolve to the smaller label, as in combine_labels). It
    is consumed one volume at a time and only a sphere-bounding-box copy of
    each prompt's logits is retained, so feeding a generator keeps at most
    one full-size logit volume alive at once.

    Overlapping spheres can erase a weaker prompt entirely during the
    argmax. Any label missing afterwards claims the in-sphere voxel where
    its own logit is highest, skipping voxels already claimed; claim rounds
    repeat until every label is present (or no free voxel remains, which is
    warned about).
    """
    sched = sched or OffsetSchedule()
    out = None
    best = None
    geometry = None
    labels: list[int] = []
    boxes: dict[int, tuple] = {}
    for lv in per_prompt:
        guarantee_presence(lv, spheres[lv.label], sched)
        if labels and lv.label <= labels[-1]:
            raise ShapeError(
                f"prompts must arrive in ascending label order, got {lv.label} "
                f"after {labels[-1]}"
            )
        if out is None:
            geometry = (lv.data.shape, lv.spacing, lv.affine)
            out = np.zeros(lv.data.shape, dtype=np.uint16)
            best = np.zeros(lv.data.shape, dtype=np.float32)
        elif lv.data.shape != geometry[0] or not np.allclose(lv.spacing, geometry[1]):
            raise ShapeError(
                f"logit volumes disagree on geometry: label {lv.label} has "
                f"{lv.data.shape}/{lv.spacing} vs {geometry[0]}/{geometry[1]}"
            )
        labels.append(lv.label)
        wins = lv.data > best
        out[wins] = lv.label
        np.maximum(best, lv.data, out=best)
        box, in_sphere = _sphere_box_mask(lv.data.shape, spheres[lv.label])
        region = lv.data[box].copy() if box is not None else None
        boxes[lv.label] = (box, in_sphere, region)
    if out is None:
        raise ShapeError("assemble_mask needs at least one logit volume")
    mask = LabelVolume(out, geometry[1], geometry[2])

    claimed: dict[tuple[int, int, int], int] = {}
    for _ in range(len(labels) + 1):
        counts = class_presence(mask, labels)
        missing = [l for l in sorted(labels) if counts[l] == 0]
        if not missing:
            break
        progressed = False
        for label in missing:
            box, in_sphere, region = boxes[label]
            if box is None or not in_sphere.any():
                target = _nearest_voxel(mask.data.shape, spheres[label].center)
                if target not in claimed:
                    claimed[target] = label
                    mask.data[target] = label
                    progressed = True
                continue
            order = np.argsort(region, axis=None)[::-1]  # own logit, best first
            coords = np.unravel_index(order, region.shape)
            origin = tuple(s.start for s in box)
            for z, y, x in zip(*coords):
                if not in_sphere[z, y, x]:
                    continue
                target = (origin[0] + z, origin[1] + y, origin[2] + x)
                if target in claimed:
                    continue
                claimed[target] = label
                mask.data[target] = label
                progressed = True
                break
        if not progressed:
            warnings.warn(
                f"labels {missing} cannot all be placed: their spheres hold "
                "fewer free voxels than there are missing labels",
                stacklevel=2,
            )
            break
    return mask
