"""End-to-end inference: preprocess, forward, restore, postprocess.

The processed region is one joint crop around the union of all RECIST
spheres plus a margin. Oversized crops are max-pool downscaled by the
smallest per-axis integer factor that fits the patch budget, normalized to
[0,1], and zero-padded to multiples of 8. Restoration inverts those steps
per prompt and streams each full-size logit volume straight into the mask
assembly, so only one of them is alive at any time.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, ShapeError
from .lens import ModelWeights
from .memtrace import EfficiencyReport, report_from_trace, trace_memory
from .metrics import dsc, nsd
from .model import ModelConfig, forward, load_weights
from .nifti import LabelVolume, Volume, read_labels, read_nifti, write_nifti
from .ops import PadSpec, max_pool_downscale, pad_to_multiple, trilinear_resize
from .postprocess import LogitVolume, OffsetSchedule, assemble_mask
from .prompts import RecistAnnotation, embed_prompts, extract_endpoints, recist_sphere

DEFAULT_MARGIN = 32  # training used margins 1..64; the midpoint is the default


@dataclass(frozen=True)
class CropScaleRecord:
    """Everything needed to map between original volume and model patch.

    origin/extent give the crop in original voxels; pool is the per-axis
    max-pool factor; pad is the final pad-to-multiple-of-8. patch_shape is
    the shape actually fed to the model.
    """

    origin: tuple[int, int, int]
    extent: tuple[int, int, int]
    pool: tuple[int, int, int]
    pad: PadSpec = field(repr=False)
    original_shape: tuple[int, int, int]
    patch_shape: tuple[int, int, int]

    @property
    def pooled_extent(self) -> tuple[int, int, int]:
        return tuple(-(-e // f) for e, f in zip(self.extent, self.pool))

    def map_to_patch(self, p) -> tuple[float, float, float]:
        """Original voxel coordinate -> patch coordinate.

        Pooling is center-aligned: crop voxel c lands at (c + 0.5)/f - 0.5.
        Edge voxels of a coarse pool overhang the pooled grid by up to half
        a voxel; they are clamped onto it.
        """
        out = []
        for axis in range(3):
            c = float(p[axis]) - self.origin[axis]
            f = self.pool[axis]
            j = (c + 0.5) / f - 0.5 if f > 1 else c
            out.append(float(np.clip(j, 0.0, self.pooled_extent[axis] - 1)))
        return tuple(out)


def preprocess(
    image: Volume,
    anns: list[RecistAnnotation],
    max_patch: tuple[int, int, int] = (128, 128, 128),
    margin: int = DEFAULT_MARGIN,
) -> tuple[np.ndarray, CropScaleRecord]:
    """Crop around the sphere union, downscale to fit, normalize, pad."""
    if not anns:
        raise InputError("preprocess needs at least one annotation")
    if margin < 0:
        raise InputError(f"margin must be non-negative, got {margin}")
    spheres = [recist_sphere(a) for a in anns]
    lo = []
    hi = []
    for axis in range(3):
        low = min(s.center[axis] - s.radius_vox for s in spheres)
        high = max(s.center[axis] + s.radius_vox for s in spheres)
        lo.append(max(0, math.floor(low) - margin))
        hi.append(min(image.shape[axis], math.ceil(high) + margin + 1))
    crop = image.data[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    extent = crop.shape

    pool = tuple(-(-e // m) for e, m in zip(extent, max_patch))
    x = crop[np.newaxis].astype(np.float32)
    if max(pool) > 1:
        x = max_pool_downscale(x, pool)

    mn = float(x.min())
    mx = float(x.max())
    if mx > mn:
        x -= mn
        x /= np.float32(mx - mn)
    else:
        x = np.zeros_like(x)  # constant input carries no usable contrast

    x, pad = pad_to_multiple(x, 8)
    rec = CropScaleRecord(
        origin=tuple(lo),
        extent=tuple(extent),
        pool=pool,
        pad=pad,
        original_shape=tuple(image.shape),
        patch_shape=tuple(x.shape[1:]),
    )
    return x, rec


def restore(patch_logits: np.ndarray, rec: CropScaleRecord) -> np.ndarray:
    """Invert preprocess for one prompt's patch logits.

    Removes padding, trilinear-upsamples back to the crop extent, and pastes
    into a full-size volume filled with -inf outside the crop.
    """
    patch_logits = np.asarray(patch_logits, dtype=np.float32)
    if patch_logits.ndim != 3 or tuple(patch_logits.shape) != rec.patch_shape:
        raise ShapeError(
            f"patch logits {patch_logits.shape} do not match record {rec.patch_shape}"
        )
    x = rec.pad.crop(patch_logits[np.newaxis])
    if rec.pooled_extent != rec.extent:
        x = trilinear_resize(x, rec.extent)
    full = np.full(rec.original_shape, -np.inf, dtype=np.float32)
    sl = tuple(slice(o, o + e) for o, e in zip(rec.origin, rec.extent))
    full[sl] = x[0]
    return full


@dataclass
class InferOptions:
    max_patch: tuple[int, int, int] = (128, 128, 128)
    margin: int = DEFAULT_MARGIN
    trace_csv: str | None = None
    sample_period_s: float = 0.1
    schedule: OffsetSchedule = field(default_factory=OffsetSchedule)
    config: ModelConfig = field(default_factory=ModelConfig)


def case_id_from(path) -> str:
    name = Path(path).name
    for suffix in (".gz", ".nii"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return name


def _check_same_case(image: Volume, marking: LabelVolume) -> None:
    if image.shape != marking.shape:
        raise InputError(
            f"marking shape {marking.shape} does not match image {image.shape}"
        )
    if not np.allclose(image.spacing, marking.spacing, atol=1e-3):
        raise InputError(
            f"marking spacing {marking.spacing} does not match image {image.spacing}"
        )
    if not np.allclose(image.affine, marking.affine, atol=1e-3):
        raise InputError("marking affine does not match image affine")


def run_case(
    image: Volume,
    marking: LabelVolume,
    weights: ModelWeights,
    opts: InferOptions | None = None,
) -> LabelVolume:
    """Segment one in-memory case; returns the mask at image geometry."""
    opts = opts or InferOptions()
    _check_same_case(image, marking)
    anns = extract_endpoints(marking)
    if not anns:
        return LabelVolume(
            np.zeros(image.shape, dtype=np.uint16), image.spacing, image.affine
        )
    patch, rec = preprocess(image, anns, opts.max_patch, opts.margin)
    tokens = embed_prompts(anns, rec, weights)
    logits = forward(patch, tokens, weights)
    spheres = {ann.label: recist_sphere(ann) for ann in anns}

    def restored():
        for i, ann in enumerate(anns):
            yield LogitVolume(
                restore(logits[i], rec), ann.label, image.spacing, image.affine
            )

    return assemble_mask(restored(), spheres, opts.schedule)


def infer(
    image_path, marking_path, weights_path, out_path, opts: InferOptions | None = None
) -> EfficiencyReport:
    """File-level inference entry point; also measures time and memory."""
    opts = opts or InferOptions()
    start = time.perf_counter()

    def run():
        image = read_nifti(image_path)
        marking = read_labels(marking_path)
        weights = load_weights(weights_path, opts.config)
        mask = run_case(image, marking, weights, opts)
        write_nifti(mask, out_path)
        return image.shape

    shape, trace = trace_memory(run, opts.sample_period_s)
    elapsed = time.perf_counter() - start
    if opts.trace_csv:
        trace.write_csv(opts.trace_csv)
    return report_from_trace(case_id_from(image_path), shape, elapsed, trace)


def evaluate(pred_path, gt_path, nsd_tol_mm: float = 2.0) -> dict:
    """Per-label DSC/NSD between two masks, plus their means."""
    pred = read_labels(pred_path)
    gt = read_labels(gt_path)
    if pred.shape != gt.shape:
        raise InputError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    labels = sorted(
        int(v) for v in np.union1d(np.unique(gt.data), np.unique(pred.data)) if v != 0
    )
    per_label = {}
    for label in labels:
        per_label[str(label)] = {
            "dsc": round(dsc(pred, gt, label), 6),
            "nsd": round(nsd(pred, gt, label, tolerance_mm=nsd_tol_mm), 6),
        }
    result = {"labels": per_label}
    if per_label:
        result["mean_dsc"] = round(
            sum(v["dsc"] for v in per_label.values()) / len(per_label), 6
        )
        result["mean_nsd"] = round(
            sum(v["nsd"] for v in per_label.values()) / len(per_label), 6
        )
    return result


def find_cases(cases_dir) -> list[tuple[str, Path, Path]]:
    """Pair <id>_img.nii[.gz] with <id>_mrk.nii[.gz] under one directory."""
    cases = []
    root = Path(cases_dir)
    for img in sorted(root.glob("*_img.nii*")):
        cid = case_id_from(img)[: -len("_img")]
        for ext in (".nii.gz", ".nii"):
            mrk = root / f"{cid}_mrk{ext}"
            if mrk.is_file():
                cases.append((cid, img, mrk))
                break
    return cases


def bench(cases_dir, weights_path, out_dir=None, opts: InferOptions | None = None):
    """Run infer over a case directory; returns one EfficiencyReport per case."""
    import tempfile

    cases = find_cases(cases_dir)
    if not cases:
        raise InputError(f"no <id>_img/_mrk NIfTI pairs under {cases_dir}")
    reports = []
    with tempfile.TemporaryDirectory() as tmp:
        target = Path(out_dir) if out_dir else Path(tmp)
        target.mkdir(parents=True, exist_ok=True)
        for cid, img, mrk in cases:
            report = infer(img, mrk, weights_path, target / f"{cid}_mask.nii.gz", opts)
            reports.append(report)
    return reports
