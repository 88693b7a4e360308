"""Command line interface.

Subcommands: infer (segment one case), eval (DSC/NSD between two masks),
bench (run a case directory and report efficiency). Exit codes: 0 success,
2 input error, 3 internal error.

Heavy imports happen after argument parsing so --threads can pin the BLAS
pool size through the environment before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recistseg",
        description="CPU segmentation of RECIST-marked CT lesions",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", help="segment one marked CT volume")
    p.add_argument("--image", required=True, help="input CT (.nii or .nii.gz)")
    p.add_argument("--marking", required=True, help="RECIST marking label volume")
    p.add_argument("--weights", required=True, help="LENS weight file")
    p.add_argument("--output", required=True, help="output mask path (.nii.gz)")
    p.add_argument("--trace", help="write the RSS trace as CSV (columns t_s, rss_bytes)")
    p.add_argument("--max-patch", type=int, default=128, help="patch budget per axis")
    p.add_argument("--margin", type=int, default=32, help="crop margin around spheres")
    p.add_argument("--threads", type=int, default=1, help="BLAS thread count")

    p = sub.add_parser("eval", help="score a predicted mask against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--nsd-tol-mm", type=float, default=2.0)

    p = sub.add_parser("bench", help="run all <id>_img/_mrk pairs in a directory")
    p.add_argument("--cases", required=True, help="directory of NIfTI case pairs")
    p.add_argument("--weights", required=True)
    p.add_argument("--outdir", help="keep masks here (default: discard)")
    p.add_argument("--max-patch", type=int, default=128)
    p.add_argument("--margin", type=int, default=32)
    p.add_argument("--threads", type=int, default=1)
    return parser


def _pin_threads(n: int) -> None:
    for var in _THREAD_VARS:
        os.environ[var] = str(max(1, n))


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if getattr(args, "threads", None):
        _pin_threads(args.threads)

    from .errors import InputError, RecistSegError
    from . import pipeline

    try:
        if args.command == "infer":
            opts = pipeline.InferOptions(
                max_patch=(args.max_patch,) * 3,
                margin=args.margin,
                trace_csv=args.trace,
            )
            report = pipeline.infer(
                args.image, args.marking, args.weights, args.output, opts
            )
            print(json.dumps(report.to_dict(), indent=2))
        elif args.command == "eval":
            result = pipeline.evaluate(args.pred, args.gt, args.nsd_tol_mm)
            print(json.dumps(result, indent=2))
        elif args.command == "bench":
            opts = pipeline.InferOptions(
                max_patch=(args.max_patch,) * 3, margin=args.margin
            )
            reports = pipeline.bench(args.cases, args.weights, args.outdir, opts)
            print(json.dumps([r.to_dict() for r in reports], indent=2))
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RecistSegError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
