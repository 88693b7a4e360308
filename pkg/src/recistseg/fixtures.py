"""Random weight files for tests and demos.

Generates a full manifest-complete tensor map with activation-friendly
scales (He-style fan-in scaling for convs, 1/sqrt(dim) for attention) and
writes it in the LENS format. Also runnable directly:

    python -m recistseg.fixtures --out weights.lens --seed 0
"""

from __future__ import annotations

import argparse
import math

import numpy as np

from .lens import write_lens
from .model import ModelConfig, manifest

ALPHA_INIT = 0.05  # small interpolation rates keep early attention mild


def random_weights(cfg: ModelConfig | None = None, seed: int = 0) -> dict[str, np.ndarray]:
    cfg = cfg or ModelConfig()
    rng = np.random.default_rng(seed)
    out: dict[str, np.ndarray] = {}
    for name, shape in sorted(manifest(cfg).items()):
        if name.endswith(".b"):
            arr = np.zeros(shape, dtype=np.float32)
        elif "alpha" in name:
            arr = np.full(shape, ALPHA_INIT, dtype=np.float32)
        elif "liere_rates" in name:
            arr = rng.standard_normal(shape).astype(np.float32)
        elif name.startswith("prompt."):
            arr = rng.standard_normal(shape).astype(np.float32)
        else:  # conv kernels and linear maps: scale by fan-in
            fan_in = math.prod(shape[1:])
            std = math.sqrt(2.0 / fan_in)
            arr = (rng.standard_normal(shape) * std).astype(np.float32)
        out[name] = arr
    return out


def write_random_weights(path, cfg: ModelConfig | None = None, seed: int = 0) -> None:
    write_lens(path, random_weights(cfg, seed))


def tiny_config() -> ModelConfig:
    """Smallest legal config; handy for fast tests."""
    return ModelConfig(
        encoder_channels=(2, 2, 2, 2), embedding_dim=2, attention_layers=1, heads=1
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="write a random LENS weight file")
    parser.add_argument("--out", required=True, help="output .lens path")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--tiny", action="store_true", help="use the tiny test config")
    args = parser.parse_args(argv)
    cfg = tiny_config() if args.tiny else ModelConfig()
    write_random_weights(args.out, cfg, args.seed)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
