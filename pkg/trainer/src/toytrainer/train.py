"""Training loop: Muon + AdamW on synthetic cases, cosine LR, LENS export."""

from __future__ import annotations

import argparse
import json
import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from .data import make_case, make_dataset, write_case
from .lens import write_lens
from .muon import Muon, split_param_groups
from .loss import combined_loss
from .net import NetConfig, SegNet
from .sample import Sample, TrainConfig, sample_case


@dataclass
class TrainResult:
    net: SegNet
    epoch_losses: list[float]
    seconds: float

    @property
    def best_epoch(self) -> int:
        return int(np.argmin(self.epoch_losses))


def cosine_factor(epoch: int, total: int) -> float:
    """LR multiplier for the given epoch; 1 at the start, 0 past the end."""
    return 0.5 * (1.0 + math.cos(math.pi * min(epoch, total) / total))


def _step(net: SegNet, sample: Sample, optimizers) -> float:
    patch = torch.from_numpy(sample.patch)
    target = torch.from_numpy(sample.targets)
    tok_pos = torch.from_numpy(sample.token_positions)
    logits = net(patch, net.prompt_tokens(len(sample.labels)), tok_pos)
    loss = combined_loss(logits, target)
    for opt in optimizers:
        opt.zero_grad(set_to_none=True)
    loss.backward()
    for opt in optimizers:
        opt.step()
    return float(loss.detach())


def train(dataset, cfg: TrainConfig | None = None, net: SegNet | None = None,
          log=None) -> TrainResult:
    cfg = cfg or TrainConfig()
    torch.set_num_threads(1)
    # once the schedule decays, gradients and momentum underflow into
    # denormal range, where x86 matmul kernels run several times slower;
    # flushing them to zero keeps step time flat without measurably
    # changing the loss trajectory
    torch.set_flush_denormal(True)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    net = net or SegNet(NetConfig(), seed=cfg.seed)

    muon_params, adamw_params = split_param_groups(net)
    optimizers = (
        Muon(muon_params, lr=cfg.lr, momentum=cfg.muon_momentum),
        torch.optim.AdamW(adamw_params, lr=cfg.lr),
    )

    start = time.perf_counter()
    epoch_losses = []
    for epoch in range(cfg.epochs):
        factor = cosine_factor(epoch, cfg.epochs)
        for opt in optimizers:
            for group in opt.param_groups:
                group["lr"] = cfg.lr * factor
        total = 0.0
        for _ in range(len(dataset)):
            total += _step(net, sample_case(dataset, cfg, rng), optimizers)
        epoch_losses.append(total / len(dataset))
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {epoch_losses[-1]:.4f} "
                f"lr {cfg.lr * factor:.5f}")
    return TrainResult(net, epoch_losses, time.perf_counter() - start)


def export_weights(net: SegNet, path) -> None:
    write_lens(path, net.export_state())


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="toytrainer",
        description="train the toy segmentation model and export LENS weights",
    )
    parser.add_argument("--out", required=True, help="output .lens path")
    parser.add_argument("--cases", type=int, default=200)
    parser.add_argument("--epochs", type=int, default=75)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--volume", type=int, default=16, help="cubic case size")
    parser.add_argument("--holdout", type=int, default=0,
                        help="extra cases written as NIfTI pairs for evaluation")
    parser.add_argument("--holdout-dir", default=None)
    args = parser.parse_args(argv)
    if args.holdout and not args.holdout_dir:
        parser.error("--holdout requires --holdout-dir")

    shape = (args.volume,) * 3
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed)
    dataset = make_dataset(args.cases, seed=args.seed, shape=shape)
    result = train(dataset, cfg, log=print)
    export_weights(result.net, args.out)

    if args.holdout:
        rng = np.random.default_rng(args.seed + 1_000_003)
        for i in range(args.holdout):
            write_case(make_case(rng, shape), args.holdout_dir, f"hold{i:03d}")

    print(json.dumps({
        "epochs": cfg.epochs,
        "first_epoch_loss": round(result.epoch_losses[0], 4),
        "best_epoch_loss": round(min(result.epoch_losses), 4),
        "seconds": round(result.seconds, 1),
        "weights": args.out,
    }))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
