"""Trainable twin of the inference engine's network.

The parameter set matches the engine's weight manifest name for name and
shape for shape, so an exported LENS file loads cleanly and the two forward
passes agree to float precision. Structure, on a (1, D, H, W) patch with
spatial dims divisible by 8:

  encoder   res blocks (instance norm, two conv3+ReLU, skip add) joined by
            stride-2 convs into an ``embedding_dim``-channel bottleneck
  attention L layers of token-to-image / image-to-token cross-attention with
            per-block rotary position encodings and normalized-residual
            updates; tokens and voxel vectors stay on the unit sphere
  decoder   trilinear 2x upsampling with skip concatenation, one res block
            per stage
  head      each prompt's mean endpoint token maps linearly to per-channel
            weights plus a bias, dotted with the decoder features

Parameters are owned under their weight-file names (dots replaced for
registration); export_state() hands back the name -> float32 array map the
LENS writer wants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

_NORM_EPS = 1e-5
POINT_EMBED = "prompt.point_embed"
ROLE_EMBED = "prompt.role_embed"


@dataclass(frozen=True)
class NetConfig:
    encoder_channels: tuple[int, int, int, int] = (8, 16, 64, 128)
    embedding_dim: int = 128
    attention_layers: int = 2
    heads: int = 4

    def __post_init__(self):
        if len(self.encoder_channels) != 4:
            raise ValueError(f"need 4 encoder stages, got {self.encoder_channels}")
        if self.encoder_channels[-1] != self.embedding_dim:
            raise ValueError("bottleneck width must equal embedding_dim")
        if self.embedding_dim % self.heads:
            raise ValueError("embedding_dim must be divisible by heads")
        if (self.embedding_dim // self.heads) % 2:
            raise ValueError("head dim must be even for 2x2 rotation blocks")

    @property
    def head_dim(self) -> int:
        return self.embedding_dim // self.heads

    @property
    def decoder_channels(self) -> tuple[int, int, int]:
        c = self.encoder_channels
        return (max(1, c[2] // 2), max(1, c[1] // 2), max(1, c[0] // 2))

    @property
    def mlp_hidden(self) -> int:
        return 4 * self.embedding_dim


def _block_shapes(prefix: str, c_in: int, c_out: int) -> dict[str, tuple[int, ...]]:
    shapes = {
        f"{prefix}.conv1.w": (c_out, c_in, 3, 3, 3),
        f"{prefix}.conv1.b": (c_out,),
        f"{prefix}.conv2.w": (c_out, c_out, 3, 3, 3),
        f"{prefix}.conv2.b": (c_out,),
    }
    if c_in != c_out:
        shapes[f"{prefix}.proj.w"] = (c_out, c_in, 1, 1, 1)
        shapes[f"{prefix}.proj.b"] = (c_out,)
    return shapes


def manifest(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    """Tensor name -> shape map; must mirror the engine's exactly."""
    c1, c2, c3, c4 = cfg.encoder_channels
    e = cfg.embedding_dim
    shapes: dict[str, tuple[int, ...]] = {}
    shapes.update(_block_shapes("enc.block1", 1, c1))
    shapes["enc.down1.w"] = (c2, c1, 3, 3, 3)
    shapes["enc.down1.b"] = (c2,)
    shapes.update(_block_shapes("enc.block2", c2, c2))
    shapes["enc.down2.w"] = (c3, c2, 3, 3, 3)
    shapes["enc.down2.b"] = (c3,)
    shapes.update(_block_shapes("enc.block3", c3, c3))
    shapes["enc.down3.w"] = (c4, c3, 3, 3, 3)
    shapes["enc.down3.b"] = (c4,)
    for layer in range(cfg.attention_layers):
        for direction in ("t2i", "i2t"):
            for proj in ("q", "k", "v", "o"):
                shapes[f"attn.{layer}.{direction}.{proj}.w"] = (e, e)
        shapes[f"attn.{layer}.mlp.fc1.w"] = (cfg.mlp_hidden, e)
        shapes[f"attn.{layer}.mlp.fc2.w"] = (e, cfg.mlp_hidden)
        shapes[f"attn.{layer}.alpha_tok_attn"] = (e,)
        shapes[f"attn.{layer}.alpha_img"] = (e,)
        shapes[f"attn.{layer}.alpha_tok_mlp"] = (e,)
        shapes[f"attn.{layer}.liere_rates"] = (cfg.heads, cfg.head_dim // 2, 3)
    shapes[POINT_EMBED] = (e,)
    shapes[ROLE_EMBED] = (2, e)
    d3, d2, d1 = cfg.decoder_channels
    shapes.update(_block_shapes("dec.block3", c4 + c3, d3))
    shapes.update(_block_shapes("dec.block2", d3 + c2, d2))
    shapes.update(_block_shapes("dec.block1", d2 + c1, d1))
    shapes["head.w"] = (d1 + 1, e)
    shapes["head.b"] = (d1 + 1,)
    return shapes


# extra gain on q/k projections at init; see _init_tensor
QK_INIT_GAIN = 8.0


def _unit(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=1, keepdim=True).clamp_min(1e-12)


class SegNet(torch.nn.Module):
    def __init__(self, cfg: NetConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or NetConfig()
        self._names = sorted(manifest(self.cfg))
        gen = torch.Generator().manual_seed(seed)
        for name, shape in manifest(self.cfg).items():
            param = torch.nn.Parameter(self._init_tensor(name, shape, gen))
            # registration forbids dots; the original name stays authoritative
            self.register_parameter(name.replace(".", "__"), param)

    @staticmethod
    def _init_tensor(name: str, shape: tuple[int, ...], gen) -> torch.Tensor:
        t = torch.empty(shape, dtype=torch.float32)
        if name.startswith("attn.") and name.endswith("liere_rates"):
            return t.normal_(0.0, 2.0, generator=gen)
        if "alpha" in name:
            return t.fill_(0.1)
        if name.startswith("prompt."):
            return t.normal_(0.0, 1.0, generator=gen)
        if name == "head.b":
            return t.zero_()
        if name.endswith(".w"):
            torch.nn.init.kaiming_uniform_(
                t.view(shape[0], -1), a=math.sqrt(5), generator=gen
            )
            # attention inputs are unit-norm, so default-scale q/k projections
            # give near-flat score rows and prompts never lock onto their
            # lesion; a larger starting scale makes the softmax selective
            # enough for position-dependent gradients to take hold
            if ".q.w" in name or ".k.w" in name:
                t.mul_(QK_INIT_GAIN)
            return t
        # biases: uniform in +-1/sqrt(fan_in) of the matching kernel
        fan_in = None
        if name.endswith(".b"):
            fan_in = shape[0] * 27  # close enough for a bias range
        bound = 1.0 / math.sqrt(fan_in) if fan_in else 0.01
        return t.uniform_(-bound, bound, generator=gen)

    def tensor(self, name: str) -> torch.nn.Parameter:
        return getattr(self, name.replace(".", "__"))

    def named_weights(self):
        for name in self._names:
            yield name, self.tensor(name)

    def export_state(self) -> dict[str, np.ndarray]:
        return {
            name: p.detach().cpu().numpy().astype(np.float32)
            for name, p in self.named_weights()
        }

    def load_state(self, tensors) -> None:
        with torch.no_grad():
            for name, p in self.named_weights():
                p.copy_(torch.as_tensor(np.asarray(tensors[name]), dtype=torch.float32))

    def prompt_tokens(self, n_prompts: int) -> torch.Tensor:
        """(2P, E) unit-norm endpoint tokens: shared point vector + role."""
        emb = _unit(self.tensor(POINT_EMBED)[None, :] + self.tensor(ROLE_EMBED))
        return emb.repeat(n_prompts, 1)

    def _res_block(self, x: torch.Tensor, prefix: str) -> torch.Tensor:
        h = F.instance_norm(x, eps=_NORM_EPS)
        h = F.relu(F.conv3d(h, self.tensor(f"{prefix}.conv1.w"), self.tensor(f"{prefix}.conv1.b"), padding=1))
        h = F.relu(F.conv3d(h, self.tensor(f"{prefix}.conv2.w"), self.tensor(f"{prefix}.conv2.b"), padding=1))
        if x.shape[1] != h.shape[1]:
            h = h + F.conv3d(x, self.tensor(f"{prefix}.proj.w"), self.tensor(f"{prefix}.proj.b"))
        else:
            h = h + x
        return h

    @staticmethod
    def _positions(shape, device) -> torch.Tensor:
        nz, ny, nx = shape
        grids = torch.meshgrid(
            (torch.arange(nz, dtype=torch.float32, device=device) + 0.5) / nz,
            (torch.arange(ny, dtype=torch.float32, device=device) + 0.5) / ny,
            (torch.arange(nx, dtype=torch.float32, device=device) + 0.5) / nx,
            indexing="ij",
        )
        return torch.stack(grids, dim=-1).reshape(-1, 3)

    @staticmethod
    def _rotate(x: torch.Tensor, pos: torch.Tensor, rates: torch.Tensor) -> torch.Tensor:
        n, heads, hd = x.shape
        angles = torch.einsum("pc,hbc->phb", pos, rates)
        cos = angles.cos()
        sin = angles.sin()
        pairs = x.reshape(n, heads, hd // 2, 2)
        x0 = pairs[..., 0]
        x1 = pairs[..., 1]
        out = torch.stack((cos * x0 - sin * x1, sin * x0 + cos * x1), dim=-1)
        return out.reshape(n, heads, hd)

    def _attend(self, q_in, pos_q, k_in, pos_k, prefix: str, rates) -> torch.Tensor:
        heads = self.cfg.heads
        hd = self.cfg.head_dim
        q = (q_in @ self.tensor(f"{prefix}.q.w").T).reshape(-1, heads, hd)
        k = (k_in @ self.tensor(f"{prefix}.k.w").T).reshape(-1, heads, hd)
        v = (k_in @ self.tensor(f"{prefix}.v.w").T).reshape(-1, heads, hd)
        q = self._rotate(q, pos_q, rates)
        k = self._rotate(k, pos_k, rates)
        scores = torch.einsum("qhd,khd->hqk", q, k) / math.sqrt(hd)
        weights = scores.softmax(dim=2)
        mix = torch.einsum("hqk,khd->qhd", weights, v).reshape(-1, self.cfg.embedding_dim)
        return mix @ self.tensor(f"{prefix}.o.w").T

    def _ngpt(self, h: torch.Tensor, new: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
        return _unit(h + alpha * (_unit(new) - h))

    def forward(self, patch: torch.Tensor, tok_emb: torch.Tensor, tok_pos: torch.Tensor) -> torch.Tensor:
        """(1, D, H, W) patch + (2P, E) tokens + (2P, 3) positions -> (P, D, H, W)."""
        if patch.ndim != 4 or patch.shape[0] != 1:
            raise ValueError(f"patch must be (1, D, H, W), got {tuple(patch.shape)}")
        if any(v % 8 for v in patch.shape[1:]):
            raise ValueError(f"patch dims must be divisible by 8, got {tuple(patch.shape[1:])}")
        if tok_emb.shape[0] % 2 or tok_emb.shape[0] == 0:
            raise ValueError("tokens come in endpoint pairs")

        x = patch[None]  # (1, 1, D, H, W)
        s1 = self._res_block(x, "enc.block1")
        x = F.conv3d(s1, self.tensor("enc.down1.w"), self.tensor("enc.down1.b"), stride=2, padding=1)
        s2 = self._res_block(x, "enc.block2")
        x = F.conv3d(s2, self.tensor("enc.down2.w"), self.tensor("enc.down2.b"), stride=2, padding=1)
        s3 = self._res_block(x, "enc.block3")
        bott = F.conv3d(s3, self.tensor("enc.down3.w"), self.tensor("enc.down3.b"), stride=2, padding=1)

        e = self.cfg.embedding_dim
        grid = bott.shape[2:]
        img = bott[0].reshape(e, -1).T
        pos_img = self._positions(grid, patch.device)
        img = _unit(img)
        tok = _unit(tok_emb)
        for layer in range(self.cfg.attention_layers):
            p = f"attn.{layer}"
            rates = self.tensor(f"{p}.liere_rates")
            new_tok = self._attend(tok, tok_pos, img, pos_img, f"{p}.t2i", rates)
            tok = self._ngpt(tok, new_tok, self.tensor(f"{p}.alpha_tok_attn"))
            new_img = self._attend(img, pos_img, tok, tok_pos, f"{p}.i2t", rates)
            img = self._ngpt(img, new_img, self.tensor(f"{p}.alpha_img"))
            mlp = F.relu(tok @ self.tensor(f"{p}.mlp.fc1.w").T) @ self.tensor(f"{p}.mlp.fc2.w").T
            tok = self._ngpt(tok, mlp, self.tensor(f"{p}.alpha_tok_mlp"))
        bott = img.T.reshape(1, e, *grid)

        x = F.interpolate(bott, size=s3.shape[2:], mode="trilinear", align_corners=False)
        x = self._res_block(torch.cat([x, s3], dim=1), "dec.block3")
        x = F.interpolate(x, size=s2.shape[2:], mode="trilinear", align_corners=False)
        x = self._res_block(torch.cat([x, s2], dim=1), "dec.block2")
        x = F.interpolate(x, size=s1.shape[2:], mode="trilinear", align_corners=False)
        feats = self._res_block(torch.cat([x, s1], dim=1), "dec.block1")[0]

        n_prompts = tok.shape[0] // 2
        c = feats.shape[0]
        pair_mean = tok.reshape(n_prompts, 2, e).mean(dim=1)
        head = pair_mean @ self.tensor("head.w").T + self.tensor("head.b")
        logits = torch.einsum("pc,cdhw->pdhw", head[:, :c], feats)
        return logits + head[:, c:].reshape(n_prompts, 1, 1, 1)
