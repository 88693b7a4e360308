"""The segmentation network: encoder, bottleneck cross-attention, decoder.

Layout, in order of execution on a (1, D, H, W) patch with D,H,W divisible
by 8:

  encoder   three residual stages (instance norm, two conv3x3+ReLU, skip add)
            joined by stride-2 convs; the last stride-2 conv emits the
            bottleneck at 1/8 resolution with ``embedding_dim`` channels
  attention L layers over the flattened bottleneck voxels and the prompt
            tokens: token-to-image cross-attention, image-to-token
            cross-attention, then a per-token MLP. Queries and keys carry
            rotary position encodings built from learned per-block angle
            rates (block-diagonal 2x2 rotations, angle linear in normalized
            (z,y,x) position, so R(p)^T R(q) == R(q-p) exactly). Residual
            updates follow the normalized-transformer rule: slide the old
            unit vector toward the normalized update by a learned per-dim
            rate, then renormalize. Voxel vectors and tokens live on the
            unit sphere at every layer boundary.
  decoder   three stages of trilinear 2x upsampling, skip concatenation and
            one residual block each, ending in a small feature map at patch
            resolution
  head      per prompt: average its two endpoint tokens, map through a
            linear layer to per-channel weights plus a bias, and take the
            dot product with the decoder features to get that prompt's
            logit volume

Everything runs in float32; with a single BLAS thread the outputs are
bitwise reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ManifestError, RecistSegError, ShapeError
from .lens import ModelWeights, config_fingerprint, read_lens
from .ops import check_tensor4, conv3d, instance_norm, l2_normalize, trilinear_resize
from .prompts import POINT_EMBED, ROLE_EMBED, PromptTokens

_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    encoder_channels are the per-stage widths; the last entry is the
    bottleneck width and must equal embedding_dim. Defaults are tuned so the
    total parameter count sits near 1.23M and a 128^3 patch costs about 33G
    multiply-accumulates.
    """

    encoder_channels: tuple[int, int, int, int] = (8, 16, 64, 128)
    embedding_dim: int = 128
    attention_layers: int = 2
    heads: int = 4
    max_patch: tuple[int, int, int] = (128, 128, 128)
    liere_block_size: int = 2

    def __post_init__(self):
        if len(self.encoder_channels) != 4:
            raise ConfigError(f"need 4 encoder stages, got {self.encoder_channels}")
        if min(self.encoder_channels) < 1:
            raise ConfigError(f"encoder channels must be positive: {self.encoder_channels}")
        if self.encoder_channels[-1] != self.embedding_dim:
            raise ConfigError(
                f"bottleneck width {self.encoder_channels[-1]} must equal "
                f"embedding_dim {self.embedding_dim}"
            )
        if self.embedding_dim % self.heads:
            raise ConfigError(f"embedding_dim {self.embedding_dim} not divisible by heads")
        if self.liere_block_size != 2:
            raise ConfigError("only 2x2 rotation blocks are supported")
        if self.head_dim % 2:
            raise ConfigError(f"head dim {self.head_dim} must be even for 2x2 rotation blocks")

    @property
    def head_dim(self) -> int:
        return self.embedding_dim // self.heads

    @property
    def decoder_channels(self) -> tuple[int, int, int]:
        # half the matching encoder stage width, ordered coarse to fine
        c = self.encoder_channels
        return (max(1, c[2] // 2), max(1, c[1] // 2), max(1, c[0] // 2))

    @property
    def mlp_hidden(self) -> int:
        return 4 * self.embedding_dim

    def canonical(self) -> dict:
        return {
            "encoder_channels": list(self.encoder_channels),
            "embedding_dim": self.embedding_dim,
            "attention_layers": self.attention_layers,
            "heads": self.heads,
            "max_patch": list(self.max_patch),
            "liere_block_size": self.liere_block_size,
        }

    def fingerprint(self) -> str:
        return config_fingerprint(self.canonical())


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


def manifest(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Required tensor name -> shape map for a config."""
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


def param_count(cfg: ModelConfig) -> int:
    return int(sum(math.prod(s) for s in manifest(cfg).values()))


def flop_count(
    cfg: ModelConfig,
    patch: tuple[int, int, int] | None = None,
    n_prompts: int = 1,
) -> int:
    """Static multiply-accumulate count for one forward pass.

    Counts the weight-bearing layers (convolutions, attention projections,
    attention score/value matmuls, MLPs, head). Normalizations, rotations,
    resizes and bias adds are ignored; together they are far below the
    count's 30% tolerance band.
    """
    if patch is None:
        patch = cfg.max_patch
    d, h, w = patch
    if any(v % 8 for v in patch):
        raise ShapeError(f"patch dims must be divisible by 8, got {patch}")
    c1, c2, c3, c4 = cfg.encoder_channels
    e = cfg.embedding_dim
    full = d * h * w
    half = full // 8
    quarter = full // 64
    eighth = full // 512

    def block(vox: int, c_in: int, c_out: int) -> int:
        macs = vox * c_out * c_in * 27 + vox * c_out * c_out * 27
        if c_in != c_out:
            macs += vox * c_out * c_in
        return macs

    total = block(full, 1, c1) + half * c2 * c1 * 27
    total += block(half, c2, c2) + quarter * c3 * c2 * 27
    total += block(quarter, c3, c3) + eighth * c4 * c3 * 27

    n = eighth  # attention sequence length on the image side
    t = 2 * n_prompts
    per_layer = (
        (t + 2 * n + t) * e * e  # t2i: Q from tokens, K+V from image, O back
        + 2 * t * n * e  # t2i scores and value mix across all heads
        + (n + 2 * t + n) * e * e  # i2t: Q from image, K+V from tokens, O
        + 2 * n * t * e  # i2t scores and value mix
        + 2 * t * e * cfg.mlp_hidden  # token MLP
    )
    total += cfg.attention_layers * per_layer

    d3, d2, d1 = cfg.decoder_channels
    total += block(quarter, c4 + c3, d3)
    total += block(half, d3 + c2, d2)
    total += block(full, d2 + c1, d1)

    total += n_prompts * (d1 + 1) * e  # head linear
    total += n_prompts * full * d1  # per-prompt feature dot product
    return int(total)


def load_weights(path, cfg: ModelConfig | None = None) -> ModelWeights:
    """Read a LENS file and validate it against the config's manifest.

    Collects every missing, extra, and mis-shaped tensor into one
    ManifestError rather than failing on the first.
    """
    cfg = cfg or ModelConfig()
    tensors = read_lens(path)
    want = manifest(cfg)
    violations = []
    for name in sorted(want):
        if name not in tensors:
            violations.append(f"missing tensor {name!r} (shape {want[name]})")
        elif tuple(tensors[name].shape) != want[name]:
            violations.append(
                f"tensor {name!r} has shape {tuple(tensors[name].shape)}, expected {want[name]}"
            )
    for name in sorted(tensors):
        if name not in want:
            violations.append(f"unexpected tensor {name!r}")
    if violations:
        raise ManifestError(violations)
    return ModelWeights(
        tensors=tensors, version=1, fingerprint=cfg.fingerprint(), config=cfg
    )


def _res_block(x: np.ndarray, w: ModelWeights, prefix: str) -> np.ndarray:
    """instance norm -> (conv3 + ReLU) x2 -> add projected stage input."""
    h = instance_norm(x, _NORM_EPS)
    h = conv3d(h, w[f"{prefix}.conv1.w"], w[f"{prefix}.conv1.b"], stride=1, padding=1)
    np.maximum(h, 0.0, out=h)
    h = conv3d(h, w[f"{prefix}.conv2.w"], w[f"{prefix}.conv2.b"], stride=1, padding=1)
    np.maximum(h, 0.0, out=h)
    if f"{prefix}.proj.w" in w:
        h += conv3d(x, w[f"{prefix}.proj.w"], w[f"{prefix}.proj.b"])
    else:
        h += x
    assert np.isfinite(h).all(), f"non-finite activation after {prefix}"
    return h


def encoder_forward(patch: np.ndarray, w: ModelWeights):
    """Run the encoder; returns (bottleneck, [skip1, skip2, skip3]).

    The patch must be (1, D, H, W) with spatial dims divisible by 8. Skips
    are the three stage outputs at full, 1/2 and 1/4 resolution; the
    bottleneck is the final stride-2 conv output at 1/8.
    """
    patch = check_tensor4(patch, "patch")
    if patch.shape[0] != 1:
        raise ShapeError(f"patch must have a single channel, got {patch.shape[0]}")
    if any(v % 8 for v in patch.shape[1:]):
        raise ShapeError(f"patch dims must be divisible by 8, got {patch.shape[1:]}")

    s1 = _res_block(patch, w, "enc.block1")
    x = conv3d(s1, w["enc.down1.w"], w["enc.down1.b"], stride=2, padding=1)
    s2 = _res_block(x, w, "enc.block2")
    x = conv3d(s2, w["enc.down2.w"], w["enc.down2.b"], stride=2, padding=1)
    s3 = _res_block(x, w, "enc.block3")
    bottleneck = conv3d(s3, w["enc.down3.w"], w["enc.down3.b"], stride=2, padding=1)
    return bottleneck, [s1, s2, s3]


def liere_rotations(
    positions: np.ndarray, w: ModelWeights, dim: int, layer: int = 0
) -> np.ndarray:
    """Rotation matrices R(p) for each normalized (z,y,x) position.

    Returns (P, heads, dim, dim) block-diagonal matrices; block k of head h
    rotates by the dot product of p with the learned angle-rate vector
    rates[h, k]. Blocks commute, so R(p)^T R(q) == R(q - p) exactly.
    """
    if dim % 2:
        raise ConfigError(f"head dim {dim} must be even")
    rates = np.asarray(w["attn.0.liere_rates" if layer == 0 else f"attn.{layer}.liere_rates"])
    heads, blocks, _ = rates.shape
    if blocks != dim // 2:
        raise ConfigError(f"rates cover {blocks} blocks, head dim {dim} needs {dim // 2}")
    positions = np.asarray(positions, dtype=np.float32).reshape(-1, 3)
    angles = np.einsum("pc,hbc->phb", positions, rates)  # (P, H, B)
    cos = np.cos(angles)
    sin = np.sin(angles)
    out = np.zeros((positions.shape[0], heads, dim, dim), dtype=np.float32)
    idx = np.arange(dim // 2)
    out[:, :, 2 * idx, 2 * idx] = cos
    out[:, :, 2 * idx, 2 * idx + 1] = -sin
    out[:, :, 2 * idx + 1, 2 * idx] = sin
    out[:, :, 2 * idx + 1, 2 * idx + 1] = cos
    return out


def _rotate(x: np.ndarray, positions: np.ndarray, rates: np.ndarray) -> np.ndarray:
    """Apply the block rotations to (N, H, head_dim) query/key vectors."""
    n, heads, hd = x.shape
    angles = np.einsum("pc,hbc->phb", positions, rates)  # (N, H, B)
    cos = np.cos(angles)
    sin = np.sin(angles)
    pairs = x.reshape(n, heads, hd // 2, 2)
    x0 = pairs[..., 0]
    x1 = pairs[..., 1]
    out = np.empty_like(pairs)
    out[..., 0] = cos * x0 - sin * x1
    out[..., 1] = sin * x0 + cos * x1
    return out.reshape(n, heads, hd)


def _attend(q_in, pos_q, k_in, pos_k, w: ModelWeights, prefix: str, rates, heads: int):
    """One rotary cross-attention pass; returns the output projection."""
    e = q_in.shape[1]
    hd = e // heads
    q = (q_in @ w[f"{prefix}.q.w"].T).reshape(-1, heads, hd)
    k = (k_in @ w[f"{prefix}.k.w"].T).reshape(-1, heads, hd)
    v = (k_in @ w[f"{prefix}.v.w"].T).reshape(-1, heads, hd)
    q = _rotate(q, pos_q, rates)
    k = _rotate(k, pos_k, rates)
    scores = np.einsum("qhd,khd->hqk", q, k) / np.float32(math.sqrt(hd))
    scores -= scores.max(axis=2, keepdims=True)  # stable softmax
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=2, keepdims=True)
    mix = np.einsum("hqk,khd->qhd", scores, v).reshape(-1, e)
    return mix @ w[f"{prefix}.o.w"].T


def _ngpt_update(h: np.ndarray, new: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Move unit vectors toward the normalized update, then renormalize.

    A zero update (alpha all zero, or new parallel to h) returns h
    untouched, making zero-rate layers exact identities.
    """
    delta = alpha * (l2_normalize(new, axis=1) - h)
    if not delta.any():
        return h
    return l2_normalize(h + delta, axis=1)


def _bottleneck_positions(shape: tuple[int, int, int]) -> np.ndarray:
    """Normalized (z,y,x) voxel-center positions of the bottleneck grid."""
    nz, ny, nx = shape
    zz, yy, xx = np.meshgrid(
        (np.arange(nz) + 0.5) / nz,
        (np.arange(ny) + 0.5) / ny,
        (np.arange(nx) + 0.5) / nx,
        indexing="ij",
    )
    return np.stack([zz, yy, xx], axis=-1).reshape(-1, 3).astype(np.float32)


def bottleneck_attention(
    bottleneck: np.ndarray, tokens: PromptTokens, w: ModelWeights
) -> tuple[np.ndarray, PromptTokens]:
    """Exchange information between bottleneck voxels and prompt tokens.

    Inputs are brought onto the unit sphere (skipped when already within
    1e-4, so pre-normalized input passes through untouched); every layer
    leaves both sets on the unit sphere.
    """
    cfg: ModelConfig = w.config or ModelConfig()
    bottleneck = check_tensor4(bottleneck, "bottleneck")
    e, nz, ny, nx = bottleneck.shape
    if e != cfg.embedding_dim:
        raise ShapeError(f"bottleneck has {e} channels, expected {cfg.embedding_dim}")
    if tokens.embeddings.size and tokens.embeddings.shape[1] != e:
        raise ShapeError(f"token dim {tokens.embeddings.shape[1]} != bottleneck channels {e}")

    img = bottleneck.reshape(e, -1).T  # (N, E) voxel channel vectors
    pos_img = _bottleneck_positions((nz, ny, nx))
    tok = np.ascontiguousarray(tokens.embeddings, dtype=np.float32)
    pos_tok = np.ascontiguousarray(tokens.positions, dtype=np.float32)

    def on_sphere(x):
        if x.size == 0:
            return x
        norms = np.linalg.norm(x, axis=1)
        return x if np.abs(norms - 1.0).max() <= 1e-4 else l2_normalize(x, axis=1)

    img = on_sphere(np.ascontiguousarray(img))
    tok = on_sphere(tok)

    for layer in range(cfg.attention_layers):
        p = f"attn.{layer}"
        rates = w[f"{p}.liere_rates"]
        if tok.shape[0]:
            new_tok = _attend(tok, pos_tok, img, pos_img, w, f"{p}.t2i", rates, cfg.heads)
            tok = _ngpt_update(tok, new_tok, w[f"{p}.alpha_tok_attn"])
            new_img = _attend(img, pos_img, tok, pos_tok, w, f"{p}.i2t", rates, cfg.heads)
            img = _ngpt_update(img, new_img, w[f"{p}.alpha_img"])
            mlp = np.maximum(tok @ w[f"{p}.mlp.fc1.w"].T, 0.0) @ w[f"{p}.mlp.fc2.w"].T
            tok = _ngpt_update(tok, mlp, w[f"{p}.alpha_tok_mlp"])
        assert np.isfinite(img).all(), f"non-finite image embedding after layer {layer}"

    out = np.ascontiguousarray(img.T.reshape(e, nz, ny, nx))
    return out, PromptTokens(embeddings=tok, positions=tokens.positions, labels=tokens.labels)


def decoder_forward(
    bottleneck: np.ndarray, skips: list, w: ModelWeights, tokens: PromptTokens
) -> np.ndarray:
    """Upsample back to patch resolution and emit one logit volume per prompt.

    Each prompt's head weights come from a linear map of its two (updated)
    endpoint tokens' mean, SAM-style; the last output element is the bias.
    """
    s1, s2, s3 = skips
    x = trilinear_resize(bottleneck, s3.shape[1:])
    x = _res_block(np.concatenate([x, s3], axis=0), w, "dec.block3")
    x = trilinear_resize(x, s2.shape[1:])
    x = _res_block(np.concatenate([x, s2], axis=0), w, "dec.block2")
    x = trilinear_resize(x, s1.shape[1:])
    feats = _res_block(np.concatenate([x, s1], axis=0), w, "dec.block1")

    n_prompts = tokens.count // 2
    c, d, h, wd = feats.shape
    pair_mean = tokens.embeddings.reshape(n_prompts, 2, -1).mean(axis=1)
    head = pair_mean @ w["head.w"].T + w["head.b"]  # (P, C+1)
    logits = np.tensordot(head[:, :c], feats, axes=([1], [0]))
    logits += head[:, c:].reshape(n_prompts, 1, 1, 1)
    return logits.astype(np.float32)


def forward(patch: np.ndarray, tokens: PromptTokens, w: ModelWeights) -> np.ndarray:
    """Full network pass: (1,D,H,W) patch -> (n_prompts, D, H, W) logits."""
    bottleneck, skips = encoder_forward(patch, w)
    bottleneck, tokens = bottleneck_attention(bottleneck, tokens, w)
    logits = decoder_forward(bottleneck, skips, w, tokens)
    if not np.isfinite(logits).all():
        raise RecistSegError("model produced non-finite logits")
    return logits
