"""Vision-transformer feature extractor.

Patch embedding, learned positional and class embeddings, a stack of
pre-norm transformer blocks (LN before MHSA and MLP, residuals around
both), and a final layer norm on the class token. The forward pass
records the token matrix after every block so per-layer probes (the PAD
heads) can tap intermediate features.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names
("blocks.3.qkv.weight", ...); that same naming is the checkpoint index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class ModelConfig:
    """Architecture hyperparameters for the backbone and its heads."""

    image_size: int = 32
    channels: int = 1
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    num_identities: int = 200
    pad_head_hidden_dim: int | None = None

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 0:
            raise ValueError(f"depth must be >= 0, got {self.depth}")
        if self.num_identities < 1:
            raise ValueError(f"num_identities must be >= 1, got {self.num_identities}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def tokens(self) -> int:
        return 1 + self.num_patches

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def head_hidden(self) -> int:
        return self.pad_head_hidden_dim if self.pad_head_hidden_dim is not None else self.embed_dim


def toy_config(num_identities: int = 200) -> ModelConfig:
    """Desk-scale config: 32x32 grayscale, patch 8, d=64, 6 blocks, 4 heads."""
    return ModelConfig(image_size=32, channels=1, patch_size=8, embed_dim=64,
                       depth=6, heads=4, mlp_ratio=4, num_identities=num_identities)


def full_config(num_identities: int = 200) -> ModelConfig:
    """Small-ViT config: 224x224x3, patch 16, d=384, 12 blocks, 6 heads."""
    return ModelConfig(image_size=224, channels=3, patch_size=16, embed_dim=384,
                       depth=12, heads=6, mlp_ratio=4, num_identities=num_identities)


@dataclass
class FeatureBundle:
    """Per-block token matrices plus the final classification embedding.

    ``layer_tokens[i]`` is the raw output of block i+1 (shape (1+P, d) or
    batched (B, 1+P, d)); ``cls_embedding`` is the final layer norm applied
    to row 0 of the last block's tokens.
    """

    layer_tokens: list = field(default_factory=list)
    cls_embedding: Tensor | None = None


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split (C,H,W) or (B,C,H,W) into raster-ordered patch vectors.

    Returns (P, C*ps*ps) or (B, P, C*ps*ps); the patch grid is traversed
    row-major, each patch flattened channel-first.
    """
    img = np.asarray(image)
    batched = img.ndim == 4
    if not batched:
        if img.ndim != 3:
            raise ValueError(f"patchify expects (C,H,W) or (B,C,H,W), got shape {img.shape}")
        img = img[None]
    b, c, h, w = img.shape
    ps = patch_size
    if h % ps != 0 or w % ps != 0:
        raise ValueError(f"image size {h}x{w} not divisible by patch size {ps}")
    gh, gw = h // ps, w // ps
    patches = img.reshape(b, c, gh, ps, gw, ps)
    patches = patches.transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * ps * ps)
    patches = np.ascontiguousarray(patches)
    return patches if batched else patches[0]


def init_backbone_params(config: ModelConfig, rng: np.random.Generator,
                         dtype=np.float32) -> dict[str, Tensor]:
    """Fresh backbone parameters; weight draws are N(0, 0.02), biases zero.

    The draw order is fixed (patch embed, cls, pos, blocks in order, final
    norm) so a seeded generator reproduces parameters bit for bit.
    """
    if config.depth < 1:
        raise ValueError(f"cannot build a backbone with depth {config.depth}")
    d = config.embed_dim
    std = 0.02

    def w(*shape):
        return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    params: dict[str, Tensor] = {}
    params["patch_embed.weight"] = w(config.patch_dim, d)
    params["patch_embed.bias"] = zeros(d)
    params["cls_token"] = w(d)
    params["pos_embed"] = w(config.tokens, d)
    for i in range(config.depth):
        p = f"blocks.{i}"
        params[f"{p}.ln1.gamma"] = ones(d)
        params[f"{p}.ln1.beta"] = zeros(d)
        params[f"{p}.qkv.weight"] = w(d, 3 * d)
        params[f"{p}.qkv.bias"] = zeros(3 * d)
        params[f"{p}.proj.weight"] = w(d, d)
        params[f"{p}.proj.bias"] = zeros(d)
        params[f"{p}.ln2.gamma"] = ones(d)
        params[f"{p}.ln2.beta"] = zeros(d)
        params[f"{p}.mlp.fc1.weight"] = w(d, config.mlp_ratio * d)
        params[f"{p}.mlp.fc1.bias"] = zeros(config.mlp_ratio * d)
        params[f"{p}.mlp.fc2.weight"] = w(config.mlp_ratio * d, d)
        params[f"{p}.mlp.fc2.bias"] = zeros(d)
    params["final_norm.gamma"] = ones(d)
    params["final_norm.beta"] = zeros(d)
    return params


BACKBONE_PREFIXES = ("patch_embed.", "cls_token", "pos_embed", "blocks.", "final_norm.")


def backbone_subset(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: v for k, v in params.items() if k.startswith(BACKBONE_PREFIXES)}


def embed_sequence(patches, params: dict[str, Tensor]) -> Tensor:
    """Project patches and prepend the class token, adding positional embeddings.

    Row 0 is cls_token + pos[0]; rows 1..P are patch projections + pos[1:].
    Accepts (P, L) or batched (B, P, L); returns (1+P, d) or (B, 1+P, d).
    """
    x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches))
    single = x.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    w = params["patch_embed.weight"]
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"patch vector length {x.shape[-1]} does not match projection input {w.shape[0]}")
    pos = params["pos_embed"]
    proj = ad.add(ad.matmul(x, w), params["patch_embed.bias"])
    proj = ad.add(proj, pos[1:])
    b = x.shape[0]
    d = w.shape[1]
    cls_row = ad.add(params["cls_token"], pos[0])
    cls_row = ad.broadcast_to(ad.reshape(cls_row, (1, 1, d)), (b, 1, d))
    tokens = ad.concat([cls_row, proj], axis=1)
    return tokens[0] if single else tokens


def self_attention(x: Tensor, qkv_w: Tensor, qkv_b: Tensor, proj_w: Tensor,
                   proj_b: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    """Multi-head scaled dot-product self attention.

    Returns (output tokens, attention weights); weights have shape
    (B, heads, T, T) and each row sums to 1.
    """
    single = x.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    b, t, d = x.shape
    dh = d // heads
    qkv = ad.add(ad.matmul(x, qkv_w), qkv_b)
    qkv = ad.reshape(qkv, (b, t, 3, heads, dh))
    q = ad.swapaxes(qkv[:, :, 0], 1, 2)
    k = ad.swapaxes(qkv[:, :, 1], 1, 2)
    v = ad.swapaxes(qkv[:, :, 2], 1, 2)
    scale = 1.0 / math.sqrt(dh)
    scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)),
                    Tensor(np.asarray(scale, dtype=x.data.dtype)))
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(attn, v)
    ctx = ad.reshape(ad.swapaxes(ctx, 1, 2), (b, t, d))
    out = ad.add(ad.matmul(ctx, proj_w), proj_b)
    if single:
        out = ad.reshape(out, (t, d))
    return out, attn


def transformer_block(tokens, params: dict[str, Tensor], index: int, heads: int) -> Tensor:
    """One pre-norm block: x + MHSA(LN(x)), then + MLP(LN(.))."""
    x = tokens if isinstance(tokens, Tensor) else Tensor(np.asarray(tokens))
    p = f"blocks.{index}"
    attn_in = ad.layer_norm(x, params[f"{p}.ln1.gamma"], params[f"{p}.ln1.beta"])
    attn_out, _ = self_attention(attn_in, params[f"{p}.qkv.weight"], params[f"{p}.qkv.bias"],
                                 params[f"{p}.proj.weight"], params[f"{p}.proj.bias"], heads)
    x = ad.add(x, attn_out)
    mlp_in = ad.layer_norm(x, params[f"{p}.ln2.gamma"], params[f"{p}.ln2.beta"])
    h = ad.gelu(ad.add(ad.matmul(mlp_in, params[f"{p}.mlp.fc1.weight"]),
                       params[f"{p}.mlp.fc1.bias"]))
    mlp_out = ad.add(ad.matmul(h, params[f"{p}.mlp.fc2.weight"]), params[f"{p}.mlp.fc2.bias"])
    return ad.add(x, mlp_out)


def forward_features(image, params: dict[str, Tensor], config: ModelConfig) -> FeatureBundle:
    """Full backbone pass: returns every block's tokens and the final cls embedding."""
    if config.depth < 1:
        raise ValueError(f"cannot run a backbone with depth {config.depth}")
    img = np.asarray(image)
    expected = (config.channels, config.image_size, config.image_size)
    if img.shape[-3:] != expected:
        raise ValueError(f"image shape {img.shape} does not match config {expected}")
    patches = patchify(img, config.patch_size)
    tokens = embed_sequence(patches, params)
    bundle = FeatureBundle()
    for i in range(config.depth):
        tokens = transformer_block(tokens, params, i, config.heads)
        bundle.layer_tokens.append(tokens)
    cls = tokens[..., 0, :]
    bundle.cls_embedding = ad.layer_norm(cls, params["final_norm.gamma"], params["final_norm.beta"])
    return bundle


def param_count(config: ModelConfig) -> int:
    """Closed-form learnable-scalar count of the backbone (the recognition path).

    PAD heads and the ArcFace class matrix are counted separately by the
    benchmark. Valid for depth 0 (embedding-only degenerate count).
    """
    d = config.embed_dim
    r = config.mlp_ratio
    embed = config.patch_dim * d + d      # patch projection + bias
    embed += d                            # class token
    embed += config.tokens * d            # positional embeddings
    per_block = (
        2 * d                             # ln1
        + d * 3 * d + 3 * d               # qkv
        + d * d + d                       # attention output projection
        + 2 * d                           # ln2
        + d * r * d + r * d               # mlp fc1
        + r * d * d + d                   # mlp fc2
    )
    final = 2 * d
    return embed + config.depth * per_block + final
