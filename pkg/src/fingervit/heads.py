"""Task heads and losses.

Per-block PAD classifiers (two affine layers with GELU on mean-pooled
patch tokens), the additive-angular-margin recognition loss, plain
cross entropy, the MSE distillation loss, and cosine match scoring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vit import ModelConfig

# PAD logits are ordered [bona fide, attack]; index 1 is the attack class.
BONA_FIDE, ATTACK = 0, 1


def init_pad_heads(config: ModelConfig, rng: np.random.Generator,
                   dtype=np.float32) -> dict[str, Tensor]:
    """One two-layer classifier per transformer block, output dimension 2."""
    d, hidden = config.embed_dim, config.head_hidden
    params: dict[str, Tensor] = {}
    for i in range(config.depth):
        p = f"pad_heads.{i}"
        params[f"{p}.fc1.weight"] = Tensor(rng.normal(0.0, 0.02, size=(d, hidden)).astype(dtype),
                                           requires_grad=True)
        params[f"{p}.fc1.bias"] = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        params[f"{p}.fc2.weight"] = Tensor(rng.normal(0.0, 0.02, size=(hidden, 2)).astype(dtype),
                                           requires_grad=True)
        params[f"{p}.fc2.bias"] = Tensor(np.zeros(2, dtype=dtype), requires_grad=True)
    return params


def pad_head_forward(layer_tokens, params: dict[str, Tensor], layer: int,
                     depth: int | None = None) -> Tensor:
    """PAD logits from one block's tokens (``layer`` is 1-based).

    Mean-pools rows 1..P (the class token is excluded), then applies the
    two affine layers with GELU in between. Accepts (1+P, d) or (B, 1+P, d).
    """
    n_heads = depth if depth is not None else sum(1 for k in params if k.endswith(".fc1.bias"))
    if not 1 <= layer <= n_heads:
        raise ValueError(f"PAD layer {layer} out of range [1, {n_heads}]")
    x = layer_tokens if isinstance(layer_tokens, Tensor) else Tensor(np.asarray(layer_tokens))
    pooled = ad.mean(x[..., 1:, :], axis=-2)
    p = f"pad_heads.{layer - 1}"
    h = ad.gelu(ad.add(ad.matmul(_as2d(pooled), params[f"{p}.fc1.weight"]),
                       params[f"{p}.fc1.bias"]))
    logits = ad.add(ad.matmul(h, params[f"{p}.fc2.weight"]), params[f"{p}.fc2.bias"])
    return ad.reshape(logits, (2,)) if pooled.ndim == 1 else logits


def _as2d(x: Tensor) -> Tensor:
    return ad.reshape(x, (1, x.shape[0])) if x.ndim == 1 else x


def pad_score(logits) -> float | np.ndarray:
    """Attack probability from 2-dim PAD logits: softmax(logits)[attack]."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if arr.shape[-1] != 2:
        raise ValueError(f"PAD logits must have last dimension 2, got shape {arr.shape}")
    shifted = arr - arr.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    prob = e[..., ATTACK] / e.sum(axis=-1)
    return float(prob) if prob.ndim == 0 else prob


@dataclass
class ArcFaceParams:
    """Class-weight matrix plus the angular margin (radians) and logit scale."""

    weight: Tensor
    margin: float = 0.5
    scale: float = 64.0

    def __post_init__(self):
        if not 0.0 <= self.margin < math.pi:
            raise ValueError(f"margin must lie in [0, pi), got {self.margin}")
        if self.scale <= 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")


def init_arcface(config: ModelConfig, rng: np.random.Generator, margin: float = 0.5,
                 scale: float = 64.0, dtype=np.float32) -> ArcFaceParams:
    w = Tensor(rng.normal(0.0, 0.01, size=(config.num_identities, config.embed_dim)).astype(dtype),
               requires_grad=True)
    return ArcFaceParams(weight=w, margin=margin, scale=scale)


def _l2_normalize(x: Tensor, what: str) -> Tensor:
    sq = ad.sum_(ad.mul(x, x), axis=-1, keepdims=True)
    norms = np.sqrt(sq.data)
    if np.any(norms == 0.0):
        raise ValueError(f"cannot normalize a zero {what} vector")
    return ad.mul(x, ad.pow_const(sq, -0.5))


def arcface_logits(embedding, arcface: ArcFaceParams, target) -> Tensor:
    """Margin-adjusted class logits on the normalized-embedding hypersphere.

    logit_j = s*cos(theta_j) for j != target and s*cos(theta_target + m)
    for the target class, guarded so theta + m stays within pi: where
    cos(theta) < cos(pi - m) the target logit falls back to the plain
    s*cos(theta) (easy margin). Accepts (d,) or (B, d) embeddings.
    """
    x = embedding if isinstance(embedding, Tensor) else Tensor(np.asarray(embedding))
    single = x.ndim == 1
    x2 = _as2d(x)
    targets = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n_classes = arcface.weight.shape[0]
    if targets.shape[0] != x2.shape[0]:
        raise ValueError(f"{targets.shape[0]} targets for {x2.shape[0]} embeddings")
    if np.any(targets < 0) or np.any(targets >= n_classes):
        raise ValueError(f"target out of range [0, {n_classes})")

    emb = _l2_normalize(x2, "embedding")
    w = _l2_normalize(arcface.weight, "class weight")
    cos = ad.matmul(emb, ad.swapaxes(w, 0, 1))

    dtype = x2.data.dtype
    m = arcface.margin
    cos_m = np.asarray(math.cos(m), dtype=dtype)
    sin_m = np.asarray(math.sin(m), dtype=dtype)
    # sin(theta) from cos(theta); the clip also blocks the sqrt gradient blowup at |cos|=1
    sin = ad.sqrt(ad.clip(ad.sub(Tensor(np.asarray(1.0, dtype=dtype)), ad.mul(cos, cos)),
                          1e-12, 1.0))
    phi = ad.sub(ad.mul(cos, Tensor(cos_m)), ad.mul(sin, Tensor(sin_m)))
    guard = cos.data >= math.cos(math.pi - m)
    target_logit = ad.where(guard, phi, cos)
    onehot = np.zeros(cos.shape, dtype=bool)
    onehot[np.arange(x2.shape[0]), targets] = True
    logits = ad.mul(ad.where(onehot, target_logit, cos),
                    Tensor(np.asarray(arcface.scale, dtype=dtype)))
    return ad.reshape(logits, (n_classes,)) if single else logits


def cross_entropy(logits, label) -> Tensor:
    """Mean negative log softmax probability of the true class (stabilized)."""
    x = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits))
    single = x.ndim == 1
    x2 = _as2d(x)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    n, k = x2.shape
    if labels.shape[0] != n:
        raise ValueError(f"{labels.shape[0]} labels for {n} rows of logits")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range [0, {k})")
    shift = Tensor(x2.data.max(axis=-1, keepdims=True))  # constant, shift invariance is exact
    z = ad.sub(x2, shift)
    log_norm = ad.log(ad.sum_(ad.exp(z), axis=-1))
    picked = z[np.arange(n), labels]
    return ad.mean(ad.sub(log_norm, picked))


def mse_distill(student, teacher) -> Tensor:
    """Mean squared difference between embeddings; the teacher side is detached."""
    s = student if isinstance(student, Tensor) else Tensor(np.asarray(student))
    t = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher)
    if s.shape != t.shape:
        raise ValueError(f"embedding shapes differ: {s.shape} vs {t.shape}")
    diff = ad.sub(s, Tensor(t.astype(s.data.dtype, copy=False)))
    return ad.mean(ad.mul(diff, diff))


def cosine_similarity(e1, e2) -> float:
    """Dot product of the L2-normalized vectors, in [-1, 1]."""
    a = np.asarray(e1.data if isinstance(e1, Tensor) else e1, dtype=np.float64).reshape(-1)
    b = np.asarray(e2.data if isinstance(e2, Tensor) else e2, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def cosine_matrix(probes: np.ndarray, references: np.ndarray) -> np.ndarray:
    """Pairwise cosine scores between probe and reference embedding rows."""
    p = np.asarray(probes, dtype=np.float32)
    r = np.asarray(references, dtype=np.float32)
    pn = np.linalg.norm(p, axis=1, keepdims=True)
    rn = np.linalg.norm(r, axis=1, keepdims=True)
    if np.any(pn == 0.0) or np.any(rn == 0.0):
        raise ValueError("cosine similarity undefined for a zero vector")
    return (p / pn) @ (r / rn).T
