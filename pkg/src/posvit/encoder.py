"""Patchification, patch embedding and a pre-norm multi-head ViT encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    cross_entropy,
    gelu,
    layernorm,
    matmul,
    reshape,
    scale,
    slice_axis,
    softmax,
    transpose,
    transpose_axes,
)

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for the encoder and its heads."""

    height: int = 32
    width: int = 32
    channels: int = 1
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    pos_dim: int = 64
    use_pe: bool = False
    num_classes: int = 10
    mlp_ratio: int = 4
    decoder_depth: int = 1
    decoder_dim: int = 0  # 0 means embed_dim // 2
    decoder_heads: int = 2

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError(
                f"image {self.height}x{self.width} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even (pair features use half embeddings)")
        dd = self.decoder_dim or self.embed_dim // 2
        if dd % self.decoder_heads:
            raise ValueError(f"decoder dim {dd} not divisible by decoder heads")

    @property
    def grid_rows(self) -> int:
        return self.height // self.patch_size

    @property
    def grid_cols(self) -> int:
        return self.width // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def dec_dim(self) -> int:
        return self.decoder_dim or self.embed_dim // 2


@dataclass
class PatchSequence:
    """Embedded tokens plus the raster-order position of each patch."""

    tokens: Tensor  # (N+1) x D, row 0 is the class token
    abs_labels: np.ndarray  # 0..N-1 in raster order
    grid: tuple[int, int]


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within two deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def init_encoder_params(
    cfg: ModelConfig,
    rng: np.random.Generator,
    std: float = INIT_STD,
    random_classifier: bool = False,
) -> dict[str, Tensor]:
    """Fresh encoder parameter set.

    Weights are truncated normal, biases zero, and the classifier zero so the
    initial classification loss is exactly log(num_classes). The positional
    encoding, when enabled, is random so it actually breaks permutation
    symmetry from the first step. ``random_classifier`` randomizes the
    classifier too, which gradient checking needs to get nonzero flow
    through the trunk.
    """
    d = cfg.embed_dim
    p: dict[str, Tensor] = {}
    p["patch_embed"] = Tensor(trunc_normal(rng, (cfg.patch_dim, d), std), requires_grad=True)
    p["class_token"] = Tensor(trunc_normal(rng, (d,), std), requires_grad=True)
    if cfg.use_pe:
        p["pe"] = Tensor(trunc_normal(rng, (cfg.num_patches + 1, d), std), requires_grad=True)
    hidden = cfg.mlp_ratio * d
    for i in range(cfg.depth):
        p.update(_init_block(f"blocks.{i}", d, hidden, rng, std))
    p["final_ln.g"] = Tensor(np.ones(d), requires_grad=True)
    p["final_ln.b"] = Tensor(np.zeros(d), requires_grad=True)
    if random_classifier:
        p["classifier"] = Tensor(trunc_normal(rng, (d, cfg.num_classes), std), requires_grad=True)
    else:
        p["classifier"] = Tensor(np.zeros((d, cfg.num_classes)), requires_grad=True)
    return p


def _init_block(prefix, d, hidden, rng, std):
    blk = {}
    blk[f"{prefix}.ln1.g"] = Tensor(np.ones(d), requires_grad=True)
    blk[f"{prefix}.ln1.b"] = Tensor(np.zeros(d), requires_grad=True)
    for name in ("wq", "wk", "wv", "wo"):
        blk[f"{prefix}.attn.{name}"] = Tensor(trunc_normal(rng, (d, d), std), requires_grad=True)
    for name in ("bq", "bk", "bv", "bo"):
        blk[f"{prefix}.attn.{name}"] = Tensor(np.zeros(d), requires_grad=True)
    blk[f"{prefix}.ln2.g"] = Tensor(np.ones(d), requires_grad=True)
    blk[f"{prefix}.ln2.b"] = Tensor(np.zeros(d), requires_grad=True)
    blk[f"{prefix}.mlp.w1"] = Tensor(trunc_normal(rng, (d, hidden), std), requires_grad=True)
    blk[f"{prefix}.mlp.b1"] = Tensor(np.zeros(hidden), requires_grad=True)
    blk[f"{prefix}.mlp.w2"] = Tensor(trunc_normal(rng, (hidden, d), std), requires_grad=True)
    blk[f"{prefix}.mlp.b2"] = Tensor(np.zeros(d), requires_grad=True)
    return blk


def param_count(cfg: ModelConfig) -> int:
    d = cfg.embed_dim
    hidden = cfg.mlp_ratio * d
    n = cfg.patch_dim * d + d  # patch projection + class token
    if cfg.use_pe:
        n += (cfg.num_patches + 1) * d
    per_block = 2 * d + 4 * (d * d + d) + 2 * d + (d * hidden + hidden) + (hidden * d + d)
    n += cfg.depth * per_block
    n += 2 * d  # final layernorm
    n += d * cfg.num_classes
    return n


# ---------------------------------------------------------------------------
# forward ops


def patchify(image, m: int) -> Tensor:
    """Split an H x W x C image into raster-ordered flattened m x m patches."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim != 3:
        raise ShapeError(f"patchify expects H x W x C, got {image.shape}")
    h, w, c = image.shape
    if h % m or w % m:
        raise ShapeError(f"image extents {h}x{w} not divisible by patch size {m}")
    gr, gc = h // m, w // m
    x = reshape(image, (gr, m, gc, m, c))
    x = transpose_axes(x, (0, 2, 1, 3, 4))
    return reshape(x, (gr * gc, m * m * c))


def unpatchify(patches: np.ndarray, m: int, h: int, w: int, c: int) -> np.ndarray:
    """Inverse of patchify on a raw array."""
    gr, gc = h // m, w // m
    x = patches.reshape(gr, gc, m, m, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(h, w, c)


def embed(patches: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> PatchSequence:
    """Project patches to tokens, prepend the class token, add PE if enabled."""
    if patches.shape[1] != cfg.patch_dim:
        raise ShapeError(f"patch rows of extent {patches.shape[1]} do not match {cfg.patch_dim}")
    proj = matmul(patches, params["patch_embed"])
    cls_row = reshape(params["class_token"], (1, cfg.embed_dim))
    tokens = concat(cls_row, proj, axis=0)
    if cfg.use_pe:
        if "pe" not in params:
            raise KeyError("use_pe is set but params carry no 'pe' tensor")
        tokens = add(tokens, params["pe"])
    n = patches.shape[0]
    return PatchSequence(
        tokens=tokens,
        abs_labels=np.arange(n, dtype=np.int64),
        grid=(cfg.grid_rows, cfg.grid_cols),
    )


def _attention(x, params, prefix, heads, collect_attn=None):
    n, d = x.shape
    hd = d // heads
    q = add(matmul(x, params[f"{prefix}.wq"]), params[f"{prefix}.bq"])
    k = add(matmul(x, params[f"{prefix}.wk"]), params[f"{prefix}.bk"])
    v = add(matmul(x, params[f"{prefix}.wv"]), params[f"{prefix}.bv"])
    outs = []
    for h in range(heads):
        qh = slice_axis(q, 1, h * hd, (h + 1) * hd)
        kh = slice_axis(k, 1, h * hd, (h + 1) * hd)
        vh = slice_axis(v, 1, h * hd, (h + 1) * hd)
        scores = scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(hd))
        weights = softmax(scores, axis=-1)
        if collect_attn is not None:
            collect_attn.append(weights)
        outs.append(matmul(weights, vh))
    merged = outs[0]
    for part in outs[1:]:
        merged = concat(merged, part, axis=1)
    return add(matmul(merged, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _mlp(x, params, prefix):
    h = gelu(add(matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return add(matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def transformer_stack(
    tokens: Tensor,
    params: dict[str, Tensor],
    depth: int,
    heads: int,
    prefix: str = "",
    collect_attn=None,
) -> Tensor:
    """Pre-norm blocks: attention and MLP sublayers with residuals, final norm."""
    x = tokens
    for i in range(depth):
        blk = f"{prefix}blocks.{i}"
        normed = layernorm(x, params[f"{blk}.ln1.g"], params[f"{blk}.ln1.b"])
        x = add(x, _attention(normed, params, f"{blk}.attn", heads, collect_attn))
        normed = layernorm(x, params[f"{blk}.ln2.g"], params[f"{blk}.ln2.b"])
        x = add(x, _mlp(normed, params, f"{blk}.mlp"))
    return layernorm(x, params[f"{prefix}final_ln.g"], params[f"{prefix}final_ln.b"])


def encoder_forward(
    tokens: Tensor, params: dict[str, Tensor], cfg: ModelConfig, collect_attn=None
) -> Tensor:
    if tokens.shape[1] != cfg.embed_dim:
        raise ShapeError(f"token width {tokens.shape[1]} does not match embed dim {cfg.embed_dim}")
    return transformer_stack(tokens, params, cfg.depth, cfg.heads, collect_attn=collect_attn)


def classify(z_class: Tensor, classifier: Tensor) -> Tensor:
    """Linear logits over classes from the encoded class token."""
    return matmul(z_class, classifier)


def classification_loss(Z: Tensor, params: dict[str, Tensor], label: int) -> tuple[Tensor, Tensor]:
    """Cross-entropy of the class-token logits; returns (loss, logits row)."""
    zc = slice_axis(Z, 0, 0, 1)
    logits = matmul(zc, params["classifier"])
    return cross_entropy(logits, [int(label)]), logits


def image_forward(
    image, params: dict[str, Tensor], cfg: ModelConfig, collect_attn=None
) -> tuple[Tensor, PatchSequence]:
    """Patchify, embed and encode one image. Returns (Z, patch sequence)."""
    patches = patchify(image, cfg.patch_size)
    seq = embed(patches, params, cfg)
    z = encoder_forward(seq.tokens, params, cfg, collect_attn=collect_attn)
    return z, seq
