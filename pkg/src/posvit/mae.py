"""Masked-autoencoder pretraining coupled with the absolute position head.

A random subset of patches is hidden, the encoder sees only the visible
ones (no positional encoding during pretraining), a shallow decoder
reconstructs the hidden pixels, and the position head has to recover each
visible patch's original raster index from its encoding alone. Positional
encoding is appended, zero-initialized, when switching to fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    add,
    concat,
    cross_entropy,
    matmul,
    mean_all,
    mul,
    reshape,
    slice_axis,
    sub,
    take,
)
from .encoder import (
    ModelConfig,
    _init_block,
    init_encoder_params,
    patchify,
    transformer_stack,
    trunc_normal,
    INIT_STD,
)
from .position import PositionHead, absolute_position_logits, init_position_head


@dataclass(frozen=True)
class MaskPlan:
    """Deterministic visible/masked split of patch indices."""

    total: int
    ratio: float
    masked: tuple[int, ...]
    visible: tuple[int, ...]
    seed: int


def sample_mask(n: int, ratio: float, seed: int) -> MaskPlan:
    """Uniform random subset of round(ratio * n) masked patches, fixed by seed."""
    if not (0.0 <= ratio < 1.0):
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    k = round(ratio * n)
    rng = np.random.default_rng(seed)
    masked = np.sort(rng.permutation(n)[:k])
    visible = np.setdiff1d(np.arange(n), masked, assume_unique=True)
    return MaskPlan(
        total=n,
        ratio=ratio,
        masked=tuple(int(i) for i in masked),
        visible=tuple(int(i) for i in visible),
        seed=seed,
    )


def init_decoder_params(
    cfg: ModelConfig, rng: np.random.Generator, std: float = INIT_STD
) -> dict[str, Tensor]:
    dd = cfg.dec_dim
    p: dict[str, Tensor] = {}
    p["proj.w"] = Tensor(trunc_normal(rng, (cfg.embed_dim, dd), std), requires_grad=True)
    p["proj.b"] = Tensor(np.zeros(dd), requires_grad=True)
    p["mask_token"] = Tensor(trunc_normal(rng, (dd,), std), requires_grad=True)
    p["pe"] = Tensor(trunc_normal(rng, (cfg.num_patches + 1, dd), std), requires_grad=True)
    for i in range(cfg.decoder_depth):
        p.update(_init_block(f"blocks.{i}", dd, 2 * dd, rng, std))
    p["final_ln.g"] = Tensor(np.ones(dd), requires_grad=True)
    p["final_ln.b"] = Tensor(np.zeros(dd), requires_grad=True)
    p["recon.w"] = Tensor(trunc_normal(rng, (dd, cfg.patch_dim), std), requires_grad=True)
    p["recon.b"] = Tensor(np.zeros(cfg.patch_dim), requires_grad=True)
    return p


def masked_reconstruction_loss(pred: Tensor, target: Tensor, plan: MaskPlan) -> Tensor:
    """Mean squared error over the pixels of masked patches only.

    With nothing masked the loss is defined as zero.
    """
    if not plan.masked:
        return Tensor(0.0)
    idx = np.asarray(plan.masked, dtype=np.intp)
    diff = sub(take(pred, idx), take(target, idx))
    return mean_all(mul(diff, diff))


@dataclass
class MAEOutput:
    recon_loss: Tensor
    pos_loss: Tensor
    total: Tensor
    pos_logits: Tensor
    pos_targets: np.ndarray


def mae_forward(
    image,
    plan: MaskPlan,
    enc_params: dict[str, Tensor],
    dec_params: dict[str, Tensor],
    head: PositionHead,
    cfg: ModelConfig,
    lam: float,
) -> MAEOutput:
    """One pretraining forward pass.

    The encoder runs on the class token plus visible patches without any
    positional encoding. The decoder re-interleaves encoded visibles with a
    shared mask token at the hidden slots, adds its own positional encoding
    and predicts pixels; only masked patches are scored. The position head
    scores each visible encoding against its original raster index.
    """
    if "pe" in enc_params:
        raise ValueError("pretraining encoder must not carry positional encoding")
    if plan.total != cfg.num_patches:
        raise ValueError(f"mask plan covers {plan.total} patches, model has {cfg.num_patches}")
    image = image if isinstance(image, Tensor) else Tensor(image)
    patches = patchify(image, cfg.patch_size)

    visible = np.asarray(plan.visible, dtype=np.intp)
    vis_patches = take(patches, visible)
    proj = matmul(vis_patches, enc_params["patch_embed"])
    cls_row = reshape(enc_params["class_token"], (1, cfg.embed_dim))
    tokens = concat(cls_row, proj, axis=0)
    z = transformer_stack(tokens, enc_params, cfg.depth, cfg.heads)
    z_vis = slice_axis(z, 0, 1, z.shape[0])

    pos_logits = absolute_position_logits(z, head)
    pos_targets = visible.astype(np.int64)
    pos_loss = cross_entropy(pos_logits, pos_targets)

    dec_in = _decoder_sequence(z, z_vis, plan, dec_params, cfg)
    dec_out = transformer_stack(dec_in, dec_params, cfg.decoder_depth, cfg.decoder_heads)
    dec_patches = slice_axis(dec_out, 0, 1, dec_out.shape[0])
    recon = add(matmul(dec_patches, dec_params["recon.w"]), dec_params["recon.b"])
    recon_loss = masked_reconstruction_loss(recon, patches, plan)

    total = add(recon_loss, mul(Tensor(float(lam)), pos_loss))
    return MAEOutput(
        recon_loss=recon_loss,
        pos_loss=pos_loss,
        total=total,
        pos_logits=pos_logits,
        pos_targets=pos_targets,
    )


def _decoder_sequence(z, z_vis, plan: MaskPlan, dec_params, cfg: ModelConfig) -> Tensor:
    n = plan.total
    dd = cfg.dec_dim
    proj_vis = add(matmul(z_vis, dec_params["proj.w"]), dec_params["proj.b"])
    z_cls = slice_axis(z, 0, 0, 1)
    proj_cls = add(matmul(z_cls, dec_params["proj.w"]), dec_params["proj.b"])
    if plan.masked:
        mask_rows = take(
            reshape(dec_params["mask_token"], (1, dd)),
            np.zeros(len(plan.masked), dtype=np.intp),
        )
        pool = concat(proj_vis, mask_rows, axis=0)
    else:
        pool = proj_vis
    # map each raster slot to its row in [visible..., masked...]
    slot_of = np.empty(n, dtype=np.intp)
    slot_of[list(plan.visible)] = np.arange(len(plan.visible))
    if plan.masked:
        slot_of[list(plan.masked)] = len(plan.visible) + np.arange(len(plan.masked))
    interleaved = take(pool, slot_of)
    seq = concat(proj_cls, interleaved, axis=0)
    return add(seq, dec_params["pe"])


def finetune_init(enc_params: dict[str, Tensor], cfg: ModelConfig) -> dict[str, Tensor]:
    """Append a zero positional encoding so the first fine-tune forward is
    bit-identical to the pretrained PE-free forward."""
    if "pe" in enc_params:
        raise ValueError("positional encoding already present")
    out: dict[str, Tensor] = {}
    for name, p in enc_params.items():
        out[name] = p
        if name == "class_token":
            out["pe"] = Tensor(
                np.zeros((cfg.num_patches + 1, cfg.embed_dim)), requires_grad=True
            )
    return out


def init_pretrain_bundle(cfg: ModelConfig, rng: np.random.Generator, std: float = INIT_STD):
    """Encoder without PE, shallow decoder and an absolute position head."""
    if cfg.use_pe:
        raise ValueError("pretraining config must set use_pe=False")
    enc = init_encoder_params(cfg, rng, std)
    dec = init_decoder_params(cfg, rng, std)
    head = init_position_head(cfg, "absolute", rng, std)
    return enc, dec, head
