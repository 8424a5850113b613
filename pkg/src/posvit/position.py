"""Position prediction heads and losses.

Two self-supervised targets are defined over the encoded patches: the
absolute raster index of each patch (a classification over N positions)
and the relative 2D offset between pairs of patches, folded to a single
class index the way windowed-attention bias tables do it. Both heads are
a small MLP followed by a linear classifier and are discarded after
training; only the losses they induce matter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    add,
    concat,
    cross_entropy,
    gelu,
    matmul,
    mul,
    reshape,
    slice_axis,
    take,
)
from .encoder import ModelConfig, trunc_normal, INIT_STD


@dataclass(frozen=True)
class RelativeIndexTable:
    """Bijection from 2D offsets to classes: (dr, dc) -> (dr+R-1)(2C-1)+(dc+C-1)."""

    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid extents must be positive")

    @property
    def num_classes(self) -> int:
        return (2 * self.rows - 1) * (2 * self.cols - 1)


def relative_index(dr: int, dc: int, table: RelativeIndexTable) -> int:
    if not (-(table.rows - 1) <= dr <= table.rows - 1):
        raise ValueError(f"row offset {dr} out of range for {table.rows} rows")
    if not (-(table.cols - 1) <= dc <= table.cols - 1):
        raise ValueError(f"col offset {dc} out of range for {table.cols} cols")
    return (dr + table.rows - 1) * (2 * table.cols - 1) + (dc + table.cols - 1)


def absolute_targets(grid: tuple[int, int]) -> np.ndarray:
    """Raster-order position labels 0..N-1 for an R x C patch grid."""
    rows, cols = grid
    return np.arange(rows * cols, dtype=np.int64)


@dataclass
class PositionHead:
    """Two-layer MLP (D -> D -> d) with GELU, then a linear position classifier."""

    mode: str  # "absolute" or "relative"
    num_classes: int
    params: dict[str, Tensor]


def init_position_head(
    cfg: ModelConfig,
    mode: str,
    rng: np.random.Generator,
    std: float = INIT_STD,
    random_classifier: bool = False,
) -> PositionHead:
    """Head for one of the two position tasks.

    The classifier starts at zero so the initial position loss is exactly
    log of the class count.
    """
    if mode == "absolute":
        c_pos = cfg.num_patches
    elif mode == "relative":
        c_pos = RelativeIndexTable(cfg.grid_rows, cfg.grid_cols).num_classes
    else:
        raise ValueError(f"unknown position head mode {mode!r}")
    d = cfg.embed_dim
    params = {
        "w1": Tensor(trunc_normal(rng, (d, d), std), requires_grad=True),
        "b1": Tensor(np.zeros(d), requires_grad=True),
        "w2": Tensor(trunc_normal(rng, (d, cfg.pos_dim), std), requires_grad=True),
        "b2": Tensor(np.zeros(cfg.pos_dim), requires_grad=True),
    }
    if random_classifier:
        params["classifier"] = Tensor(
            trunc_normal(rng, (cfg.pos_dim, c_pos), std), requires_grad=True
        )
    else:
        params["classifier"] = Tensor(np.zeros((cfg.pos_dim, c_pos)), requires_grad=True)
    return PositionHead(mode=mode, num_classes=c_pos, params=params)


def _head_logits(features: Tensor, head: PositionHead) -> Tensor:
    p = head.params
    h = gelu(add(matmul(features, p["w1"]), p["b1"]))
    feats = add(matmul(h, p["w2"]), p["b2"])
    return matmul(feats, p["classifier"])


def absolute_position_logits(Z: Tensor, head: PositionHead) -> Tensor:
    """Per-patch logits over absolute positions; the class token is excluded."""
    if head.mode != "absolute":
        raise ValueError(f"head mode is {head.mode!r}, expected 'absolute'")
    patches = slice_axis(Z, 0, 1, Z.shape[0])
    return _head_logits(patches, head)


def absolute_position_loss(Z: Tensor, head: PositionHead, targets=None) -> Tensor:
    """Mean cross-entropy of each encoded patch against its raster index.

    ``targets`` overrides the default 0..N-1 labels; masked pretraining uses
    this to score visible patches against their original positions.
    """
    logits = absolute_position_logits(Z, head)
    if targets is None:
        targets = np.arange(Z.shape[0] - 1, dtype=np.int64)
    return cross_entropy(logits, targets)


def pair_features(Z: Tensor, i: int, j: int) -> Tensor:
    """Concatenation of the first half of z_i with the first half of z_j."""
    n = Z.shape[0] - 1
    if not (1 <= i <= n and 1 <= j <= n):
        raise IndexError(f"pair indices ({i}, {j}) outside 1..{n}")
    half = Z.shape[1] // 2
    zi = slice_axis(slice_axis(Z, 0, i, i + 1), 1, 0, half)
    zj = slice_axis(slice_axis(Z, 0, j, j + 1), 1, 0, half)
    return reshape(concat(zi, zj, axis=1), (2 * half,))


def _pair_index_arrays(n: int, pair_budget, rng) -> tuple[np.ndarray, np.ndarray]:
    if pair_budget is None:
        i_idx = np.repeat(np.arange(n, dtype=np.intp), n)
        j_idx = np.tile(np.arange(n, dtype=np.intp), n)
    else:
        if rng is None:
            raise ValueError("pair_budget requires an rng")
        i_idx = rng.integers(0, n, size=int(pair_budget)).astype(np.intp)
        j_idx = rng.integers(0, n, size=int(pair_budget)).astype(np.intp)
    return i_idx, j_idx


def relative_pair_targets(i_idx, j_idx, table: RelativeIndexTable) -> np.ndarray:
    """Class index of the offset from patch i to patch j (0-based raster indices)."""
    ri, ci = np.divmod(np.asarray(i_idx), table.cols)
    rj, cj = np.divmod(np.asarray(j_idx), table.cols)
    return ((rj - ri) + table.rows - 1) * (2 * table.cols - 1) + ((cj - ci) + table.cols - 1)


def relative_position_logits(
    Z: Tensor, head: PositionHead, table: RelativeIndexTable, i_idx, j_idx
) -> Tensor:
    if head.mode != "relative":
        raise ValueError(f"head mode is {head.mode!r}, expected 'relative'")
    if head.num_classes != table.num_classes:
        raise ValueError(
            f"head classes {head.num_classes} do not match table {table.num_classes}"
        )
    n = Z.shape[0] - 1
    half = Z.shape[1] // 2
    halves = slice_axis(slice_axis(Z, 0, 1, n + 1), 1, 0, half)
    zi = take(halves, i_idx)
    zj = take(halves, j_idx)
    return _head_logits(concat(zi, zj, axis=1), head)


def relative_position_loss(
    Z: Tensor,
    head: PositionHead,
    table: RelativeIndexTable,
    pair_budget: int | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean cross-entropy over ordered patch pairs, self-pairs included.

    All n^2 pairs by default; ``pair_budget`` switches to a uniform random
    subsample for large grids.
    """
    n = Z.shape[0] - 1
    if n != table.rows * table.cols:
        raise ValueError(f"Z carries {n} patches but table describes {table.rows * table.cols}")
    i_idx, j_idx = _pair_index_arrays(n, pair_budget, rng)
    logits = relative_position_logits(Z, head, table, i_idx, j_idx)
    targets = relative_pair_targets(i_idx, j_idx, table)
    return cross_entropy(logits, targets)


def joint_loss(ls: Tensor, lp: Tensor, lam: float) -> Tensor:
    """Classification loss plus lam times the position loss."""
    if lam < 0:
        raise ValueError("loss weight must be nonnegative")
    return add(ls, mul(Tensor(float(lam)), lp))
