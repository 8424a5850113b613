"""Dataset ingestion: IDX binary files and a synthetic position-learnable set."""

from __future__ import annotations

import struct

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


def read_idx(path: str) -> np.ndarray:
    """Parse one IDX file (big-endian header, ubyte payload)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: header truncated ({len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if raw[0] != 0 or raw[1] != 0:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}")
    dtype_code, ndim = raw[2], raw[3]
    if dtype_code != 0x08:
        raise IdxFormatError(f"{path}: unsupported type code 0x{dtype_code:02x}, expected ubyte")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxFormatError(f"{path}: header truncated ({len(raw)} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = header_len + int(np.prod(dims))
    if len(raw) != expected:
        raise IdxFormatError(
            f"{path}: payload size mismatch, expected {expected} bytes, got {len(raw)}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)


def load_idx_dataset(images_path: str, labels_path: str) -> tuple[np.ndarray, np.ndarray]:
    """Images scaled to [0, 1] with a trailing channel axis, integer labels."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    img_magic = (0x08 << 8) | images.ndim
    if images.ndim != 3:
        raise IdxFormatError(
            f"{images_path}: expected 3 dimensions (magic 0x{IDX_IMAGE_MAGIC:08x}), "
            f"got {images.ndim}"
        )
    if labels.ndim != 1:
        raise IdxFormatError(
            f"{labels_path}: expected 1 dimension (magic 0x{IDX_LABEL_MAGIC:08x}), "
            f"got {labels.ndim}"
        )
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    scaled = images.astype(np.float64)[..., None] / 255.0
    return scaled, labels.astype(np.int64)


# synthetic generator coefficients; the smooth ramp plus the fixed spatial
# texture make a patch's absolute position recoverable from its pixels alone
_ROW_GAIN = 0.45 / 31.0
_COL_GAIN = 0.30 / 31.0
_POS_AMP = 0.15
_CLASS_AMP = 0.12
_NOISE_STD = 0.02


def make_synthetic(
    count: int,
    seed: int,
    height: int = 32,
    width: int = 32,
    num_classes: int = 10,
) -> tuple[np.ndarray, np.ndarray]:
    """Grayscale gradient images with class-dependent texture.

    pixel(r, c) = a r + b c + fixed positional texture + class texture + noise.
    Labels cycle 0..num_classes-1 so counts stay balanced within one.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    r = np.arange(height)[:, None]
    c = np.arange(width)[None, :]
    ramp = _ROW_GAIN * r + _COL_GAIN * c
    pos_texture = _POS_AMP * np.sin(2 * np.pi * 3 * r / height) * np.cos(
        2 * np.pi * 5 * c / width
    )
    labels = np.arange(count, dtype=np.int64) % num_classes
    images = np.empty((count, height, width, 1), dtype=np.float64)
    for i, k in enumerate(labels):
        freq = 6 + int(k)
        phase = 2 * np.pi * int(k) / num_classes
        class_texture = _CLASS_AMP * np.sin(2 * np.pi * freq * (r + c) / height + phase)
        noise = rng.normal(0.0, _NOISE_STD, size=(height, width))
        images[i, :, :, 0] = ramp + pos_texture + class_texture + noise
    return images, labels
