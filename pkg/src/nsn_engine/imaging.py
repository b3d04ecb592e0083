# src/nsn_engine/imaging.py
"""
Raster helpers. A raster is a numpy uint8 array, (H, W) for gray or (H, W, 3) for RGB,
row-major. Masks are (H, W) bool arrays.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from nsn_engine.errors import ImageSizeError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def check_raster(image: np.ndarray) -> None:
    if image.ndim not in (2, 3) or (image.ndim == 3 and image.shape[2] != 3):
        raise ImageSizeError(f"raster must be (H, W) or (H, W, 3), got shape {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ImageSizeError(f"raster must be at least 1x1, got {image.shape[1]}x{image.shape[0]}")


def _round_to_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """luma = 0.299 R + 0.587 G + 0.114 B, rounded half-up."""
    check_raster(image)
    if image.ndim == 2:
        return image.astype(np.uint8, copy=True)
    rgb = image.astype(np.float64)
    r, g, b = LUMA_WEIGHTS
    luma = r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]
    # weights sum to 1 up to float error; keep the result inside the channel range
    luma = np.clip(luma, rgb.min(axis=2), rgb.max(axis=2))
    return _round_to_u8(luma)


def _sample_positions(n_out: int, n_in: int) -> np.ndarray:
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))


def resize_bilinear(image: np.ndarray, size: tuple[int, int], mask_mode: bool = False) -> np.ndarray:
    """
    Align-corners bilinear resize with edge clamping. size is (width, height).
    mask_mode re-binarizes the interpolated values at 0.5 and returns a bool mask.
    """
    out_w, out_h = int(size[0]), int(size[1])
    if out_w < 1 or out_h < 1:
        raise ImageSizeError(f"target dims must be >= 1x1, got {out_w}x{out_h}")
    check_raster(image)
    in_h, in_w = image.shape[:2]

    src = image.astype(np.float64)
    ys = _sample_positions(out_h, in_h)
    xs = _sample_positions(out_w, in_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    if src.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]

    top = src[y0][:, x0] * (1.0 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1.0 - fx) + src[y1][:, x1] * fx
    out = top * (1.0 - fy) + bottom * fy

    if mask_mode:
        return out >= 0.5
    return _round_to_u8(out)


def tight_box(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Minimal (x0, y0, x1, y1) half-open rectangle holding every mask pixel."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def read_image_size(path: str | Path) -> tuple[int, int]:
    """(width, height); fully decodes so truncated files fail here."""
    with Image.open(path) as im:
        im.load()
        return im.size


def write_image(path: str | Path, image: np.ndarray) -> Path:
    check_raster(image)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(p, format="PNG")
    return p


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_mask(path: str | Path, mask: np.ndarray) -> Path:
    return write_image(path, np.where(mask, 255, 0).astype(np.uint8))
