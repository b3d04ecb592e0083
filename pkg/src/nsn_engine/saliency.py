# src/nsn_engine/saliency.py
"""
Classical saliency masks for crop assets.

Steps (frozen):
  1. spectral residual of the grayscale crop, Gaussian smoothed (sigma 2.5 px), scaled to [0, 1]
  2. Otsu on the saliency map -> largest 4-connected component, holes filled:
     the located object region
  3. Otsu on gray intensities; the object class is the one less present on the crop border
     (higher mean saliency inside the located region breaks a tie)
  4. object-class pixels connected to the located region -> largest 4-connected component
  5. closing with a 3x3 square, largest 4-connected component again
  6. coverage must lie in [1%, 99%], otherwise the central 80% x 80% rectangle is returned
     with the degraded flag set
"""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from nsn_engine.errors import ImageSizeError
from nsn_engine.imaging import to_grayscale

logger = logging.getLogger(__name__)

MIN_CROP_SIDE = 8
SMOOTH_SIGMA = 2.5
MIN_COVERAGE = 0.01
MAX_COVERAGE = 0.99
FALLBACK_FRACTION = 0.8

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
_SQUARE_3 = np.ones((3, 3), dtype=bool)


class SaliencyMask(NamedTuple):
    mask: np.ndarray
    degraded: bool


def spectral_residual(gray: np.ndarray) -> np.ndarray:
    spectrum = np.fft.fft2(gray.astype(np.float64))
    log_amp = np.log(np.abs(spectrum) + 1e-12)
    phase = np.angle(spectrum)
    residual = log_amp - ndimage.uniform_filter(log_amp, size=3, mode="nearest")
    sal = np.abs(np.fft.ifft2(np.exp(residual + 1j * phase))) ** 2
    sal = ndimage.gaussian_filter(sal, sigma=SMOOTH_SIGMA, mode="nearest")
    lo, hi = float(sal.min()), float(sal.max())
    if hi - lo <= 1e-12 * max(1.0, hi):
        return np.zeros_like(sal)
    return (sal - lo) / (hi - lo)


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=_FOUR_CONNECTED)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    # ties resolve to the lowest label, i.e. the first in raster order
    return labels == (int(np.argmax(sizes)) + 1)


def close_square(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 2, constant_values=False)
    closed = ndimage.binary_closing(padded, structure=_SQUARE_3)
    return closed[2:-2, 2:-2]


def fallback_mask(height: int, width: int) -> np.ndarray:
    margin = (1.0 - FALLBACK_FRACTION) / 2.0
    y0 = int(np.floor(margin * height + 0.5))
    x0 = int(np.floor(margin * width + 0.5))
    y1 = int(np.floor((1.0 - margin) * height + 0.5))
    x1 = int(np.floor((1.0 - margin) * width + 0.5))
    mask = np.zeros((height, width), dtype=bool)
    mask[y0:max(y1, y0 + 1), x0:max(x1, x0 + 1)] = True
    return mask


def _border(a: np.ndarray) -> np.ndarray:
    return np.concatenate([a[0, :], a[-1, :], a[1:-1, 0], a[1:-1, -1]])


def _object_class(gray: np.ndarray, sal: np.ndarray, region: np.ndarray) -> np.ndarray:
    t = threshold_otsu(gray)
    dark = gray <= t
    bright = ~dark
    dark_on_border = float(_border(dark).mean())
    if dark_on_border < 0.5:
        return dark
    if dark_on_border > 0.5:
        return bright
    dark_sal = sal[region & dark].mean() if (region & dark).any() else 0.0
    bright_sal = sal[region & bright].mean() if (region & bright).any() else 0.0
    return dark if dark_sal >= bright_sal else bright


def saliency_mask(crop: np.ndarray) -> SaliencyMask:
    h, w = crop.shape[:2]
    if h < MIN_CROP_SIDE or w < MIN_CROP_SIDE:
        raise ImageSizeError(f"crop must be at least {MIN_CROP_SIDE}x{MIN_CROP_SIDE}, got {w}x{h}")

    gray = to_grayscale(crop) if crop.ndim == 3 else crop
    if gray.max() == gray.min():
        return SaliencyMask(fallback_mask(h, w), True)

    sal = spectral_residual(gray)
    if sal.max() <= 0.0:
        return SaliencyMask(fallback_mask(h, w), True)

    region = largest_component(sal > threshold_otsu(sal))
    region = ndimage.binary_fill_holes(region)

    obj = _object_class(gray, sal, region)
    labels, n = ndimage.label(obj, structure=_FOUR_CONNECTED)
    touching = np.unique(labels[region & obj])
    touching = touching[touching > 0]
    mask = largest_component(np.isin(labels, touching)) if n and touching.size else np.zeros_like(obj)

    mask = largest_component(close_square(mask))

    coverage = float(mask.mean())
    if not (MIN_COVERAGE <= coverage <= MAX_COVERAGE):
        logger.debug("saliency coverage %.4f outside bounds, using fallback mask", coverage)
        return SaliencyMask(fallback_mask(h, w), True)
    return SaliencyMask(mask, False)
