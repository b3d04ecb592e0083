import numpy as np
import pytest
from scipy import ndimage

from nsn_engine.errors import ImageSizeError
from nsn_engine.saliency import fallback_mask, saliency_mask


def make_disc_crop(size=64, fg=30, bg=200, radius_frac=0.3):
    yy, xx = np.mgrid[:size, :size]
    c = (size - 1) / 2.0
    disc = (yy - c) ** 2 + (xx - c) ** 2 <= (radius_frac * size) ** 2
    gray = np.where(disc, fg, bg).astype(np.uint8)
    return np.stack([gray] * 3, axis=-1), disc


def test_dark_disc_is_recovered():
    crop, disc = make_disc_crop()
    result = saliency_mask(crop)
    assert not result.degraded
    assert (result.mask & disc).sum() >= 0.9 * disc.sum()
    assert (result.mask & ~disc).sum() <= 0.05 * (~disc).sum()


def test_bright_disc_is_recovered():
    crop, disc = make_disc_crop(fg=220, bg=40)
    result = saliency_mask(crop)
    assert (result.mask & disc).sum() >= 0.9 * disc.sum()


def test_mask_is_single_four_connected_component():
    crop, _ = make_disc_crop(size=48)
    mask = saliency_mask(crop).mask
    _, n = ndimage.label(mask, structure=ndimage.generate_binary_structure(2, 1))
    assert n == 1


def test_uniform_crop_degrades_to_central_rectangle():
    result = saliency_mask(np.full((20, 30, 3), 128, dtype=np.uint8))
    assert result.degraded
    assert np.array_equal(result.mask, fallback_mask(20, 30))
    assert result.mask[10, 15] and not result.mask[0, 0]


def test_tiny_crop_rejected():
    with pytest.raises(ImageSizeError):
        saliency_mask(np.zeros((7, 20, 3), dtype=np.uint8))


def test_deterministic():
    crop, _ = make_disc_crop(size=40)
    rng = np.random.default_rng(3)
    noisy = np.clip(crop.astype(int) + rng.integers(-10, 11, size=crop.shape), 0, 255).astype(np.uint8)
    assert np.array_equal(saliency_mask(noisy).mask, saliency_mask(noisy).mask)
