import numpy as np
import pytest

from nsn_engine.errors import ImageSizeError
from nsn_engine.imaging import (
    read_image,
    read_image_size,
    read_mask,
    resize_bilinear,
    tight_box,
    to_grayscale,
    write_image,
    write_mask,
)


def make_rgb(r, g, b, h=2, w=2):
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[..., 0], img[..., 1], img[..., 2] = r, g, b
    return img


def test_grayscale_reference_values():
    assert (to_grayscale(make_rgb(255, 255, 255)) == 255).all()
    assert (to_grayscale(make_rgb(255, 0, 0)) == 76).all()
    assert (to_grayscale(make_rgb(0, 0, 0)) == 0).all()


def test_grayscale_of_equal_channels_is_identity():
    rng = np.random.default_rng(0)
    v = rng.integers(0, 256, size=(8, 8), dtype=np.uint8)
    assert np.array_equal(to_grayscale(np.stack([v, v, v], axis=-1)), v)


def test_grayscale_rejects_bad_shapes():
    with pytest.raises(ImageSizeError):
        to_grayscale(np.zeros((4, 4, 4), dtype=np.uint8))


def test_resize_interpolates_half_up():
    src = np.array([[0, 255]], dtype=np.uint8)
    assert resize_bilinear(src, (3, 1)).tolist() == [[0, 128, 255]]


def test_resize_identity_and_constant():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(13, 17, 3), dtype=np.uint8)
    assert np.array_equal(resize_bilinear(img, (17, 13)), img)

    flat = np.full((9, 5), 77, dtype=np.uint8)
    assert (resize_bilinear(flat, (31, 2)) == 77).all()


def test_resize_mask_mode_returns_binary():
    mask = np.zeros((10, 10), dtype=bool)
    mask[2:8, 2:8] = True
    out = resize_bilinear(mask, (20, 20), mask_mode=True)
    assert out.dtype == bool
    assert out.shape == (20, 20)
    assert out[10, 10] and not out[0, 0]


def test_resize_rejects_empty_target():
    with pytest.raises(ImageSizeError):
        resize_bilinear(np.zeros((4, 4), dtype=np.uint8), (0, 4))


def test_tight_box_is_half_open():
    mask = np.zeros((10, 12), dtype=bool)
    mask[3:6, 4:9] = True
    assert tight_box(mask) == (4, 3, 9, 6)
    assert tight_box(np.zeros((3, 3), dtype=bool)) is None


def test_png_round_trip(tmp_path):
    img = make_rgb(10, 200, 30, h=5, w=7)
    write_image(tmp_path / "a" / "x.png", img)
    assert np.array_equal(read_image(tmp_path / "a" / "x.png"), img)
    assert read_image_size(tmp_path / "a" / "x.png") == (7, 5)

    mask = np.eye(6, dtype=bool)
    write_mask(tmp_path / "m.png", mask)
    assert np.array_equal(read_mask(tmp_path / "m.png"), mask)
