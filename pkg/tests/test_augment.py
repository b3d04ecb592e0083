import json

import numpy as np
import pytest

from nsn_engine.annotations import (
    BBox,
    DatasetManifest,
    LabelKind,
    ManifestEntry,
    iou,
    load_labels,
    pseudo,
)
from nsn_engine.augment import (
    AugmentConfig,
    RECORDS_NAME,
    augment_dataset,
    augment_image,
    build_crop_library,
    crop_library_from_dataset,
    image_stream,
    stream_seed,
)
from nsn_engine.errors import ConfigurationError
from nsn_engine.imaging import read_image, read_mask, resize_bilinear, tight_box, write_image, write_mask
from nsn_engine.synth import generate_crops


def make_library(root, count=5, **kw):
    crops = generate_crops(count, root / "crops", seed=3, **kw)
    assets, report = build_crop_library(crops, root / "crops" / "masks" if kw.get("write_masks") else None)
    return assets, report


def make_target(root, n=4, labelled=2, size=128, box=0.15):
    rng = np.random.default_rng(9)
    entries, labels = [], {}
    for i in range(n):
        write_image(root / "target" / f"{i}.png", rng.integers(60, 140, size=(size, size, 3), dtype=np.uint8))
        entries.append(ManifestEntry(f"{i}.png"))
        if i < labelled:
            labels[f"{i}.png"] = [pseudo(BBox(0.3, 0.3, box, box), 0.9)]
    return DatasetManifest(root / "target", tuple(entries), domain="target"), labels


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# =========================
# Random streams
# =========================

def test_streams_are_keyed_by_path():
    assert stream_seed(0, "a.png") == stream_seed(0, "a.png")
    assert stream_seed(0, "a.png") != stream_seed(0, "b.png")
    assert stream_seed(1, "a.png") != stream_seed(0, "a.png")
    assert image_stream(5, "x").integers(1 << 30) == image_stream(5, "x").integers(1 << 30)


# =========================
# Crop library
# =========================

def test_disc_crops_build_clean_library(tmp_path):
    assets, report = make_library(tmp_path)
    assert len(assets) == 5
    assert report.to_dict()["degraded"] == 0
    assert all(a.mask.any() for a in assets)


def test_uniform_crop_excluded_and_empty_library_fatal(tmp_path):
    write_image(tmp_path / "flat.png", np.full((40, 40, 3), 128, dtype=np.uint8))
    flat = DatasetManifest(tmp_path, (ManifestEntry("flat.png"),))
    with pytest.raises(ConfigurationError):
        build_crop_library(flat)

    assets, report = build_crop_library(flat, allow_degraded=True)
    assert report.degraded == ["flat"]
    assert assets[0].degraded


def test_external_mask_overrides_saliency(tmp_path):
    write_image(tmp_path / "flat.png", np.full((40, 40, 3), 128, dtype=np.uint8))
    square = np.zeros((40, 40), dtype=bool)
    square[10:30, 12:28] = True
    write_mask(tmp_path / "masks" / "flat.mask.png", square)
    flat = DatasetManifest(tmp_path, (ManifestEntry("flat.png"),))

    assets, report = build_crop_library(flat, tmp_path / "masks")
    assert not assets[0].degraded
    assert np.array_equal(assets[0].mask, square)
    assert assets[0].box == (12, 10, 28, 30)


def test_external_masks_are_cut_with_the_crop(tmp_path):
    assets, _ = make_library(tmp_path, count=2, write_masks=True)
    full = read_mask(tmp_path / "crops" / "masks" / "000000.mask.png")
    assert assets[0].mask.sum() == full.sum()


def test_crop_library_from_dataset_respects_min_width(tmp_path):
    source = generate_crops(3, tmp_path / "src", diameter=(28, 40), seed=1)
    crops = crop_library_from_dataset(source, tmp_path / "lib", min_width=20)
    assert len(crops) == 3
    assert json.loads((tmp_path / "lib" / "crops.json").read_text())["root"] == "."
    assert len(crop_library_from_dataset(source, tmp_path / "none", min_width=50)) == 0


# =========================
# Per-image augmentation
# =========================

def test_three_pastes_with_matching_size(tmp_path):
    assets, _ = make_library(tmp_path)
    image = np.random.default_rng(0).integers(60, 140, size=(128, 128, 3), dtype=np.uint8)
    labels = [pseudo(BBox(0.3, 0.3, 20 / 128, 20 / 128), 0.9)]
    out = augment_image(image, labels, assets, AugmentConfig(pastes=3), image_stream(0, "img"))

    assert len(out.added) == 3
    assert out.record["skips"] == []
    for p in out.record["pastes"]:
        x0, y0, x1, y1 = p["pixels"]
        assert abs((x1 - x0) - 20) <= 1 and abs((y1 - y0) - 20) <= 1
        assert 1 <= x0 and x1 <= 127 and 1 <= y0 and y1 <= 127
    boxes = [b.bbox for b in out.labels]
    for i, a in enumerate(boxes):
        for b in boxes[i + 1:]:
            assert iou(a, b) <= 0.3
    assert out.labels[0] == labels[0]


def test_same_stream_gives_identical_paste(tmp_path):
    assets, _ = make_library(tmp_path)
    image = np.random.default_rng(1).integers(0, 256, size=(96, 96, 3), dtype=np.uint8)
    labels = [pseudo(BBox(0.5, 0.5, 0.2, 0.2), 0.8)]
    a = augment_image(image, labels, assets, AugmentConfig(), image_stream(7, "k"))
    b = augment_image(image, labels, assets, AugmentConfig(), image_stream(7, "k"))
    assert np.array_equal(a.image, b.image)
    assert a.labels == b.labels


def test_full_image_label_leaves_no_room(tmp_path):
    assets, _ = make_library(tmp_path)
    image = np.full((64, 64, 3), 100, dtype=np.uint8)
    out = augment_image(image, [pseudo(BBox(0.5, 0.5, 1.0, 1.0), 0.9)], assets, AugmentConfig(), image_stream(0, "k"))
    assert out.added == []
    assert len(out.record["skips"]) == 3
    assert np.array_equal(out.image, image)


def test_hard_blend_mode(tmp_path):
    assets, _ = make_library(tmp_path)
    image = np.zeros((96, 96, 3), dtype=np.uint8)
    out = augment_image(image, [pseudo(BBox(0.5, 0.5, 0.2, 0.2), 0.8)], assets,
                        AugmentConfig(blend="hard"), image_stream(0, "k"))
    assert {p["blend"] for p in out.record["pastes"]} == {"hard"}
    assert out.image.any()


@pytest.mark.parametrize("blend", ["poisson", "hard"])
def test_pixels_outside_pasted_masks_are_untouched(tmp_path, blend):
    assets, _ = make_library(tmp_path)
    by_id = {a.id: a for a in assets}
    image = np.random.default_rng(3).integers(60, 140, size=(128, 128, 3), dtype=np.uint8)
    labels = [pseudo(BBox(0.3, 0.3, 20 / 128, 20 / 128), 0.9)]
    out = augment_image(image, labels, assets, AugmentConfig(blend=blend), image_stream(2, "img"))
    assert out.record["pastes"]

    tw, th = out.record["reference_pixels"]
    touched = np.zeros((128, 128), dtype=bool)
    for p in out.record["pastes"]:
        asset = by_id[p["crop_id"]]
        x0, y0, x1, y1 = asset.box
        mask = resize_bilinear(asset.mask[y0:y1, x0:x1], (tw, th), mask_mode=True)
        tb = tight_box(mask)
        col, row = p["pixels"][0] - tb[0], p["pixels"][1] - tb[1]
        touched[row:row + th, col:col + tw] |= mask
    assert np.array_equal(out.image[~touched], image[~touched])
    assert not np.array_equal(out.image, image)


def test_augment_config_validated():
    with pytest.raises(ConfigurationError):
        AugmentConfig(pastes=0)
    with pytest.raises(ConfigurationError):
        AugmentConfig(blend="alpha")


# =========================
# Dataset augmentation
# =========================

def test_passthrough_counts(tmp_path):
    assets, _ = make_library(tmp_path)
    target, labels = make_target(tmp_path, n=10, labelled=6, size=64, box=0.2)
    result = augment_dataset(target, assets, AugmentConfig(), tmp_path / "aug", pseudo_labels=labels)
    s = result.summary()
    assert (s["augmented"], s["passed_through"], s["errors"]) == (6, 4, 0)
    assert s["pasted"] <= 18

    records = (tmp_path / "aug" / RECORDS_NAME).read_text().splitlines()
    assert len(records) == 10
    untouched = read_image(tmp_path / "aug" / "images" / "9.png")
    assert np.array_equal(untouched, read_image(tmp_path / "target" / "9.png"))
    kinds = {b.kind for b in load_labels(tmp_path / "aug" / "labels" / "0.txt")}
    assert LabelKind.PSEUDO in kinds
    assert result.manifest.domain == "target-augmented"


def test_reruns_are_byte_identical_across_job_counts(tmp_path):
    assets, _ = make_library(tmp_path)
    target, labels = make_target(tmp_path)
    augment_dataset(target, assets, AugmentConfig(seed=4), tmp_path / "a", pseudo_labels=labels, jobs=1)
    augment_dataset(target, assets, AugmentConfig(seed=4), tmp_path / "b", pseudo_labels=labels, jobs=8)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_manifest_order_does_not_change_outputs(tmp_path):
    assets, _ = make_library(tmp_path)
    target, labels = make_target(tmp_path)
    shuffled = DatasetManifest(target.root, tuple(reversed(target.entries)), domain="target")
    augment_dataset(target, assets, AugmentConfig(), tmp_path / "a", pseudo_labels=labels)
    augment_dataset(shuffled, assets, AugmentConfig(), tmp_path / "b", pseudo_labels=labels)
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    for name in a:
        if name.startswith(("images/", "labels/")):
            assert a[name] == b[name]


def test_size_fallback_pastes_when_nothing_was_accepted(tmp_path):
    assets, _ = make_library(tmp_path)
    target, _ = make_target(tmp_path)
    sizes = [(20 / 128, 20 / 128), (16 / 128, 18 / 128)]

    plain = augment_dataset(target, assets, AugmentConfig(), tmp_path / "a", pseudo_labels={}, reference_sizes=sizes)
    assert plain.summary()["passed_through"] == 4

    result = augment_dataset(target, assets, AugmentConfig(size_fallback=True), tmp_path / "b",
                             pseudo_labels={}, reference_sizes=sizes)
    s = result.summary()
    assert (s["augmented"], s["passed_through"]) == (4, 0)
    assert s["pasted"] > 0
    assert all(r["reference_index"] == -1 for r in result.records)
    kinds = {b.kind for e in result.manifest.entries for b in load_labels(result.manifest.label_path(e))}
    assert kinds == {LabelKind.PASTED_TRUE}


def test_empty_library_is_fatal(tmp_path):
    target, labels = make_target(tmp_path)
    with pytest.raises(ConfigurationError):
        augment_dataset(target, [], AugmentConfig(), tmp_path / "aug", pseudo_labels=labels)
