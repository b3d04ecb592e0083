# src/nsn_engine/augment.py
"""
Masked copy-paste augmentation.

Per target image with pseudo labels:
  1. draw one pseudo label as the size reference
  2. draw J crops uniformly with replacement
  3. fit each crop (its tight mask box) to the reference pixel dims
  4. draw a placement keeping a 1 px border margin, IoU <= overlap limit against present boxes,
     up to max_retries draws, else skip the paste
  5. Poisson-blend with the fitted mask; each paste adds a pasted-true label

Random streams are keyed by image path, so output does not depend on manifest order or
worker scheduling.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from nsn_engine.annotations import (
    BBox,
    DatasetManifest,
    LabeledBox,
    LabelKind,
    ManifestEntry,
    PixelRect,
    iou,
    load_entry_labels,
    mirrored,
    round_half_up,
    save_labels,
)
from nsn_engine.config import (
    CROP_SOURCE_MIN_WIDTH,
    DEFAULT_OVERLAP_IOU,
    DEFAULT_PASTES,
    DEFAULT_RETRIES,
    DEFAULT_SEED,
)
from nsn_engine.errors import AugmentationError, ConfigurationError, PoissonConvergenceError
from nsn_engine.imaging import read_image, read_mask, resize_bilinear, tight_box, write_image
from nsn_engine.parallel import ordered_map
from nsn_engine.poisson import PoissonSolveParams, hard_paste, interior_of, poisson_blend
from nsn_engine.saliency import saliency_mask

logger = logging.getLogger(__name__)

BLEND_MODES = ("poisson", "hard")
CROP_MARGIN = 0.25
RECORDS_NAME = "augment.mca.jsonl"
_U64 = (1 << 64) - 1


# =========================
# Types
# =========================

@dataclass(frozen=True, eq=False)
class CropAsset:
    id: str
    image: np.ndarray
    mask: np.ndarray
    box: tuple[int, int, int, int]   # tight mask box, (x0, y0, x1, y1) crop pixels
    degraded: bool = False


@dataclass(frozen=True)
class AugmentConfig:
    pastes: int = DEFAULT_PASTES
    seed: int = DEFAULT_SEED
    max_retries: int = DEFAULT_RETRIES
    overlap_iou: float = DEFAULT_OVERLAP_IOU
    allow_overlap: bool = False
    allow_degraded: bool = False
    blend: str = "poisson"
    size_fallback: bool = False
    poisson: PoissonSolveParams = field(default_factory=PoissonSolveParams)

    def __post_init__(self) -> None:
        if self.pastes < 1:
            raise ConfigurationError("pastes (J) must be >= 1")
        if self.max_retries < 1:
            raise ConfigurationError("max_retries must be >= 1")
        if not (0.0 <= self.overlap_iou <= 1.0):
            raise ConfigurationError("overlap_iou must lie in [0, 1]")
        if self.blend not in BLEND_MODES:
            raise ConfigurationError(f"blend must be one of {BLEND_MODES}")


@dataclass
class LibraryReport:
    kept: list[str] = field(default_factory=list)
    degraded: list[str] = field(default_factory=list)
    excluded: list[dict[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kept": len(self.kept),
            "degraded": len(self.degraded),
            "excluded": len(self.excluded),
            "kept_ids": list(self.kept),
            "degraded_ids": list(self.degraded),
            "excluded_entries": list(self.excluded),
        }


@dataclass
class AugmentOutcome:
    image: np.ndarray
    labels: list[LabeledBox]
    record: dict[str, Any]

    @property
    def added(self) -> list[LabeledBox]:
        return [b for b in self.labels if b.kind is LabelKind.PASTED_TRUE]


@dataclass
class AugmentResult:
    manifest: DatasetManifest
    records: list[dict[str, Any]]
    errors: list[dict[str, str]]

    def summary(self) -> dict[str, Any]:
        augmented = [r for r in self.records if not r.get("passthrough")]
        return {
            "images": len(self.records),
            "augmented": len(augmented),
            "passed_through": len(self.records) - len(augmented),
            "pasted": sum(len(r["pastes"]) for r in self.records),
            "skipped": sum(len(r["skips"]) for r in self.records),
            "blend_fallbacks": sum(1 for r in self.records for p in r["pastes"] if p["blend"] == "hard-fallback"),
            "errors": len(self.errors),
        }


# =========================
# Random streams
# =========================

def stream_seed(seed: int, key: str) -> int:
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return (int(seed) ^ int.from_bytes(digest[:8], "big")) & _U64


def image_stream(seed: int, key: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_seed(seed, key)))


# =========================
# Crop library
# =========================

def _precrop(image: np.ndarray, labels: Sequence[LabeledBox], margin: float) -> tuple[np.ndarray, PixelRect | None]:
    if not labels:
        return image, None
    h, w = image.shape[:2]
    r = labels[0].bbox.to_pixels(w, h)
    mx = round_half_up(margin * r.width)
    my = round_half_up(margin * r.height)
    rect = PixelRect(r.x0 - mx, r.y0 - my, r.x1 + mx, r.y1 + my).clip(w, h)
    return image[rect.y0:rect.y1, rect.x0:rect.x1], rect


def _load_asset(
    manifest: DatasetManifest,
    entry: ManifestEntry,
    external_masks: Path | None,
    margin: float,
) -> CropAsset:
    image = read_image(manifest.image_path(entry))
    crop, rect = _precrop(image, load_entry_labels(manifest, entry), margin)
    asset_id = Path(entry.image).stem

    mask_file = external_masks / f"{asset_id}.mask.png" if external_masks is not None else None
    if mask_file is not None and mask_file.exists():
        mask = read_mask(mask_file)
        if rect is not None and mask.shape == image.shape[:2]:
            mask = mask[rect.y0:rect.y1, rect.x0:rect.x1]
        if mask.shape != crop.shape[:2]:
            raise ValueError(f"external mask {mask_file.name} is {mask.shape[::-1]}, crop is {crop.shape[1::-1]}")
        degraded = False
    else:
        mask, degraded = saliency_mask(crop)

    box = tight_box(mask)
    if box is None:
        raise ValueError("mask is empty")
    return CropAsset(id=asset_id, image=crop, mask=mask, box=box, degraded=degraded)


def build_crop_library(
    crop_manifest: DatasetManifest,
    external_masks: str | Path | None = None,
    *,
    allow_degraded: bool = False,
    margin: float = CROP_MARGIN,
    jobs: int = 1,
) -> tuple[list[CropAsset], LibraryReport]:
    masks_dir = Path(external_masks) if external_masks is not None else None

    def work(entry: ManifestEntry) -> tuple[str, CropAsset | None, str | None]:
        try:
            return entry.image, _load_asset(crop_manifest, entry, masks_dir, margin), None
        except Exception as e:  # noqa: BLE001 - per-crop failures go to the report
            return entry.image, None, f"{type(e).__name__}: {e}"

    assets: list[CropAsset] = []
    report = LibraryReport()
    for image, asset, err in ordered_map(work, crop_manifest.entries, jobs):
        if asset is None:
            report.excluded.append({"path": image, "error": err or "unknown"})
            continue
        if asset.degraded:
            report.degraded.append(asset.id)
            if not allow_degraded:
                logger.warning("crop %s has a degraded saliency mask; excluded", asset.id)
                report.excluded.append({"path": image, "error": "degraded mask"})
                continue
        assets.append(asset)
        report.kept.append(asset.id)

    if not assets:
        raise ConfigurationError("crop library is empty; augmentation is impossible")
    return assets, report


def crop_library_from_dataset(
    manifest: DatasetManifest,
    out_dir: str | Path,
    *,
    min_width: int = CROP_SOURCE_MIN_WIDTH,
    margin: float = CROP_MARGIN,
) -> DatasetManifest:
    """Cut every ground-truth box at least min_width px wide (plus margin) into a crop manifest."""
    out = Path(out_dir)
    entries: list[ManifestEntry] = []
    for entry in manifest.entries:
        labels = load_entry_labels(manifest, entry)
        if not labels:
            continue
        image = read_image(manifest.image_path(entry))
        h, w = image.shape[:2]
        for i, lb in enumerate(labels):
            if lb.bbox.to_pixels(w, h).width < min_width:
                continue
            crop, _ = _precrop(image, [lb], margin)
            rel = f"crops/{Path(entry.image).stem}_{i}.png"
            write_image(out / rel, crop)
            entries.append(ManifestEntry(rel, None))
    crops = DatasetManifest(root=out, entries=tuple(entries), split="train", domain="source")
    crops.save(out / "crops.json", relative_root=True)
    return crops


# =========================
# Per-image augmentation
# =========================

def _fit(asset: CropAsset, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    x0, y0, x1, y1 = asset.box
    img = resize_bilinear(asset.image[y0:y1, x0:x1], (width, height))
    mask = resize_bilinear(asset.mask[y0:y1, x0:x1], (width, height), mask_mode=True)
    return img, mask


def augment_image(
    image: np.ndarray,
    pseudo_labels: Sequence[LabeledBox],
    library: Sequence[CropAsset],
    config: AugmentConfig,
    rng: np.random.Generator,
    reference_sizes: Sequence[tuple[float, float]] | None = None,
) -> AugmentOutcome:
    """
    Paste up to J crops onto one image. reference_sizes (normalized w, h) is only used
    when pseudo_labels is empty and fallback sizing is wanted.
    """
    if not library:
        raise ConfigurationError("crop library is empty")
    H, W = image.shape[:2]

    if pseudo_labels:
        ref_index = int(rng.integers(len(pseudo_labels)))
        ref = pseudo_labels[ref_index].bbox.to_pixels(W, H)
        tw, th = ref.width, ref.height
    elif reference_sizes:
        ref_index = -1
        rw, rh = reference_sizes[int(rng.integers(len(reference_sizes)))]
        tw, th = max(1, round_half_up(rw * W)), max(1, round_half_up(rh * H))
    else:
        raise ValueError("augment_image needs at least one pseudo label or a reference size")

    picks = rng.integers(len(library), size=config.pastes)
    out = image.copy()
    present: list[BBox] = [b.bbox for b in pseudo_labels]
    added: list[LabeledBox] = []
    pastes: list[dict[str, Any]] = []
    skips: list[dict[str, Any]] = []

    for k in picks:
        asset = library[int(k)]
        patch, pmask = _fit(asset, tw, th)
        tb = tight_box(pmask)
        if tb is None or abs((tb[2] - tb[0]) - tw) > 1 or abs((tb[3] - tb[1]) - th) > 1:
            skips.append({"crop_id": asset.id, "reason": "size"})
            continue
        if config.blend == "poisson" and not interior_of(pmask).any():
            skips.append({"crop_id": asset.id, "reason": "no-interior"})
            continue

        row_hi, col_hi = H - th, W - tw   # exclusive bounds keep a 1 px border margin
        placed: tuple[int, int, BBox] | None = None
        attempts = 0
        if row_hi > 1 and col_hi > 1:
            for attempts in range(1, config.max_retries + 1):
                r = int(rng.integers(1, row_hi))
                c = int(rng.integers(1, col_hi))
                rect = PixelRect(c + tb[0], r + tb[1], c + tb[2], r + tb[3])
                cand = BBox.from_pixels(rect, W, H)
                if config.allow_overlap or all(iou(cand, b) <= config.overlap_iou for b in present):
                    placed = (r, c, cand)
                    break
        if placed is None:
            skips.append({"crop_id": asset.id, "reason": "no-placement", "attempts": attempts})
            continue

        r, c, cand = placed
        blend = config.blend
        if blend == "poisson":
            try:
                out = poisson_blend(out, patch, pmask, (r, c), config.poisson)
            except PoissonConvergenceError as e:
                logger.warning("poisson blend of %s did not converge (%.2e); hard paste used", asset.id, e.residual)
                out = hard_paste(out, patch, pmask, (r, c))
                blend = "hard-fallback"
        else:
            out = hard_paste(out, patch, pmask, (r, c))

        present.append(cand)
        added.append(LabeledBox(cand, LabelKind.PASTED_TRUE))
        pastes.append({
            "crop_id": asset.id,
            "bbox": [cand.cx, cand.cy, cand.w, cand.h],
            "pixels": [c + tb[0], r + tb[1], c + tb[2], r + tb[3]],
            "blend": blend,
            "attempts": attempts,
        })

    record = {
        "reference_index": ref_index,
        "reference_pixels": [tw, th],
        "pastes": pastes,
        "skips": skips,
        "stream_state": int(rng.bit_generator.state["state"]["state"]),
    }
    return AugmentOutcome(out, list(pseudo_labels) + added, record)


# =========================
# Dataset augmentation
# =========================

def augment_dataset(
    target: DatasetManifest,
    library: Sequence[CropAsset],
    config: AugmentConfig,
    out_dir: str | Path,
    *,
    pseudo_labels: Mapping[str, Sequence[LabeledBox]] | None = None,
    reference_sizes: Sequence[tuple[float, float]] | None = None,
    jobs: int = 1,
) -> AugmentResult:
    """
    Augment every image with pseudo labels, pass the rest through unchanged.
    pseudo_labels maps manifest image path -> boxes; defaults to the manifest's label files.
    With size_fallback, images without labels are still augmented at sizes drawn from
    reference_sizes (normalized w, h), or from the pseudo labels themselves when not given.
    Writes images/, labels/ (+ provenance sidecars), manifest.json and augment.mca.jsonl.
    """
    if not library:
        raise ConfigurationError("crop library is empty; augmentation is impossible")
    out = Path(out_dir)

    def labels_for(entry: ManifestEntry) -> list[LabeledBox]:
        if pseudo_labels is not None:
            return list(pseudo_labels.get(entry.image, []))
        return load_entry_labels(target, entry, kind_default=LabelKind.PSEUDO)

    sizes: list[tuple[float, float]] | None = None
    if config.size_fallback and reference_sizes is not None:
        sizes = sorted((float(w), float(h)) for w, h in reference_sizes)
    elif config.size_fallback:
        sizes = sorted(
            (b.bbox.w, b.bbox.h) for e in target.entries for b in labels_for(e) if b.kind is LabelKind.PSEUDO
        )

    def work(entry: ManifestEntry) -> tuple[dict[str, Any] | None, str | None]:
        img_rel = mirrored(entry.image, ".png")
        lab_rel = mirrored(entry.image, ".txt")
        try:
            image = read_image(target.image_path(entry))
            labels = labels_for(entry)
            rng = image_stream(config.seed, entry.image)
            if labels or sizes:
                outcome = augment_image(image, labels, library, config, rng, reference_sizes=sizes)
                record = outcome.record
                write_image(out / "images" / img_rel, outcome.image)
                save_labels(outcome.labels, out / "labels" / lab_rel)
            else:
                record = {"reference_index": None, "reference_pixels": None, "pastes": [], "skips": [],
                          "passthrough": True}
                write_image(out / "images" / img_rel, image)
                save_labels([], out / "labels" / lab_rel)
        except Exception as e:  # noqa: BLE001 - per-image failures go to the report
            return None, f"{type(e).__name__}: {e}"
        record = {
            "source_image": entry.image,
            "output_image": str(Path("images") / img_rel),
            "output_labels": str(Path("labels") / lab_rel),
            "stream_seed": stream_seed(config.seed, entry.image),
            **record,
        }
        return record, None

    records: list[dict[str, Any]] = []
    errors: list[dict[str, str]] = []
    for entry, (record, err) in zip(target.entries, ordered_map(work, target.entries, jobs)):
        if record is None:
            logger.warning("augmentation failed for %s: %s", entry.image, err)
            errors.append({"path": entry.image, "error": err or "unknown"})
        else:
            records.append(record)

    if target.entries and not records:
        raise AugmentationError(f"augmentation failed for every image ({len(errors)} errors)")

    manifest = DatasetManifest(
        root=out,
        entries=tuple(ManifestEntry(r["output_image"], r["output_labels"]) for r in records),
        split=target.split,
        domain="target-augmented",
    )
    manifest.save(out / "manifest.json", relative_root=True)
    with open(out / RECORDS_NAME, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    return AugmentResult(manifest=manifest, records=records, errors=errors)
