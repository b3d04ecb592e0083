# src/nsn_engine/difficulty.py
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd

from nsn_engine.annotations import (
    BBox,
    DatasetManifest,
    LabeledBox,
    PixelRect,
    load_entry_labels,
    round_half_up,
)
from nsn_engine.config import DEFAULT_BG_FACTOR, DEFAULT_TAU_BC, DEFAULT_TAU_LC, DEFAULT_TAU_TS
from nsn_engine.errors import ConfigurationError, DegenerateBoxError
from nsn_engine.imaging import read_image, resize_bilinear, to_grayscale
from nsn_engine.parallel import ordered_map

logger = logging.getLogger(__name__)


# =========================
# Types
# =========================

class DifficultyCategory(str, Enum):
    SMALL_TARGET = "st"
    LOW_CONTRAST = "lc"
    COMPLEX_BACKGROUND = "cb"
    SIMPLE_EXAMPLE = "se"


@dataclass(frozen=True)
class DifficultyThresholds:
    tau_ts: float = DEFAULT_TAU_TS    # squared pixels
    tau_lc: float = DEFAULT_TAU_LC    # intensity
    tau_bc: float = DEFAULT_TAU_BC    # intensity
    factor: float = DEFAULT_BG_FACTOR

    def __post_init__(self) -> None:
        if min(self.tau_ts, self.tau_lc, self.tau_bc) <= 0:
            raise ConfigurationError("difficulty thresholds must be > 0")
        if not self.factor > 1.0:
            raise ConfigurationError("background factor must be > 1")


@dataclass(frozen=True)
class BackgroundRegion:
    outer: PixelRect
    inner: PixelRect
    n_b: int


@dataclass(frozen=True)
class DifficultyMetrics:
    m_ts: float
    m_lc: float
    m_bc: float
    mean_target: float
    mean_background: float

    def to_dict(self) -> dict[str, float]:
        return {"m_ts": self.m_ts, "m_lc": self.m_lc, "m_bc": self.m_bc}


# =========================
# Per-box computation
# =========================

def background_region(box: BBox, image_dims: tuple[int, int], factor: float = DEFAULT_BG_FACTOR) -> BackgroundRegion:
    """
    Outer rectangle of (factor*h_t, factor*w_t) centered on the target, clipped to the image.
    N_b = |outer ∩ image| - |inner ∩ image|, from clipped pixel counts.
    """
    width, height = image_dims
    inner = box.to_pixels(width, height)

    ow = round_half_up(factor * inner.width)
    oh = round_half_up(factor * inner.height)
    cx = (inner.x0 + inner.x1) / 2.0
    cy = (inner.y0 + inner.y1) / 2.0
    x0 = min(round_half_up(cx - ow / 2.0), inner.x0)
    y0 = min(round_half_up(cy - oh / 2.0), inner.y0)
    outer = PixelRect(x0, y0, max(x0 + ow, inner.x1), max(y0 + oh, inner.y1)).clip(width, height)

    return BackgroundRegion(outer=outer, inner=inner, n_b=outer.area - inner.area)


def compute_metrics(
    gray: np.ndarray,
    box: BBox,
    thresholds: DifficultyThresholds | None = None,
) -> DifficultyMetrics:
    """
    m_ts = h_t * w_t
    m_lc = sqrt( (1/N_b) * sum_b (I_b - mean_t)^2 )
    m_bc = sqrt( (1/N_b) * sum_b (I_b - mean_b)^2 )
    N_b = 0 gives m_lc = m_bc = 0.
    """
    th = thresholds or DifficultyThresholds()
    height, width = gray.shape[:2]
    region = background_region(box, (width, height), th.factor)
    inner, outer = region.inner, region.outer
    if inner.area == 0:
        raise DegenerateBoxError(f"box {box} has zero pixel area on a {width}x{height} image")

    img = gray.astype(np.float64)
    target = img[inner.y0:inner.y1, inner.x0:inner.x1]
    mean_t = float(target.mean())

    if region.n_b == 0:
        return DifficultyMetrics(float(inner.area), 0.0, 0.0, mean_t, mean_t)

    window = img[outer.y0:outer.y1, outer.x0:outer.x1]
    ring = np.ones(window.shape, dtype=bool)
    ring[inner.y0 - outer.y0:inner.y1 - outer.y0, inner.x0 - outer.x0:inner.x1 - outer.x0] = False
    bg = window[ring]

    mean_b = float(bg.mean())
    m_lc = math.sqrt(float(np.mean((bg - mean_t) ** 2)))
    m_bc = math.sqrt(float(np.mean((bg - mean_b) ** 2)))
    return DifficultyMetrics(float(inner.area), m_lc, m_bc, mean_t, mean_b)


def classify(metrics: DifficultyMetrics, thresholds: DifficultyThresholds | None = None) -> DifficultyCategory:
    th = thresholds or DifficultyThresholds()
    if metrics.m_ts <= th.tau_ts:
        return DifficultyCategory.SMALL_TARGET
    if metrics.m_lc <= th.tau_lc:
        return DifficultyCategory.LOW_CONTRAST
    if metrics.m_bc <= th.tau_bc:
        return DifficultyCategory.SIMPLE_EXAMPLE
    return DifficultyCategory.COMPLEX_BACKGROUND


# =========================
# Dataset partition
# =========================

@dataclass(frozen=True)
class BoxDifficulty:
    box_index: int
    metrics: DifficultyMetrics
    category: DifficultyCategory

    def to_dict(self) -> dict[str, Any]:
        return {"box_index": self.box_index, **self.metrics.to_dict(), "category": self.category.value}


@dataclass
class PartitionReport:
    per_image: dict[str, list[BoxDifficulty]] = field(default_factory=dict)
    errors: list[dict[str, str]] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        counts = {c.value: 0 for c in DifficultyCategory}
        for items in self.per_image.values():
            for it in items:
                counts[it.category.value] += 1
        return counts

    def category_of(self, image: str, box_index: int) -> DifficultyCategory:
        for it in self.per_image[image]:
            if it.box_index == box_index:
                return it.category
        raise KeyError((image, box_index))

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"image": img, **it.to_dict()}
            for img, items in self.per_image.items()
            for it in items
        ]
        return pd.DataFrame(rows, columns=["image", "box_index", "m_ts", "m_lc", "m_bc", "category"])

    def to_dict(self) -> dict[str, Any]:
        return {
            "images": {img: [it.to_dict() for it in items] for img, items in self.per_image.items()},
            "summary": {"counts": self.counts, "boxes": sum(self.counts.values())},
            "errors": list(self.errors),
        }


def _gray_for(manifest: DatasetManifest, image: str, pre_resize: int | None) -> np.ndarray:
    gray = to_grayscale(read_image(manifest.root / image))
    if pre_resize:
        gray = resize_bilinear(gray, (pre_resize, pre_resize))
    return gray


def partition_dataset(
    manifest: DatasetManifest,
    boxes: Mapping[str, Sequence[LabeledBox]] | None = None,
    thresholds: DifficultyThresholds | None = None,
    *,
    pre_resize: int | None = None,
    jobs: int = 1,
) -> PartitionReport:
    """
    Assign every box one category. boxes maps manifest image path -> boxes; when omitted,
    the manifest's own label files are used. Output follows manifest order.
    """
    th = thresholds or DifficultyThresholds()

    def work(entry) -> tuple[str, list[BoxDifficulty] | None, str | None]:
        try:
            items = boxes.get(entry.image, []) if boxes is not None else load_entry_labels(manifest, entry)
            if not items:
                return entry.image, [], None
            gray = _gray_for(manifest, entry.image, pre_resize)
            out = []
            for i, lb in enumerate(items):
                m = compute_metrics(gray, lb.bbox, th)
                out.append(BoxDifficulty(i, m, classify(m, th)))
            return entry.image, out, None
        except Exception as e:  # noqa: BLE001 - per-image failures go to the report
            return entry.image, None, f"{type(e).__name__}: {e}"

    report = PartitionReport()
    for image, items, err in ordered_map(work, manifest.entries, jobs):
        if err is not None:
            logger.warning("difficulty partition skipped %s: %s", image, err)
            report.errors.append({"path": image, "error": err})
            continue
        report.per_image[image] = items or []
    return report
