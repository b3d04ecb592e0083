# src/nsn_engine/synth.py
"""
Synthetic two-domain fixtures and a controllable stub detector.

Targets are rendered as hard-edged binary shapes so every label is the exact tight box of
the rendered pixels. Domain shift comes from differing SceneSpecs (background style, target
size range, contrast). All randomness is drawn from per-image streams keyed by the image's
relative path, so output is a pure function of (spec, seed) and independent of --jobs.

Stub detector corruption, per ground-truth box, always in this draw order:
    u_drop, u_conf, dx, dy
    drop if u_drop < drop_rate
    confidence by law:  constant:v | uniform:a:b | quality:q  (0.5 + 0.45 q + 0.1 u_conf, capped at 1)
then Poisson(fp_rate) false positives with confidence in [0.3, 0.5).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import ndimage

from nsn_engine.annotations import (
    BBox,
    DatasetManifest,
    LabeledBox,
    ManifestEntry,
    PixelRect,
    load_entry_labels,
    mirrored,
    pseudo,
    save_labels,
)
from nsn_engine.augment import image_stream
from nsn_engine.errors import ConfigurationError
from nsn_engine.imaging import read_image_size, tight_box, write_image, write_mask
from nsn_engine.parallel import ordered_map

logger = logging.getLogger(__name__)

BACKGROUNDS = ("uniform", "gradient", "checker", "noise")
SHAPES = ("disc", "rounded-rect", "cross")
POLARITIES = ("bright", "dark", "mixed")
PLACEMENT_TRIES = 50
FP_CONFIDENCE = (0.3, 0.5)


# =========================
# Scene specification
# =========================

def _pair(value: Any, name: str) -> tuple[float, float]:
    lo, hi = (value, value) if isinstance(value, (int, float)) else tuple(value)
    if lo > hi:
        raise ConfigurationError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
    return lo, hi


@dataclass(frozen=True)
class SceneSpec:
    width: int = 128
    height: int = 128
    background: str = "uniform"
    background_level: tuple[float, float] = (60.0, 120.0)
    background_amplitude: float = 30.0
    checker_cell: int = 8
    targets: tuple[int, int] = (1, 3)
    shapes: tuple[str, ...] = ("disc",)
    size_range: tuple[int, int] = (12, 24)   # px, disc diameter / rect width / cross span
    contrast_range: tuple[float, float] = (60.0, 100.0)
    polarity: str = "bright"
    pixel_noise: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width < 8 or self.height < 8:
            raise ConfigurationError("scene dims must be at least 8x8")
        if self.background not in BACKGROUNDS:
            raise ConfigurationError(f"background must be one of {BACKGROUNDS}")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise ConfigurationError(f"shapes must be a non-empty subset of {SHAPES}")
        if self.polarity not in POLARITIES:
            raise ConfigurationError(f"polarity must be one of {POLARITIES}")
        lo, hi = self.size_range
        if lo < 1 or lo > hi:
            raise ConfigurationError("size_range must be positive with min <= max")
        if hi + 2 > min(self.width, self.height):
            raise ConfigurationError("largest target plus a 1 px margin must fit inside the image")
        if self.targets[0] < 0 or self.targets[0] > self.targets[1]:
            raise ConfigurationError("targets must be a (min, max) count with 0 <= min <= max")
        if self.checker_cell < 1:
            raise ConfigurationError("checker_cell must be >= 1")
        if self.pixel_noise < 0 or self.background_amplitude < 0:
            raise ConfigurationError("noise and amplitude must be >= 0")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SceneSpec":
        d = dict(data)
        try:
            for key in ("background_level", "contrast_range"):
                if key in d:
                    d[key] = _pair(d[key], key)
            for key in ("targets", "size_range"):
                if key in d:
                    lo, hi = _pair(d[key], key)
                    d[key] = (int(lo), int(hi))
            if "shapes" in d:
                d["shapes"] = (d["shapes"],) if isinstance(d["shapes"], str) else tuple(d["shapes"])
            return cls(**d)
        except TypeError as e:
            raise ConfigurationError(f"scene spec has an unknown or malformed field: {e}") from None

    @classmethod
    def load(cls, path: str | Path) -> "SceneSpec":
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"scene spec not found: {p}")
        return cls.from_dict(json.loads(p.read_text(encoding="utf-8")))

    def to_dict(self) -> dict[str, Any]:
        return json.loads(json.dumps(asdict(self)))


# Checkered ground with large targets vs textured ground with small, dimmer targets.
SOURCE_SCENE = SceneSpec(background="checker", targets=(1, 3), shapes=("disc", "rounded-rect", "cross"),
                         size_range=(18, 36), contrast_range=(70.0, 110.0))
TARGET_SCENE = SceneSpec(background="noise", targets=(1, 3), shapes=("disc", "rounded-rect"),
                         size_range=(10, 28), contrast_range=(40.0, 90.0), polarity="mixed", seed=1)


# =========================
# Rendering
# =========================

def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    level = float(rng.uniform(*spec.background_level))
    amp = spec.background_amplitude
    if spec.background == "uniform":
        return np.full((h, w), level)
    if spec.background == "gradient":
        theta = float(rng.uniform(0.0, 2.0 * np.pi))
        yy, xx = np.mgrid[0:h, 0:w]
        t = (np.cos(theta) * (xx / max(w - 1, 1) - 0.5) + np.sin(theta) * (yy / max(h - 1, 1) - 0.5))
        return level + 2.0 * amp * t
    if spec.background == "checker":
        yy, xx = np.mgrid[0:h, 0:w]
        cell = spec.checker_cell
        phase = ((yy // cell) + (xx // cell)) % 2
        return level + np.where(phase == 0, -amp / 2.0, amp / 2.0)
    noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=1.5)
    scale = float(noise.std()) or 1.0
    return level + amp * noise / scale


def shape_mask(shape: str, width: int, height: int) -> np.ndarray:
    """Binary shape filling a width x height box exactly (tight box == full box)."""
    yy, xx = np.mgrid[0:height, 0:width]
    px = xx + 0.5 - width / 2.0
    py = yy + 0.5 - height / 2.0
    if shape == "disc":
        rx, ry = width / 2.0, height / 2.0
        mask = (px / rx) ** 2 + (py / ry) ** 2 <= 1.0
    elif shape == "rounded-rect":
        r = 0.25 * min(width, height)
        qx = np.maximum(np.abs(px) - (width / 2.0 - r), 0.0)
        qy = np.maximum(np.abs(py) - (height / 2.0 - r), 0.0)
        mask = qx ** 2 + qy ** 2 <= r ** 2
    elif shape == "cross":
        tw = max(1, width // 3)
        th = max(1, height // 3)
        x0 = (width - tw) // 2
        y0 = (height - th) // 2
        mask = np.zeros((height, width), dtype=bool)
        mask[:, x0:x0 + tw] = True
        mask[y0:y0 + th, :] = True
    else:
        raise ConfigurationError(f"unknown shape {shape!r}")
    return mask


def _free(rect: PixelRect, taken: Sequence[PixelRect]) -> bool:
    for t in taken:
        if rect.x0 <= t.x1 and t.x0 <= rect.x1 and rect.y0 <= t.y1 and t.y0 <= rect.y1:
            return False
    return True


def render_scene(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, list[PixelRect]]:
    """One RGB uint8 image and the tight pixel rectangle of every rendered target."""
    canvas = _background(spec, rng)
    n = int(rng.integers(spec.targets[0], spec.targets[1] + 1))
    rects: list[PixelRect] = []
    for _ in range(n):
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        size = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
        if shape == "disc":
            w = h = size
        else:
            w = size
            h = max(spec.size_range[0], int(round(size * float(rng.uniform(0.6, 1.0)))))
        contrast = float(rng.uniform(*spec.contrast_range))
        sign = {"bright": 1.0, "dark": -1.0}.get(spec.polarity, 1.0 if rng.random() < 0.5 else -1.0)

        placed = None
        for _ in range(PLACEMENT_TRIES):
            x0 = int(rng.integers(1, spec.width - w))
            y0 = int(rng.integers(1, spec.height - h))
            rect = PixelRect(x0, y0, x0 + w, y0 + h)
            if _free(rect, rects):
                placed = rect
                break
        if placed is None:
            logger.debug("no free spot for a %dx%d %s; target dropped", w, h, shape)
            continue

        mask = shape_mask(shape, w, h)
        tb = tight_box(mask)
        if tb is None:
            continue
        region = canvas[placed.y0:placed.y1, placed.x0:placed.x1]
        local_bg = float(region.mean())
        region[mask] = local_bg + sign * contrast
        rects.append(PixelRect(placed.x0 + tb[0], placed.y0 + tb[1], placed.x0 + tb[2], placed.y0 + tb[3]))

    if spec.pixel_noise > 0:
        canvas = canvas + rng.normal(0.0, spec.pixel_noise, canvas.shape)
    gray = np.clip(np.floor(canvas + 0.5), 0, 255).astype(np.uint8)
    return np.repeat(gray[:, :, None], 3, axis=2), rects


def generate_domain(
    spec: SceneSpec,
    count: int,
    out: str | Path,
    *,
    domain: str = "source",
    split: str = "train",
    jobs: int = 1,
) -> DatasetManifest:
    """Render `count` images with exact label files under out/images, out/labels, out/manifest.json."""
    if count < 0:
        raise ConfigurationError("count must be >= 0")
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)

    def work(i: int) -> ManifestEntry:
        image_rel = f"images/{i:06d}.png"
        label_rel = f"labels/{i:06d}.txt"
        image, rects = render_scene(spec, image_stream(spec.seed, image_rel))
        write_image(root / image_rel, image)
        save_labels([LabeledBox(BBox.from_pixels(r, spec.width, spec.height)) for r in rects], root / label_rel)
        return ManifestEntry(image_rel, label_rel)

    entries = ordered_map(work, range(count), jobs)
    manifest = DatasetManifest(root=root, entries=tuple(entries), split=split, domain=domain)
    manifest.save(root / "manifest.json", relative_root=True)
    logger.info("generated %d %s images under %s", count, domain, root)
    return manifest


def generate_crops(
    count: int,
    out: str | Path,
    *,
    size: int = 64,
    diameter: tuple[int, int] = (28, 40),
    seed: int = 0,
    write_masks: bool = False,
) -> DatasetManifest:
    """
    Disc-on-ground crops for the crop library. Each label holds the disc's tight box;
    with write_masks the exact disc mask goes to masks/<stem>.mask.png.
    """
    if diameter[1] + 2 > size:
        raise ConfigurationError("crop diameter plus margin must fit inside the crop")
    root = Path(out)
    entries = []
    for i in range(count):
        image_rel = f"crops/{i:06d}.png"
        rng = image_stream(seed, image_rel)
        spec = SceneSpec(width=size, height=size, background="gradient" if i % 2 else "uniform",
                         targets=(1, 1), shapes=("disc",), size_range=diameter, seed=seed)
        image, rects = render_scene(spec, rng)
        label_rel = f"labels/{i:06d}.txt"
        write_image(root / image_rel, image)
        save_labels([LabeledBox(BBox.from_pixels(r, size, size)) for r in rects], root / label_rel)
        if write_masks and rects:
            r = rects[0]
            mask = np.zeros((size, size), dtype=bool)
            mask[r.y0:r.y1, r.x0:r.x1] = shape_mask("disc", r.width, r.height)
            write_mask(root / "masks" / f"{i:06d}.mask.png", mask)
        entries.append(ManifestEntry(image_rel, label_rel))
    manifest = DatasetManifest(root=root, entries=tuple(entries), split="train", domain="source")
    manifest.save(root / "crops.json", relative_root=True)
    return manifest


# =========================
# Stub detector
# =========================

_LAW_ARITY = {"constant": 1, "uniform": 2, "quality": 1}


def _parse_law(spec: str) -> tuple[str, tuple[float, ...]]:
    name, _, rest = spec.partition(":")
    try:
        params = tuple(float(v) for v in rest.split(":")) if rest else ()
    except ValueError:
        raise ConfigurationError(f"bad confidence law {spec!r}") from None
    if _LAW_ARITY.get(name) != len(params):
        raise ConfigurationError(f"confidence law must be constant:v, uniform:a:b or quality:q, got {spec!r}")
    if any(not (0.0 <= p <= 1.0) for p in params):
        raise ConfigurationError("confidence law parameters must lie in [0, 1]")
    return name, params


@dataclass(frozen=True)
class Corruption:
    confidence: str = "constant:1.0"
    drop_rate: float = 0.0
    jitter_px: int = 0
    fp_rate: float = 0.0

    def __post_init__(self) -> None:
        _parse_law(self.confidence)
        if not (0.0 <= self.drop_rate <= 1.0):
            raise ConfigurationError("drop_rate must lie in [0, 1]")
        if self.jitter_px < 0 or self.fp_rate < 0:
            raise ConfigurationError("jitter_px and fp_rate must be >= 0")

    @classmethod
    def for_quality(cls, quality: float, fp_rate: float = 0.0) -> "Corruption":
        """Detector of the given quality: keeps a GT box with probability 0.5 + 0.5 q."""
        q = min(1.0, max(0.0, quality))
        return cls(confidence=f"quality:{q}", drop_rate=0.5 - 0.5 * q, fp_rate=fp_rate * (1.0 - q))

    def score(self, u: float) -> float:
        name, params = _parse_law(self.confidence)
        if name == "constant":
            return params[0]
        if name == "uniform":
            return params[0] + (params[1] - params[0]) * u
        return min(1.0, 0.5 + 0.45 * params[0] + 0.1 * u)

    def to_dict(self) -> dict[str, Any]:
        return {"confidence": self.confidence, "drop_rate": self.drop_rate,
                "jitter_px": self.jitter_px, "fp_rate": self.fp_rate}


def _shift(box: BBox, dx: int, dy: int, width: int, height: int) -> BBox:
    r = box.to_pixels(width, height)
    dx = min(max(dx, -r.x0), width - r.x1)
    dy = min(max(dy, -r.y0), height - r.y1)
    return BBox.from_pixels(PixelRect(r.x0 + dx, r.y0 + dy, r.x1 + dx, r.y1 + dy), width, height)


def corrupt_boxes(
    gt: Sequence[LabeledBox],
    corruption: Corruption,
    rng: np.random.Generator,
    image_dims: tuple[int, int],
) -> list[LabeledBox]:
    width, height = image_dims
    j = corruption.jitter_px
    out: list[LabeledBox] = []
    for lb in gt:
        u_drop, u_conf = rng.random(2)
        dx, dy = (int(v) for v in rng.integers(-j, j + 1, size=2))
        if u_drop < corruption.drop_rate:
            continue
        box = lb.bbox if dx == 0 and dy == 0 else _shift(lb.bbox, dx, dy, width, height)
        out.append(pseudo(box, corruption.score(float(u_conf))))

    side_hi = max(9, min(width, height) // 4)
    for _ in range(int(rng.poisson(corruption.fp_rate))):
        side = int(rng.integers(8, side_hi))
        x0 = int(rng.integers(0, max(1, width - side)))
        y0 = int(rng.integers(0, max(1, height - side)))
        rect = PixelRect(x0, y0, x0 + side, y0 + side).clip(width, height)
        out.append(pseudo(BBox.from_pixels(rect, width, height), float(rng.uniform(*FP_CONFIDENCE))))
    return out


def stub_detect(
    gt_manifest: DatasetManifest,
    corruption: Corruption,
    seed: int,
    out: str | Path,
    *,
    jobs: int = 1,
) -> Path:
    """Prediction files at out/<image path>.txt: ground truth perturbed per `corruption`."""
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)

    def work(entry: ManifestEntry) -> int:
        gt = load_entry_labels(gt_manifest, entry)
        dims = read_image_size(gt_manifest.image_path(entry))
        preds = corrupt_boxes(gt, corruption, image_stream(seed, entry.image), dims)
        save_labels(preds, root / mirrored(entry.image, ".txt"))
        return len(preds)

    total = sum(ordered_map(work, gt_manifest.entries, jobs))
    logger.info("stub detector wrote %d predictions for %d images", total, len(gt_manifest))
    return root
