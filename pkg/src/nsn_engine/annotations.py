# src/nsn_engine/annotations.py
"""
Canonical boxes, label files and dataset manifests.

Label file (one box per line, newline terminated):
    category cx cy w h            ground truth / pasted-true
    category cx cy w h conf       prediction (pseudo label)
All values normalized to the image, printed with 6 decimals.

Provenance sidecar: <label stem>.prov.json, {"<line index>": {"kind": "gt"|"pseudo"|"pasted"}}.
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, NamedTuple, Sequence

from nsn_engine.errors import LabelNotFoundError, LabelParseError, ManifestError
from nsn_engine.imaging import read_image_size
from nsn_engine.parallel import ordered_map
from nsn_engine.schema_versions import LABEL_FORMAT_VERSION, MANIFEST_SCHEMA_VERSION

logger = logging.getLogger(__name__)

MAV_CATEGORY = 0
LABEL_DECIMALS = 6
SPLITS = ("train", "val", "test")
DOMAINS = ("source", "target", "target-augmented")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


class LabelKind(str, Enum):
    GROUND_TRUTH = "gt"
    PSEUDO = "pseudo"
    PASTED_TRUE = "pasted"


class PixelRect(NamedTuple):
    """Half-open pixel rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return max(0, self.x1 - self.x0)

    @property
    def height(self) -> int:
        return max(0, self.y1 - self.y0)

    @property
    def area(self) -> int:
        return self.width * self.height

    def clip(self, width: int, height: int) -> "PixelRect":
        return PixelRect(
            min(max(self.x0, 0), width),
            min(max(self.y0, 0), height),
            min(max(self.x1, 0), width),
            min(max(self.y1, 0), height),
        )

    def contains(self, other: "PixelRect") -> bool:
        return (
            self.x0 <= other.x0 and self.y0 <= other.y0 and other.x1 <= self.x1 and other.y1 <= self.y1
        )


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("box fields must be finite")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center out of range: cx={self.cx}, cy={self.cy}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size out of range: w={self.w}, h={self.h}")

    @property
    def xyxy(self) -> tuple[float, float, float, float]:
        """Normalized corners, clipped to the unit square."""
        return (
            max(0.0, self.cx - self.w / 2.0),
            max(0.0, self.cy - self.h / 2.0),
            min(1.0, self.cx + self.w / 2.0),
            min(1.0, self.cy + self.h / 2.0),
        )

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.xyxy
        return max(0.0, x1 - x0) * max(0.0, y1 - y0)

    def to_pixels(self, width: int, height: int) -> PixelRect:
        pw = max(1, round_half_up(self.w * width))
        ph = max(1, round_half_up(self.h * height))
        x0 = round_half_up(self.cx * width - pw / 2.0)
        y0 = round_half_up(self.cy * height - ph / 2.0)
        return PixelRect(x0, y0, x0 + pw, y0 + ph).clip(width, height)

    @classmethod
    def from_pixels(cls, rect: PixelRect, width: int, height: int) -> "BBox":
        return cls(
            cx=(rect.x0 + rect.x1) / 2.0 / width,
            cy=(rect.y0 + rect.y1) / 2.0 / height,
            w=rect.width / width,
            h=rect.height / height,
        )

    def quantized(self) -> "BBox":
        return BBox(*(round(v, LABEL_DECIMALS) for v in (self.cx, self.cy, self.w, self.h)))


@dataclass(frozen=True)
class LabeledBox:
    bbox: BBox
    kind: LabelKind = LabelKind.GROUND_TRUTH
    confidence: float | None = None
    category: int = MAV_CATEGORY

    def __post_init__(self) -> None:
        if self.category != MAV_CATEGORY:
            raise ValueError(f"category must be {MAV_CATEGORY}, got {self.category}")
        if (self.kind is LabelKind.PSEUDO) != (self.confidence is not None):
            raise ValueError("confidence is required exactly for pseudo labels")
        if self.confidence is not None and not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence out of range: {self.confidence}")

    def as_line(self) -> str:
        b = self.bbox
        fields = [f"{v:.{LABEL_DECIMALS}f}" for v in (b.cx, b.cy, b.w, b.h)]
        if self.confidence is not None:
            fields.append(f"{self.confidence:.{LABEL_DECIMALS}f}")
        return " ".join([str(self.category), *fields])


def pseudo(bbox: BBox, confidence: float) -> LabeledBox:
    return LabeledBox(bbox=bbox, kind=LabelKind.PSEUDO, confidence=confidence)


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.xyxy
    bx0, by0, bx1, by1 = b.xyxy
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


# ---------------------------------------------------------------------------
# Label files
# ---------------------------------------------------------------------------


def mirrored(rel: str, suffix: str) -> Path:
    """Relative output path for a manifest image, with a new suffix."""
    p = Path(rel)
    if p.is_absolute():
        p = Path(*p.parts[1:])
    return p.with_suffix(suffix)


def provenance_path(label_path: str | Path) -> Path:
    p = Path(label_path)
    return p.with_name(p.stem + ".prov.json")


def _parse_line(
    line: str,
    path: Path,
    line_no: int,
    kind_default: LabelKind,
    image_dims: tuple[int, int] | None,
) -> LabeledBox:
    parts = line.split()
    if len(parts) not in (5, 6):
        raise LabelParseError(path, line_no, f"expected 5 or 6 fields, got {len(parts)}")
    try:
        category = int(parts[0])
        values = [float(x) for x in parts[1:]]
    except ValueError:
        raise LabelParseError(path, line_no, "non-numeric field") from None

    try:
        bbox = BBox(*values[:4])
        if len(values) == 5:
            box = LabeledBox(bbox, LabelKind.PSEUDO, values[4], category)
        else:
            kind = LabelKind.GROUND_TRUTH if kind_default is LabelKind.PSEUDO else kind_default
            box = LabeledBox(bbox, kind, None, category)
    except ValueError as e:
        raise LabelParseError(path, line_no, str(e)) from None

    if image_dims is not None and bbox.to_pixels(*image_dims).area == 0:
        raise LabelParseError(path, line_no, "box is empty after clipping to the image")
    return box


def _read_provenance(label_path: Path) -> dict[int, LabelKind]:
    side = provenance_path(label_path)
    if not side.exists():
        return {}
    raw = json.loads(side.read_text(encoding="utf-8"))
    return {int(k): LabelKind(v["kind"]) for k, v in raw.items()}


def load_labels(
    path: str | Path,
    image_dims: tuple[int, int] | None = None,
    kind_default: LabelKind = LabelKind.GROUND_TRUTH,
) -> list[LabeledBox]:
    """
    Parse a label file. 6-field lines are pseudo labels; 5-field lines take
    their kind from the provenance sidecar when present, else kind_default.
    image_dims is (width, height) and enables the non-empty-after-clipping check.
    """
    p = Path(path)
    if not p.exists():
        raise LabelNotFoundError(f"label file not found: {p}")

    prov = _read_provenance(p)
    boxes: list[LabeledBox] = []
    for line_no, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        box = _parse_line(line, p, line_no, kind_default, image_dims)
        recorded = prov.get(len(boxes))
        if recorded is not None and recorded is not LabelKind.PSEUDO and box.kind is not LabelKind.PSEUDO:
            box = LabeledBox(box.bbox, recorded, None, box.category)
        boxes.append(box)
    return boxes


def save_labels(boxes: Sequence[LabeledBox], path: str | Path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text("".join(b.as_line() + "\n" for b in boxes), encoding="utf-8")

    side = provenance_path(p)
    if any(b.kind is LabelKind.PASTED_TRUE for b in boxes):
        prov = {str(i): {"kind": b.kind.value} for i, b in enumerate(boxes)}
        side.write_text(json.dumps(prov, indent=2) + "\n", encoding="utf-8")
    elif side.exists():
        side.unlink()


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    labels: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    entries: tuple[ManifestEntry, ...]
    split: str = "train"
    domain: str = "source"

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ManifestError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.domain not in DOMAINS:
            raise ManifestError(f"domain must be one of {DOMAINS}, got {self.domain!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def image_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.image

    def label_path(self, entry: ManifestEntry) -> Path | None:
        return None if entry.labels is None else self.root / entry.labels

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "label_format": LABEL_FORMAT_VERSION,
            "root": str(self.root),
            "split": self.split,
            "domain": self.domain,
            "entries": [{"image": e.image, "labels": e.labels} for e in self.entries],
        }

    def save(self, path: str | Path, *, relative_root: bool = False) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        data = self.to_dict()
        if relative_root:
            data["root"] = _relpath(self.root, p.parent)
        p.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
        return p

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: Path | None = None) -> "DatasetManifest":
        try:
            root = Path(data["root"])
            raw_entries = data["entries"]
        except (KeyError, TypeError) as e:
            raise ManifestError(f"manifest missing field: {e}") from None
        label_format = data.get("label_format", LABEL_FORMAT_VERSION)
        if label_format != LABEL_FORMAT_VERSION:
            raise ManifestError(f"unsupported label format {label_format!r}, expected {LABEL_FORMAT_VERSION!r}")
        if not root.is_absolute() and base_dir is not None:
            root = base_dir / root
        entries = []
        for i, e in enumerate(raw_entries):
            if not isinstance(e, dict) or "image" not in e:
                raise ManifestError(f"manifest entry {i} must be an object with an 'image' field")
            entries.append(ManifestEntry(str(e["image"]), e.get("labels")))
        return cls(
            root=root,
            entries=tuple(entries),
            split=data.get("split", "train"),
            domain=data.get("domain", "source"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        p = Path(path)
        if not p.exists():
            raise ManifestError(f"manifest not found: {p}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ManifestError(f"manifest {p} is not valid JSON: {e}") from None
        return cls.from_dict(data, base_dir=p.parent.resolve())


def _relpath(target: Path, start: Path) -> str:
    return os.path.relpath(Path(target).resolve(), Path(start).resolve())


def load_entry_labels(
    manifest: DatasetManifest,
    entry: ManifestEntry,
    kind_default: LabelKind = LabelKind.GROUND_TRUTH,
) -> list[LabeledBox]:
    lp = manifest.label_path(entry)
    if lp is None:
        return []
    return load_labels(lp, kind_default=kind_default)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    images: int = 0
    boxes: int = 0
    boxes_per_kind: dict[str, int] = field(default_factory=dict)
    errors: list[dict[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_dict(self) -> dict[str, Any]:
        return {
            "images": self.images,
            "boxes": self.boxes,
            "boxes_per_kind": dict(sorted(self.boxes_per_kind.items())),
            "errors": len(self.errors),
            "error_entries": list(self.errors),
        }


def _check_entry(manifest: DatasetManifest, entry: ManifestEntry) -> tuple[list[LabeledBox], list[dict[str, str]]]:
    errors: list[dict[str, str]] = []
    img = manifest.image_path(entry)
    dims: tuple[int, int] | None = None
    if not img.exists():
        return [], [{"path": str(img), "error": "missing image"}]
    try:
        dims = read_image_size(img)
    except Exception as e:  # noqa: BLE001 - any decoder failure is a report entry
        return [], [{"path": str(img), "error": f"undecodable image: {e}"}]

    lp = manifest.label_path(entry)
    if lp is None:
        return [], errors
    try:
        boxes = load_labels(lp, image_dims=dims)
    except LabelNotFoundError:
        return [], [{"path": str(lp), "error": "missing label file"}]
    except LabelParseError as e:
        return [], [{"path": str(lp), "error": f"malformed labels: {e}"}]
    return boxes, errors


def validate_dataset(manifest: DatasetManifest, jobs: int = 1) -> ValidationReport:
    report = ValidationReport()
    seen: set[Path] = set()
    unique: list[ManifestEntry] = []
    for entry in manifest.entries:
        key = manifest.image_path(entry).resolve()
        if key in seen:
            report.errors.append({"path": entry.image, "error": "duplicate entry"})
            continue
        seen.add(key)
        unique.append(entry)

    kinds: Counter[str] = Counter()
    for boxes, errors in ordered_map(lambda e: _check_entry(manifest, e), unique, jobs):
        report.errors.extend(errors)
        if not any(err["error"].startswith(("missing image", "undecodable")) for err in errors):
            report.images += 1
        report.boxes += len(boxes)
        kinds.update(b.kind.value for b in boxes)

    report.boxes_per_kind = dict(kinds)
    if report.errors:
        logger.warning("dataset validation found %d error(s)", len(report.errors))
    return report
