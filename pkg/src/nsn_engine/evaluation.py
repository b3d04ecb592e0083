# src/nsn_engine/evaluation.py
"""
Single-category detection evaluation.

AP at an IoU threshold, detections ranked by confidence (ties: image path, box index),
greedy matching against the highest-IoU unmatched ground truth.
Precision/recall are taken at every distinct confidence threshold, i.e. at the end of
each tie group.

    all-point : (1/N_gt) * sum over true positives of the precision envelope at their threshold
    11-point  : mean over r in {0, 0.1, ..., 1} of max precision at recall >= r

Adaptation gain:
    rho = (theta_a - theta_s) / (theta_o - theta_s) * 100
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Mapping, NamedTuple, Sequence

import numpy as np
import pandas as pd

from nsn_engine.annotations import (
    DatasetManifest,
    LabeledBox,
    LabelKind,
    iou,
    load_entry_labels,
    load_labels,
    mirrored,
)
from nsn_engine.config import DEFAULT_IOU_THRESHOLD
from nsn_engine.errors import DetectionInputError, UndefinedGainError

logger = logging.getLogger(__name__)

MODES = ("all-point", "11-point")


def display_round(value: float, decimals: int = 1) -> float:
    """Round half-up for display, the way published tables print."""
    q = Decimal(1).scaleb(-decimals)
    return float(Decimal(repr(float(value))).quantize(q, rounding=ROUND_HALF_UP))


# =========================
# Types
# =========================

@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "threshold": self.threshold,
            "precision": self.precision,
            "recall": self.recall,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
        }


@dataclass(frozen=True)
class APResult:
    ap: float
    mode: str
    iou_threshold: float
    n_gt: int
    tp: int
    fp: int
    pr_curve: tuple[PRPoint, ...] = ()
    matches: tuple[dict[str, Any], ...] = ()

    @property
    def fn(self) -> int:
        return self.n_gt - self.tp

    def to_dict(self) -> dict[str, Any]:
        return {
            "ap": self.ap,
            "mode": self.mode,
            "iou_threshold": self.iou_threshold,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "pr_curve": [p.to_dict() for p in self.pr_curve],
        }

    def pr_frame(self) -> pd.DataFrame:
        return pd.DataFrame([p.to_dict() for p in self.pr_curve],
                            columns=["threshold", "precision", "recall", "tp", "fp", "fn"])


@dataclass(frozen=True)
class AdaptationGainInputs:
    adapted: float       # theta_a
    source_only: float   # theta_s
    oracle: float        # theta_o

    def __post_init__(self) -> None:
        for name in ("adapted", "source_only", "oracle"):
            v = getattr(self, name)
            if not (0.0 <= v <= 100.0):
                raise ValueError(f"{name} mAP must lie in [0, 100], got {v}")


# =========================
# Average precision
# =========================

def _match(
    gt: Mapping[str, Sequence[LabeledBox]],
    detections: Mapping[str, Sequence[LabeledBox]],
    iou_threshold: float,
) -> list[tuple[float, str, int, bool, int | None]]:
    ranked: list[tuple[float, str, int]] = []
    for image, dets in detections.items():
        for i, d in enumerate(dets):
            if d.confidence is None:
                raise DetectionInputError(f"detection {i} of {image} has no confidence")
            ranked.append((d.confidence, image, i))
    ranked.sort(key=lambda t: (-t[0], t[1], t[2]))

    taken: dict[str, set[int]] = {}
    out = []
    for conf, image, i in ranked:
        det = detections[image][i]
        used = taken.setdefault(image, set())
        best, best_iou = None, -1.0
        for j, g in enumerate(gt.get(image, ())):
            if j in used:
                continue
            v = iou(det.bbox, g.bbox)
            if v >= iou_threshold and v > best_iou:
                best, best_iou = j, v
        if best is not None:
            used.add(best)
        out.append((conf, image, i, best is not None, best))
    return out


def average_precision(
    gt: Mapping[str, Sequence[LabeledBox]],
    detections: Mapping[str, Sequence[LabeledBox]],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    mode: str = "all-point",
) -> APResult:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    n_gt = sum(len(v) for v in gt.values())
    matched = _match(gt, detections, iou_threshold)
    matches = tuple(
        {"image": img, "detection": i, "confidence": c, "gt": g, "tp": hit}
        for c, img, i, hit, g in matched
    )
    if not matched:
        return APResult(0.0, mode, iou_threshold, n_gt, 0, 0, (), matches)

    conf = np.array([m[0] for m in matched])
    hits = np.array([m[3] for m in matched], dtype=np.int64)
    tp_cum = np.cumsum(hits)
    fp_cum = np.cumsum(1 - hits)

    # end index of each tie group (distinct thresholds, descending)
    ends = np.flatnonzero(np.append(conf[1:] != conf[:-1], True))
    tp_g = tp_cum[ends]
    fp_g = fp_cum[ends]
    prec = tp_g / (tp_g + fp_g)
    recall = tp_g / n_gt if n_gt else np.zeros_like(prec, dtype=np.float64)

    curve = tuple(
        PRPoint(float(conf[e]), float(p), float(r), int(t), int(f), int(n_gt - t))
        for e, p, r, t, f in zip(ends, prec, recall, tp_g, fp_g)
    )
    tp_total, fp_total = int(tp_cum[-1]), int(fp_cum[-1])
    if n_gt == 0:
        return APResult(0.0, mode, iou_threshold, 0, tp_total, fp_total, curve, matches)

    if mode == "all-point":
        envelope = np.maximum.accumulate(prec[::-1])[::-1]
        new_tp = np.diff(np.concatenate(([0], tp_g)))
        ap = float(np.sum(new_tp * envelope)) / n_gt
    else:
        samples = []
        for k in range(11):
            reach = tp_g * 10 >= k * n_gt
            samples.append(float(prec[reach].max()) if reach.any() else 0.0)
        ap = float(sum(samples)) / 11.0

    return APResult(min(1.0, max(0.0, ap)), mode, iou_threshold, n_gt, tp_total, fp_total, curve, matches)


# =========================
# Dataset mAP
# =========================

@dataclass
class MapReport:
    result: APResult
    images: int
    missing_predictions: list[str] = field(default_factory=list)

    @property
    def map50(self) -> float:
        return self.result.ap * 100.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "map50": self.map50,
            "map50_display": display_round(self.map50),
            "images": self.images,
            "missing_predictions": len(self.missing_predictions),
            **self.result.to_dict(),
            "per_image": _per_image(self.result),
        }


def _per_image(result: APResult) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = {}
    for m in result.matches:
        row = out.setdefault(m["image"], {"tp": 0, "fp": 0})
        row["tp" if m["tp"] else "fp"] += 1
    return dict(sorted(out.items()))


def prediction_file(pred_dir: Path, image: str) -> Path:
    """Mirrored path first, bare basename second."""
    mirrored_path = pred_dir / mirrored(image, ".txt")
    if mirrored_path.exists():
        return mirrored_path
    return pred_dir / (Path(image).stem + ".txt")


def load_predictions(manifest: DatasetManifest, pred_dir: str | Path) -> tuple[dict[str, list[LabeledBox]], list[str]]:
    pdir = Path(pred_dir)
    preds: dict[str, list[LabeledBox]] = {}
    missing: list[str] = []
    for entry in manifest.entries:
        pf = prediction_file(pdir, entry.image)
        if not pf.exists():
            missing.append(entry.image)
            preds[entry.image] = []
            continue
        boxes = load_labels(pf, kind_default=LabelKind.PSEUDO)
        for i, b in enumerate(boxes):
            if b.confidence is None:
                raise DetectionInputError(f"{pf}: line {i + 1} has no confidence")
        preds[entry.image] = boxes
    return preds, missing


def map50(gt_manifest: DatasetManifest, pred_dir: str | Path, mode: str = "all-point") -> MapReport:
    gt = {e.image: load_entry_labels(gt_manifest, e) for e in gt_manifest.entries}
    preds, missing = load_predictions(gt_manifest, pred_dir)
    if missing:
        logger.warning("%d image(s) have no prediction file; counted as zero detections", len(missing))
    result = average_precision(gt, preds, DEFAULT_IOU_THRESHOLD, mode)
    return MapReport(result=result, images=len(gt_manifest), missing_predictions=missing)


# =========================
# Adaptation gain
# =========================

def adaptation_gain(inputs: AdaptationGainInputs) -> float:
    denom = inputs.oracle - inputs.source_only
    if denom == 0:
        raise UndefinedGainError(
            f"adaptation gain undefined: oracle mAP equals source-only mAP ({inputs.oracle})"
        )
    return (inputs.adapted - inputs.source_only) / denom * 100.0


def gain_report(inputs: AdaptationGainInputs) -> dict[str, float]:
    rho = adaptation_gain(inputs)
    return {
        "theta_a": inputs.adapted,
        "theta_s": inputs.source_only,
        "theta_o": inputs.oracle,
        "rho": rho,
        "rho_display": display_round(rho),
    }


class GainRow(NamedTuple):
    task: str
    method: str
    adapted: float
    source_only: float
    oracle: float
    printed_rho: float


_SIM = ("sim-to-real", 39.9, 89.5)
_SCENE = ("cross-scene", 28.7, 89.5)
_CAMERA = ("cross-camera", 31.9, 89.1)


def _rows(task: tuple[str, float, float], values: Sequence[tuple[str, float, float]]) -> list[GainRow]:
    name, s, o = task
    return [GainRow(name, m, a, s, o, rho) for m, a, rho in values]


PUBLISHED_GAIN_ROWS: tuple[GainRow, ...] = tuple(
    _rows(_SIM, [
        ("CSL", 24.6, -30.9), ("AsyFOD", 35.4, -9.1), ("AcroFOD", 21.9, -36.3),
        ("ConfMix", 37.4, -5.0), ("SimROD", 41.1, 2.4), ("SimROD w/o teacher", 38.5, -2.8),
        ("NSN w/o teacher", 41.2, 2.6), ("NSN", 46.9, 14.1),
    ])
    + _rows(_SCENE, [
        ("CSL", 34.4, 9.3), ("AsyFOD", 47.9, 31.6), ("AcroFOD", 30.4, 2.8),
        ("ConfMix", 32.2, 5.8), ("SimROD", 46.8, 29.8), ("SimROD w/o teacher", 39.1, 17.1),
        ("NSN w/o teacher", 43.1, 23.7), ("NSN", 50.5, 35.9),
    ])
    + _rows(_CAMERA, [
        ("CSL", 33.9, 3.5), ("AsyFOD", 39.8, 13.8), ("AcroFOD", 35.7, 6.6),
        ("ConfMix", 25.8, -10.7), ("SimROD", 50.2, 32.0), ("SimROD w/o teacher", 36.5, 8.0),
        ("NSN w/o teacher", 42.6, 18.7), ("NSN", 61.5, 51.8),
    ])
    + _rows(("ablation", 31.9, 89.1), [
        ("PCL", 37.5, 9.8), ("MCA", 41.1, 16.1), ("PCL+MCA", 42.6, 18.7),
        ("LM", 50.2, 32.0), ("LM+MCA", 60.5, 50.0), ("LM+PCL+MCA", 61.5, 51.8),
        ("MCA source crops w>=50px", 40.6, 15.2), ("SimROD w/o teacher + saliency", 35.5, 6.3),
        ("CutMix", 33.0, 1.9),
    ])
    + _rows(("hyper-parameters", 31.9, 89.1), [
        ("MCA J=1", 37.4, 9.6), ("MCA J=3", 41.1, 16.1), ("MCA J=5", 39.8, 13.8),
        ("PCL tau_max=0.6", 37.2, 9.3), ("PCL tau_max=0.75", 37.5, 9.8), ("PCL tau_max=0.9", 36.7, 8.4),
    ])
)


def gain_table(rows: Sequence[GainRow] = PUBLISHED_GAIN_ROWS) -> pd.DataFrame:
    records = []
    for r in rows:
        rho = adaptation_gain(AdaptationGainInputs(r.adapted, r.source_only, r.oracle))
        records.append({
            **r._asdict(),
            "rho": rho,
            "rho_display": display_round(rho),
            "deviation": abs(rho - r.printed_rho),
        })
    return pd.DataFrame(records)
