# src/nsn_engine/curriculum.py
"""
Difficulty-aware pseudo-label thresholds, updated once per training period.

    candidates:  p > tau_min
    sigma(c)   = (1/N_c) * sum_n 1[p_n > tau_max]          (0 when N_c = 0)
    tau(c)     = max( sigma(c) / max_c' sigma(c') * tau_max, tau_min )
    accept     : p > tau(c)

When no candidate anywhere exceeds tau_max (max sigma = 0) every tau(c) = tau_max.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence, TypeVar

from nsn_engine.annotations import DatasetManifest, LabeledBox
from nsn_engine.config import DEFAULT_TAU_MAX, DEFAULT_TAU_MIN
from nsn_engine.difficulty import DifficultyCategory, DifficultyThresholds, PartitionReport, partition_dataset
from nsn_engine.errors import ConfigurationError

logger = logging.getLogger(__name__)

T = TypeVar("T")

CATEGORIES: tuple[DifficultyCategory, ...] = tuple(DifficultyCategory)


@dataclass(frozen=True)
class CurriculumConfig:
    tau_min: float = DEFAULT_TAU_MIN
    tau_max: float = DEFAULT_TAU_MAX
    adaptive: bool = True

    def __post_init__(self) -> None:
        if not (0.0 < self.tau_min < self.tau_max < 1.0):
            raise ConfigurationError(
                f"need 0 < tau_min < tau_max < 1, got tau_min={self.tau_min}, tau_max={self.tau_max}"
            )


@dataclass(frozen=True)
class ConfidenceRecord:
    image: str
    box_index: int
    category: DifficultyCategory
    p: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.p <= 1.0):
            raise ValueError(f"confidence out of range: {self.p}")


@dataclass(frozen=True)
class CategoryStats:
    counts: dict[DifficultyCategory, int]
    sigma: dict[DifficultyCategory, float]


@dataclass(frozen=True)
class AdaptiveThresholds:
    tau: dict[DifficultyCategory, float]
    tau_min: float
    tau_max: float
    fallback_triggered: bool = False
    mode: str = "adaptive"

    def __getitem__(self, category: DifficultyCategory) -> float:
        return self.tau[category]


@dataclass(frozen=True)
class ThresholdDecision:
    record: ConfidenceRecord
    tau: float
    accepted: bool

    @property
    def margin(self) -> float:
        return self.record.p - self.tau

    def to_dict(self) -> dict[str, Any]:
        return {
            "image": self.record.image,
            "box_index": self.record.box_index,
            "category": self.record.category.value,
            "p": self.record.p,
            "tau": self.tau,
            "accepted": self.accepted,
            "margin": self.margin,
        }


@dataclass(frozen=True)
class FilterResult:
    accepted: list[ConfidenceRecord]
    decisions: list[ThresholdDecision]

    @property
    def rejected(self) -> list[ThresholdDecision]:
        return [d for d in self.decisions if not d.accepted]


def _confidence(item: Any) -> float:
    p = getattr(item, "p", None)
    return float(item.confidence if p is None else p)


def candidate_filter(detections: Iterable[T], tau_min: float = DEFAULT_TAU_MIN) -> list[T]:
    """Keep detections with confidence strictly above tau_min, order preserved."""
    return [d for d in detections if _confidence(d) > tau_min]


def relative_difficulty(candidates: Iterable[ConfidenceRecord], tau_max: float = DEFAULT_TAU_MAX) -> CategoryStats:
    counts = {c: 0 for c in CATEGORIES}
    above = {c: 0 for c in CATEGORIES}
    for rec in candidates:
        counts[rec.category] += 1
        if rec.p > tau_max:
            above[rec.category] += 1
    sigma = {c: (above[c] / counts[c] if counts[c] else 0.0) for c in CATEGORIES}
    return CategoryStats(counts=counts, sigma=sigma)


def adaptive_thresholds(
    stats: CategoryStats,
    tau_max: float = DEFAULT_TAU_MAX,
    tau_min: float = DEFAULT_TAU_MIN,
) -> AdaptiveThresholds:
    CurriculumConfig(tau_min=tau_min, tau_max=tau_max)
    top = max(stats.sigma.values(), default=0.0)
    if top <= 0.0:
        logger.warning("no candidate exceeds tau_max=%.3f; every category uses tau_max", tau_max)
        return AdaptiveThresholds({c: tau_max for c in CATEGORIES}, tau_min, tau_max, fallback_triggered=True)
    tau = {c: max(stats.sigma.get(c, 0.0) / top * tau_max, tau_min) for c in CATEGORIES}
    return AdaptiveThresholds(tau, tau_min, tau_max)


def fixed_thresholds(tau_min: float = DEFAULT_TAU_MIN, tau_max: float = DEFAULT_TAU_MAX) -> AdaptiveThresholds:
    """One constant cut at tau_min for every category (curriculum disabled)."""
    return AdaptiveThresholds({c: tau_min for c in CATEGORIES}, tau_min, tau_max, mode="fixed")


def apply_thresholds(candidates: Sequence[ConfidenceRecord], thresholds: AdaptiveThresholds) -> FilterResult:
    ordered = sorted(candidates, key=lambda r: (r.image, r.box_index))
    decisions = []
    for rec in ordered:
        tau = thresholds[rec.category]
        decisions.append(ThresholdDecision(rec, tau, rec.p > tau))
    return FilterResult(accepted=[d.record for d in decisions if d.accepted], decisions=decisions)


def threshold_report(stats: CategoryStats, thresholds: AdaptiveThresholds) -> dict[str, Any]:
    return {
        "per_category": {
            c.value: {"N_c": stats.counts[c], "sigma": stats.sigma[c], "tau": thresholds.tau[c]}
            for c in CATEGORIES
        },
        "tau_min": thresholds.tau_min,
        "tau_max": thresholds.tau_max,
        "fallback_triggered": thresholds.fallback_triggered,
        "mode": thresholds.mode,
    }


def run_curriculum(candidates: Sequence[ConfidenceRecord], config: CurriculumConfig | None = None) -> tuple[dict[str, Any], FilterResult]:
    """Threshold report and filter result for one period's candidates."""
    cfg = config or CurriculumConfig()
    stats = relative_difficulty(candidates, cfg.tau_max)
    if cfg.adaptive:
        thresholds = adaptive_thresholds(stats, cfg.tau_max, cfg.tau_min)
    else:
        thresholds = fixed_thresholds(cfg.tau_min, cfg.tau_max)
    result = apply_thresholds(candidates, thresholds)
    return threshold_report(stats, thresholds), result


def write_decisions(path: str | Path, decisions: Iterable[ThresholdDecision]) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8") as f:
        for d in decisions:
            f.write(json.dumps(d.to_dict(), sort_keys=True) + "\n")
    return p


# =========================
# Dataset-level selection
# =========================

@dataclass
class PseudoSelection:
    """One period's pseudo-label selection over a target manifest."""

    partition: PartitionReport
    report: dict[str, Any]
    result: FilterResult
    raw_count: int
    candidate_count: int
    accepted: dict[str, list[LabeledBox]]

    @property
    def accepted_count(self) -> int:
        return len(self.result.accepted)


def select_pseudo_labels(
    target: DatasetManifest,
    raw: Mapping[str, Sequence[LabeledBox]],
    config: CurriculumConfig | None = None,
    thresholds: DifficultyThresholds | None = None,
    *,
    pre_resize: int | None = None,
    jobs: int = 1,
) -> PseudoSelection:
    """
    candidates (p > tau_min) -> difficulty category per candidate -> thresholds -> accepted.
    raw maps manifest image path -> detections; box_index in decisions refers to raw order.
    """
    cfg = config or CurriculumConfig()
    kept = {
        img: [(i, b) for i, b in enumerate(boxes) if candidate_filter([b], cfg.tau_min)]
        for img, boxes in raw.items()
    }
    partition = partition_dataset(
        target,
        {img: [b for _, b in pairs] for img, pairs in kept.items()},
        thresholds,
        pre_resize=pre_resize,
        jobs=jobs,
    )
    records = [
        ConfidenceRecord(img, i, partition.category_of(img, pos), float(b.confidence))
        for img, pairs in kept.items()
        if img in partition.per_image
        for pos, (i, b) in enumerate(pairs)
    ]
    report, result = run_curriculum(records, cfg)

    accepted: dict[str, list[LabeledBox]] = {e.image: [] for e in target.entries}
    for rec in result.accepted:
        accepted.setdefault(rec.image, []).append(raw[rec.image][rec.box_index])
    if not result.accepted:
        logger.warning("no pseudo label survived the curriculum")
    return PseudoSelection(
        partition=partition,
        report=report,
        result=result,
        raw_count=sum(len(v) for v in raw.values()),
        candidate_count=len(records),
        accepted=accepted,
    )
