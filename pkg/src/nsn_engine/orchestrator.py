# src/nsn_engine/orchestrator.py
"""
Large-to-small staged self-training.

    S1-large  train the large model on source data            (S1-small optional)
    S2.1      pseudo labels from S1-large -> curriculum -> copy-paste -> large model, freeze except norm
    S2.2      pseudo labels from S2.1     -> curriculum -> copy-paste -> large model, unfrozen
    S3        pseudo labels from S2.2     -> curriculum -> copy-paste -> small model, freeze except norm

Data is updated once at the start of each period, never per epoch. State is checkpointed
after every stage; a resumed run skips completed stages and reproduces the rest from the
same seeds.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

import pandas as pd

from nsn_engine.adapters import AdapterCommand, invoke, read_train_result, write_request
from nsn_engine.annotations import (
    DatasetManifest,
    LabeledBox,
    LabelKind,
    LabelParseError,
    ManifestEntry,
    load_labels,
    mirrored,
    save_labels,
)
from nsn_engine.augment import AugmentConfig, CropAsset, augment_dataset, build_crop_library, stream_seed
from nsn_engine.config import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    DEFAULT_EPOCHS,
    DEFAULT_LR_ADAPT,
    DEFAULT_LR_SOURCE,
    DEFAULT_SEED,
    DEFAULT_SOURCE_EPOCHS,
)
from nsn_engine.curriculum import CurriculumConfig, candidate_filter, select_pseudo_labels, write_decisions
from nsn_engine.difficulty import DifficultyThresholds
from nsn_engine.errors import (
    ConfigurationError,
    LabelNotFoundError,
    NonFiniteLossError,
    StageFailure,
)
from nsn_engine.evaluation import display_round, map50
from nsn_engine.poisson import PoissonSolveParams
from nsn_engine.schema_versions import PIPELINE_STATE_SCHEMA_VERSION
from nsn_engine.snapshots import artifact_digest, snapshot_matches, verify_snapshot, write_snapshot

logger = logging.getLogger(__name__)

STAGE_ORDER = ("S1-large", "S1-small", "S2.1", "S2.2", "S3")
PERIODS = ("S2.1", "S2.2", "S3")
PSEUDO_SOURCE = {"S2.1": "S1-large", "S2.2": "S2.1", "S3": "S2.2"}


class FreezeDirective(str, Enum):
    FREEZE_EXCEPT_NORM = "freeze-except-norm"
    UNFROZEN = "unfrozen"

    @property
    def request_value(self) -> str:
        return "except-norm" if self is FreezeDirective.FREEZE_EXCEPT_NORM else "none"


# =========================
# Stage configuration
# =========================

@dataclass(frozen=True)
class LossWeights:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self) -> None:
        for name, v in (("alpha", self.alpha), ("beta", self.beta)):
            if not math.isfinite(v) or v < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0, got {v}")


def compose_loss(l_s: float, l_u: float, l_t: float, weights: LossWeights) -> float:
    """L = L_s + alpha * L_u + beta * L_t; L_u covers pseudo labels, L_t pasted-true labels."""
    for name, v in (("l_s", l_s), ("l_u", l_u), ("l_t", l_t)):
        if not math.isfinite(v):
            raise NonFiniteLossError(f"{name} is not finite: {v}")
        if v < 0:
            raise ValueError(f"{name} must be >= 0, got {v}")
    return l_s + weights.alpha * l_u + weights.beta * l_t


_EXPECTED = {
    "S1-large": ("large", FreezeDirective.UNFROZEN),
    "S1-small": ("small", FreezeDirective.UNFROZEN),
    "S2.1": ("large", FreezeDirective.FREEZE_EXCEPT_NORM),
    "S2.2": ("large", FreezeDirective.UNFROZEN),
    "S3": ("small", FreezeDirective.FREEZE_EXCEPT_NORM),
}


@dataclass(frozen=True)
class StageConfig:
    stage: str
    role: str
    freeze: FreezeDirective
    epochs: int = DEFAULT_EPOCHS
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = DEFAULT_LR_ADAPT

    def __post_init__(self) -> None:
        if self.stage not in _EXPECTED:
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        role, freeze = _EXPECTED[self.stage]
        if (self.role, self.freeze) != (role, freeze):
            raise ConfigurationError(f"stage {self.stage} must use the {role} model with {freeze.value}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError("lr must be > 0")


def default_stages(
    epochs: int = DEFAULT_EPOCHS,
    source_epochs: int = DEFAULT_SOURCE_EPOCHS,
    weights: LossWeights | None = None,
    lr_adapt: float = DEFAULT_LR_ADAPT,
    lr_source: float = DEFAULT_LR_SOURCE,
) -> dict[str, StageConfig]:
    w = weights or LossWeights()
    out = {}
    for stage, (role, freeze) in _EXPECTED.items():
        source = stage.startswith("S1")
        out[stage] = StageConfig(
            stage, role, freeze,
            epochs=source_epochs if source else epochs,
            weights=w,
            lr=lr_source if source else lr_adapt,
        )
    return out


# =========================
# Pipeline configuration
# =========================

def _path(value: Any, base: Path) -> Path | None:
    if value in (None, ""):
        return None
    p = Path(value)
    return p if p.is_absolute() else (base / p)


@dataclass(frozen=True)
class PipelineConfig:
    workdir: Path
    source_manifest: Path
    target_manifest: Path
    crop_manifest: Path | None
    detector: AdapterCommand
    trainer: AdapterCommand
    external_masks: Path | None = None
    val_manifest: Path | None = None
    source_large_model: Path | None = None
    source_small_model: Path | None = None
    train_source_small: bool = False
    epochs: int = DEFAULT_EPOCHS
    source_epochs: int = DEFAULT_SOURCE_EPOCHS
    weights: LossWeights = field(default_factory=LossWeights)
    lr_adapt: float = DEFAULT_LR_ADAPT
    lr_source: float = DEFAULT_LR_SOURCE
    seed: int = DEFAULT_SEED
    jobs: int = 1
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    difficulty: DifficultyThresholds = field(default_factory=DifficultyThresholds)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    pre_resize: int | None = None
    use_pcl: bool = True
    use_mca: bool = True

    def __post_init__(self) -> None:
        if self.use_mca and self.crop_manifest is None:
            raise ConfigurationError("crop_manifest is required when copy-paste augmentation is enabled")

    def stages(self) -> dict[str, StageConfig]:
        return default_stages(self.epochs, self.source_epochs, self.weights, self.lr_adapt, self.lr_source)

    def fingerprint(self) -> str:
        """Identity of everything that shapes artifacts; worker count and work directory are excluded."""
        d = self.to_dict()
        d.pop("jobs", None)
        d.pop("workdir", None)
        body = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(body.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["detector"] = list(self.detector.argv)
        d["trainer"] = list(self.trainer.argv)
        return json.loads(json.dumps(d, default=str))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: str | Path = ".") -> "PipelineConfig":
        base = Path(base_dir)
        try:
            cur = data.get("curriculum", {})
            dif = data.get("difficulty", {})
            aug = dict(data.get("augment", {}))
            poisson = aug.pop("poisson", {})
            seed = int(data.get("seed", DEFAULT_SEED))
            return cls(
                workdir=_path(data.get("workdir", "nsn_work"), base),
                source_manifest=_path(data["source_manifest"], base),
                target_manifest=_path(data["target_manifest"], base),
                crop_manifest=_path(data.get("crop_manifest"), base),
                detector=AdapterCommand.parse(data["detector"], data.get("adapter_timeout")),
                trainer=AdapterCommand.parse(data["trainer"], data.get("adapter_timeout")),
                external_masks=_path(data.get("external_masks"), base),
                val_manifest=_path(data.get("val_manifest"), base),
                source_large_model=_path(data.get("source_large_model"), base),
                source_small_model=_path(data.get("source_small_model"), base),
                train_source_small=bool(data.get("train_source_small", False)),
                epochs=int(data.get("epochs", DEFAULT_EPOCHS)),
                source_epochs=int(data.get("source_epochs", DEFAULT_SOURCE_EPOCHS)),
                weights=LossWeights(float(data.get("alpha", DEFAULT_ALPHA)), float(data.get("beta", DEFAULT_BETA))),
                lr_adapt=float(data.get("lr_adapt", DEFAULT_LR_ADAPT)),
                lr_source=float(data.get("lr_source", DEFAULT_LR_SOURCE)),
                seed=seed,
                jobs=int(data.get("jobs", 1)),
                curriculum=CurriculumConfig(**cur),
                difficulty=DifficultyThresholds(**dif),
                augment=AugmentConfig(seed=seed, poisson=PoissonSolveParams(**poisson), **aug),
                pre_resize=data.get("pre_resize"),
                use_pcl=bool(data.get("use_pcl", True)),
                use_mca=bool(data.get("use_mca", True)),
            )
        except KeyError as e:
            raise ConfigurationError(f"pipeline config missing field {e}") from None
        except TypeError as e:
            raise ConfigurationError(f"pipeline config has an unknown or malformed field: {e}") from None

    @classmethod
    def load(cls, path: str | Path, workdir: str | Path | None = None) -> "PipelineConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"pipeline config not found: {p}")
        data = json.loads(p.read_text(encoding="utf-8"))
        if workdir is not None:
            data["workdir"] = str(Path(workdir).resolve())
        return cls.from_dict(data, base_dir=p.parent.resolve())


# =========================
# Pipeline state
# =========================

@dataclass
class PipelineState:
    completed: list[str] = field(default_factory=list)
    current: str | None = None
    models: dict[str, str | None] = field(default_factory=dict)
    pseudo_snapshots: dict[str, str] = field(default_factory=dict)
    bundles: dict[str, str] = field(default_factory=dict)
    reports: dict[str, str] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    config_fingerprint: str | None = None
    trainer_invocations: int = 0

    @property
    def large_model(self) -> str | None:
        for stage in ("S2.2", "S2.1", "S1-large"):
            if self.models.get(stage):
                return self.models[stage]
        return None

    @property
    def small_model(self) -> str | None:
        return self.models.get("S3") or self.models.get("S1-small")

    def to_dict(self) -> dict[str, Any]:
        return {"schema_version": PIPELINE_STATE_SCHEMA_VERSION, **asdict(self)}

    def referenced_paths(self) -> list[str]:
        paths = [p for p in self.models.values() if p]
        return paths + list(self.pseudo_snapshots.values()) + list(self.bundles.values())


def _rel(path: Path, workdir: Path) -> str:
    try:
        return Path(path).resolve().relative_to(workdir.resolve()).as_posix()
    except ValueError:
        return str(Path(path).resolve())


def _abs(path: str, workdir: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else workdir / p


def load_state(path: Path, workdir: Path) -> PipelineState:
    if not path.exists():
        return PipelineState()
    data = json.loads(path.read_text(encoding="utf-8"))
    data.pop("schema_version", None)
    data.pop("updated_at", None)
    state = PipelineState(**data)
    for ref in state.referenced_paths():
        if not _abs(ref, workdir).exists():
            raise ConfigurationError(f"checkpoint {path} references a missing artifact: {ref}")
    return state


def save_state(state: PipelineState, path: Path) -> None:
    body = state.to_dict()
    body["updated_at"] = time.strftime("%Y-%m-%d %H:%M:%S", time.gmtime())
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)


# =========================
# Pseudo labels
# =========================

def _fresh_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def generate_pseudo_labels(
    model: Path,
    manifest: DatasetManifest,
    detector: AdapterCommand,
    out_dir: Path,
    stage: str,
    *,
    fingerprint: str | None = None,
) -> Path:
    """
    One detector invocation over the whole manifest. Output is validated, then moved into
    place and sealed with a snapshot manifest. An existing sealed snapshot is reused only when
    it was written for the same config fingerprint and the same model bytes.
    """
    key = {"stage": stage, "kind": "pseudo-labels", "config_fingerprint": fingerprint,
           "model_sha256": artifact_digest(model)}
    if out_dir.exists() and snapshot_matches(out_dir, **key):
        logger.info("stage %s: reusing sealed pseudo-label snapshot %s", stage, out_dir)
        return out_dir

    staging = _fresh_dir(out_dir.with_name(out_dir.name + ".partial"))
    expected = [mirrored(e.image, ".txt").as_posix() for e in manifest.entries]
    request = write_request(
        out_dir.with_name(out_dir.name + ".request.json"),
        {
            "model": str(Path(model).resolve()),
            "images": [
                {"path": str(manifest.image_path(e).resolve()), "prediction": rel}
                for e, rel in zip(manifest.entries, expected)
            ],
            "output_dir": str(staging.resolve()),
        },
    )
    try:
        invoke(detector, "infer", request, stage)
        for rel in expected:
            pf = staging / rel
            for box in load_labels(pf):
                if box.kind is not LabelKind.PSEUDO:
                    raise StageFailure(stage, f"{pf}: prediction lines must carry a confidence")
    except (LabelParseError, LabelNotFoundError) as e:
        shutil.rmtree(staging, ignore_errors=True)
        raise StageFailure(stage, f"malformed detector output: {e}") from e
    except StageFailure:
        shutil.rmtree(staging, ignore_errors=True)
        raise

    write_snapshot(staging, **key, model=Path(model).name, images=len(expected))
    if out_dir.exists():
        shutil.rmtree(out_dir)
    os.replace(staging, out_dir)
    return out_dir


def read_predictions(manifest: DatasetManifest, pred_dir: Path) -> dict[str, list[LabeledBox]]:
    return {
        e.image: load_labels(pred_dir / mirrored(e.image, ".txt"), kind_default=LabelKind.PSEUDO)
        for e in manifest.entries
    }


# =========================
# Stage preparation
# =========================

@dataclass
class StageBundle:
    stage: StageConfig
    path: Path
    counts: dict[str, int]
    thresholds: dict[str, Any]
    augmentation: dict[str, Any]

    @property
    def train_manifest(self) -> Path:
        return self.path / "train.json"

    @property
    def provenance_dir(self) -> Path:
        return self.path / "augmented" / "labels"


def _passthrough(target: DatasetManifest, accepted: Mapping[str, list[LabeledBox]], out: Path) -> dict[str, Any]:
    entries = []
    for e in target.entries:
        rel = mirrored(e.image, ".txt")
        save_labels(accepted.get(e.image, []), out / "labels" / rel)
        entries.append(ManifestEntry(str(target.image_path(e).resolve()), (Path("labels") / rel).as_posix()))
    DatasetManifest(out, tuple(entries), target.split, "target-augmented").save(out / "manifest.json", relative_root=True)
    return {"images": len(entries), "augmented": 0, "passed_through": len(entries), "pasted": 0,
            "skipped": 0, "blend_fallbacks": 0, "errors": 0}


def prepare_stage(
    state: PipelineState,
    stage: StageConfig,
    config: PipelineConfig,
    pseudo_dir: Path,
    out_dir: Path,
    library: list[CropAsset] | None,
) -> StageBundle:
    """
    candidates -> difficulty partition -> thresholds -> accepted pseudo labels -> copy-paste,
    then the merged training manifest and bundle.json, sealed before any trainer call.
    """
    seed = stream_seed(config.seed, stage.stage)
    state.seeds[stage.stage] = seed

    key = {"stage": stage.stage, "kind": "training-bundle", "config_fingerprint": config.fingerprint(),
           "seed": seed, "pseudo_digest": artifact_digest(pseudo_dir)}
    if out_dir.exists() and snapshot_matches(out_dir, **key):
        logger.info("stage %s: reusing sealed bundle %s", stage.stage, out_dir)
        meta = json.loads((out_dir / "bundle.json").read_text(encoding="utf-8"))
        return StageBundle(stage, out_dir, meta["counts"], meta["thresholds"], meta["augmentation"])

    target = DatasetManifest.load(config.target_manifest)
    raw = read_predictions(target, pseudo_dir)

    cur_cfg = config.curriculum if config.use_pcl else replace(config.curriculum, adaptive=False)
    selection = select_pseudo_labels(
        target, raw, cur_cfg, config.difficulty, pre_resize=config.pre_resize, jobs=config.jobs
    )
    partition, report, result, accepted = (
        selection.partition, selection.report, selection.result, selection.accepted
    )
    if partition.errors:
        logger.warning("stage %s: difficulty partition failed on %d image(s); their detections are dropped",
                       stage.stage, len(partition.errors))
    # dataset-level pseudo-size distribution for fallback sizing
    candidate_sizes = [
        (b.bbox.w, b.bbox.h) for boxes in raw.values() for b in candidate_filter(boxes, cur_cfg.tau_min)
    ]
    if selection.accepted_count == 0:
        if config.use_mca and config.augment.size_fallback and candidate_sizes:
            logger.warning("stage %s: no accepted pseudo labels, pasting at candidate sizes", stage.stage)
        else:
            logger.warning("stage %s: no accepted pseudo labels and nothing pasted", stage.stage)

    staging = _fresh_dir(out_dir.with_name(out_dir.name + ".partial"))
    (staging / "curriculum").mkdir()
    (staging / "curriculum" / "thresholds.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (staging / "curriculum" / "partition.json").write_text(
        json.dumps(partition.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    write_decisions(staging / "curriculum" / "decisions.jsonl", result.decisions)

    if config.use_mca:
        aug_cfg = replace(config.augment, seed=seed)
        aug = augment_dataset(target, library or [], aug_cfg, staging / "augmented",
                              pseudo_labels=accepted, reference_sizes=candidate_sizes, jobs=config.jobs)
        aug_summary = aug.summary()
        aug_manifest = aug.manifest
    else:
        aug_summary = _passthrough(target, accepted, staging / "augmented")
        aug_manifest = DatasetManifest.load(staging / "augmented" / "manifest.json")

    source = DatasetManifest.load(config.source_manifest)
    entries = [
        ManifestEntry(
            str(source.image_path(e).resolve()),
            None if e.labels is None else str(source.label_path(e).resolve()),
        )
        for e in source.entries
    ]
    entries += [
        ManifestEntry(
            e.image if Path(e.image).is_absolute() else (Path("augmented") / e.image).as_posix(),
            None if e.labels is None else (Path("augmented") / e.labels).as_posix(),
        )
        for e in aug_manifest.entries
    ]
    DatasetManifest(staging, tuple(entries), "train", "target-augmented").save(staging / "train.json",
                                                                              relative_root=True)

    counts = {
        "raw_detections": selection.raw_count,
        "candidates": selection.candidate_count,
        "accepted": selection.accepted_count,
        "pasted": int(aug_summary["pasted"]),
        "partition_errors": len(partition.errors),
    }
    meta = {
        "stage": stage.stage,
        "model_role": stage.role,
        "freeze": stage.freeze.value,
        "epochs": stage.epochs,
        "alpha": stage.weights.alpha,
        "beta": stage.weights.beta,
        "lr": stage.lr,
        "seed": seed,
        "train_manifest": "train.json",
        "label_provenance_dir": "augmented/labels",
        "counts": counts,
        "thresholds": report,
        "augmentation": aug_summary,
        "partition_errors": partition.errors,
    }
    (staging / "bundle.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_snapshot(staging, **key)

    if out_dir.exists():
        shutil.rmtree(out_dir)
    os.replace(staging, out_dir)
    return StageBundle(stage, out_dir, counts, report, aug_summary)


# =========================
# Training
# =========================

def train_stage(
    config: PipelineConfig,
    state: PipelineState,
    stage: StageConfig,
    *,
    base_model: Path | None,
    train_manifest: Path,
    provenance_dir: Path | None,
    bundle_dir: Path | None,
    seed: int,
) -> Path:
    workdir = config.workdir
    if bundle_dir is not None and not verify_snapshot(bundle_dir):
        raise StageFailure(stage.stage, f"training bundle {bundle_dir} changed after it was sealed")

    output = (workdir / "models" / f"{stage.stage}.model").resolve()
    output.parent.mkdir(parents=True, exist_ok=True)
    request = write_request(
        workdir / "requests" / f"{stage.stage}-train.json",
        {
            "stage": stage.stage,
            "model_role": stage.role,
            "base_model": str(base_model.resolve()) if base_model is not None else None,
            "train_manifest": str(train_manifest.resolve()),
            "label_provenance_dir": str(provenance_dir.resolve()) if provenance_dir is not None else None,
            "freeze": stage.freeze.request_value,
            "epochs": stage.epochs,
            "alpha": stage.weights.alpha,
            "beta": stage.weights.beta,
            "lr": stage.lr,
            "seed": seed,
            "output_model": str(output),
        },
    )
    run = invoke(config.trainer, "train", request, stage.stage)
    state.trainer_invocations += 1
    return read_train_result(request, stage.stage, run)


# =========================
# Full pipeline
# =========================

@dataclass
class PipelineResult:
    final_model: Path | None
    state: PipelineState
    reports: dict[str, dict[str, Any]]

    def summary_frame(self) -> pd.DataFrame:
        rows = []
        for stage, rep in self.reports.items():
            counts = rep.get("counts", {})
            rows.append({
                "stage": stage,
                "raw": counts.get("raw_detections"),
                "candidates": counts.get("candidates"),
                "accepted": counts.get("accepted"),
                "pasted": counts.get("pasted"),
                "map50": (rep.get("evaluation") or {}).get("map50_display"),
            })
        return pd.DataFrame(rows, columns=["stage", "raw", "candidates", "accepted", "pasted", "map50"])


def _write_report(workdir: Path, stage: str, report: dict[str, Any]) -> Path:
    path = workdir / "reports" / f"{stage}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _evaluate(config: PipelineConfig, model: Path, stage: str) -> dict[str, Any] | None:
    if config.val_manifest is None:
        return None
    val = DatasetManifest.load(config.val_manifest)
    preds = generate_pseudo_labels(model, val, config.detector, config.workdir / "eval" / stage, f"{stage}-eval",
                                   fingerprint=config.fingerprint())
    rep = map50(val, preds)
    return {"map50": rep.map50, "map50_display": display_round(rep.map50), "tp": rep.result.tp,
            "fp": rep.result.fp, "fn": rep.result.fn, "missing_predictions": len(rep.missing_predictions)}


def run_pipeline(
    config: PipelineConfig,
    state_path: str | Path | None = None,
    *,
    stop_after: str | None = None,
) -> PipelineResult:
    if stop_after is not None and stop_after not in STAGE_ORDER:
        raise ConfigurationError(f"stop_after must be one of {STAGE_ORDER}")
    workdir = config.workdir
    workdir.mkdir(parents=True, exist_ok=True)
    spath = Path(state_path) if state_path is not None else workdir / "state.json"

    state = load_state(spath, workdir)
    fp = config.fingerprint()
    if state.config_fingerprint not in (None, fp):
        raise ConfigurationError(f"checkpoint {spath} was written for a different pipeline config")
    state.config_fingerprint = fp

    stages = config.stages()
    reports: dict[str, dict[str, Any]] = {}
    for stage_id, rel in state.reports.items():
        reports[stage_id] = json.loads(_abs(rel, workdir).read_text(encoding="utf-8"))

    def model_path(stage_id: str) -> Path | None:
        ref = state.models.get(stage_id)
        return _abs(ref, workdir) if ref else None

    def finish(stage_id: str, report: dict[str, Any]) -> bool:
        report = {"stage": stage_id, **report}
        state.reports[stage_id] = _rel(_write_report(workdir, stage_id, report), workdir)
        reports[stage_id] = report
        state.completed.append(stage_id)
        state.current = None
        save_state(state, spath)
        logger.info("stage %s complete", stage_id)
        return stop_after == stage_id

    source_manifest = Path(config.source_manifest)
    library: list[CropAsset] | None = None

    for stage_id in STAGE_ORDER:
        if stage_id in state.completed:
            if stop_after == stage_id:
                break
            continue
        stage = stages[stage_id]
        state.current = stage_id
        save_state(state, spath)
        logger.info("stage %s starting", stage_id)

        if stage_id.startswith("S1"):
            supplied = config.source_large_model if stage_id == "S1-large" else config.source_small_model
            if supplied is not None:
                state.models[stage_id] = _rel(supplied, workdir)
                done = finish(stage_id, {"model": state.models[stage_id], "trained": False})
            elif stage_id == "S1-small" and not config.train_source_small:
                state.models[stage_id] = None
                done = finish(stage_id, {"model": None, "trained": False, "skipped": True})
            else:
                model = train_stage(
                    config, state, stage, base_model=None, train_manifest=source_manifest,
                    provenance_dir=None, bundle_dir=None, seed=stream_seed(config.seed, stage_id),
                )
                state.models[stage_id] = _rel(model, workdir)
                done = finish(stage_id, {"model": state.models[stage_id], "trained": True,
                                         "evaluation": _evaluate(config, model, stage_id)})
            if done:
                break
            continue

        if config.use_mca and library is None:
            crops = DatasetManifest.load(config.crop_manifest)
            library, lib_report = build_crop_library(
                crops, config.external_masks, allow_degraded=config.augment.allow_degraded, jobs=config.jobs
            )
            logger.info("crop library: %d kept, %d excluded", len(lib_report.kept), len(lib_report.excluded))

        pseudo_model = model_path(PSEUDO_SOURCE[stage_id])
        if pseudo_model is None:
            raise StageFailure(stage_id, f"no model from {PSEUDO_SOURCE[stage_id]} to generate pseudo labels")
        period_dir = workdir / "periods" / stage_id
        target = DatasetManifest.load(config.target_manifest)
        pseudo_dir = generate_pseudo_labels(pseudo_model, target, config.detector, period_dir / "pseudo", stage_id,
                                            fingerprint=fp)
        state.pseudo_snapshots[stage_id] = _rel(pseudo_dir, workdir)

        bundle = prepare_stage(state, stage, config, pseudo_dir, period_dir / "bundle", library)
        state.bundles[stage_id] = _rel(bundle.path, workdir)
        save_state(state, spath)

        base = model_path("S1-small") if stage_id == "S3" else model_path(PSEUDO_SOURCE[stage_id])
        model = train_stage(
            config, state, stage, base_model=base, train_manifest=bundle.train_manifest,
            provenance_dir=bundle.provenance_dir, bundle_dir=bundle.path, seed=state.seeds[stage_id],
        )
        state.models[stage_id] = _rel(model, workdir)
        if finish(stage_id, {
            "model": state.models[stage_id],
            "pseudo_model": _rel(pseudo_model, workdir),
            "freeze": stage.freeze.value,
            "epochs": stage.epochs,
            "counts": bundle.counts,
            "thresholds": bundle.thresholds,
            "augmentation": bundle.augmentation,
            "evaluation": _evaluate(config, model, stage_id),
        }):
            break

    final = model_path("S3") if "S3" in state.completed else None
    return PipelineResult(final_model=final, state=state, reports=reports)
