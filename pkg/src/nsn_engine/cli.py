# src/nsn_engine/cli.py
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import pandas as pd
from dotenv import load_dotenv

from nsn_engine import __version__
from nsn_engine.annotations import DatasetManifest, ManifestEntry, mirrored, save_labels, validate_dataset
from nsn_engine.augment import AugmentConfig, augment_dataset, build_crop_library, crop_library_from_dataset
from nsn_engine.config import (
    CROP_SOURCE_MIN_WIDTH,
    DEFAULT_BG_FACTOR,
    DEFAULT_OVERLAP_IOU,
    DEFAULT_PASTES,
    DEFAULT_RETRIES,
    DEFAULT_TAU_BC,
    DEFAULT_TAU_LC,
    DEFAULT_TAU_MAX,
    DEFAULT_TAU_MIN,
    DEFAULT_TAU_TS,
    GlobalOptions,
    load_config_file,
    resolve_global_options,
)
from nsn_engine.curriculum import CurriculumConfig, PseudoSelection, select_pseudo_labels, write_decisions
from nsn_engine.difficulty import DifficultyThresholds, partition_dataset
from nsn_engine.errors import ConfigurationError, NsnError
from nsn_engine.evaluation import (
    MODES,
    AdaptationGainInputs,
    display_round,
    gain_report,
    gain_table,
    load_predictions,
    map50,
)
from nsn_engine.orchestrator import STAGE_ORDER, PipelineConfig, run_pipeline
from nsn_engine.synth import (
    SOURCE_SCENE,
    TARGET_SCENE,
    Corruption,
    SceneSpec,
    generate_crops,
    generate_domain,
    stub_detect,
)

logger = logging.getLogger(__name__)

PRESETS = {"source": SOURCE_SCENE, "target": TARGET_SCENE}


# =========================
# Output
# =========================

def _emit(args: argparse.Namespace, payload: Any, table: pd.DataFrame | str | None = None) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True, default=str))
        return
    if table is None:
        print(json.dumps(payload, indent=2, sort_keys=True, default=str))
    elif isinstance(table, str):
        print(table)
    elif table.empty:
        print("(no rows)")
    else:
        print(table.to_string(index=False))


def _difficulty_thresholds(args: argparse.Namespace) -> DifficultyThresholds:
    return DifficultyThresholds(args.tau_ts, args.tau_lc, args.tau_bc, args.factor)


def _curriculum(args: argparse.Namespace) -> CurriculumConfig:
    return CurriculumConfig(args.tau_min, args.tau_max, adaptive=not args.fixed)


def _selection(args: argparse.Namespace, opts: GlobalOptions) -> tuple[DatasetManifest, PseudoSelection]:
    manifest = DatasetManifest.load(args.manifest)
    raw, missing = load_predictions(manifest, args.predictions)
    if missing:
        logger.warning("%d image(s) have no prediction file; treated as zero detections", len(missing))
    return manifest, select_pseudo_labels(
        manifest, raw, _curriculum(args), _difficulty_thresholds(args), pre_resize=args.pre_resize, jobs=opts.jobs
    )


def _threshold_frame(report: dict[str, Any]) -> pd.DataFrame:
    rows = [{"category": c, **v} for c, v in report["per_category"].items()]
    return pd.DataFrame(rows, columns=["category", "N_c", "sigma", "tau"])


# =========================
# Subcommands
# =========================

def cmd_validate(args: argparse.Namespace, opts: GlobalOptions) -> int:
    """Dataset sanity: images decode, label files parse (core-annotations)."""
    report = validate_dataset(DatasetManifest.load(args.manifest), jobs=opts.jobs)
    table = pd.DataFrame(report.errors, columns=["path", "error"]) if report.errors else (
        f"ok: {report.images} images, {report.boxes} boxes"
    )
    _emit(args, report.to_dict(), table)
    return 0 if report.ok else 1


def cmd_difficulty(args: argparse.Namespace, opts: GlobalOptions) -> int:
    """Partition boxes into st / lc / cb / se by size, contrast and clutter cut-offs (difficulty)."""
    manifest = DatasetManifest.load(args.manifest)
    boxes = None
    if args.predictions:
        boxes, _ = load_predictions(manifest, args.predictions)
    report = partition_dataset(manifest, boxes, _difficulty_thresholds(args), pre_resize=args.pre_resize,
                               jobs=opts.jobs)
    payload = {"counts": report.counts, **report.to_dict()}
    table = report.to_frame() if args.per_box else pd.DataFrame([report.counts])
    _emit(args, payload, table)
    return 0


def cmd_thresholds(args: argparse.Namespace, opts: GlobalOptions) -> int:
    """Per-category thresholds tau_c = max(sigma_c / max(sigma) * tau_max, tau_min) for one period (curriculum)."""
    _, sel = _selection(args, opts)
    if args.decisions:
        write_decisions(args.decisions, sel.result.decisions)
    _emit(args, sel.report, _threshold_frame(sel.report))
    return 0


def cmd_filter(args: argparse.Namespace, opts: GlobalOptions) -> int:
    """Write the pseudo labels with p > tau_c as label files (curriculum)."""
    manifest, sel = _selection(args, opts)
    out = Path(args.out)
    entries = []
    for entry in manifest.entries:
        rel = mirrored(entry.image, ".txt")
        save_labels(sel.accepted.get(entry.image, []), out / rel)
        entries.append(ManifestEntry(str(manifest.image_path(entry).resolve()), rel.as_posix()))
    accepted = DatasetManifest(out, tuple(entries), manifest.split, manifest.domain)
    accepted.save(out / "manifest.json", relative_root=True)
    (out / "thresholds.json").write_text(json.dumps(sel.report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_decisions(out / "decisions.jsonl", sel.result.decisions)
    payload = {"raw": sel.raw_count, "candidates": sel.candidate_count, "accepted": sel.accepted_count,
               "thresholds": sel.report}
    _emit(args, payload, pd.DataFrame([{k: payload[k] for k in ("raw", "candidates", "accepted")}]))
    return 0


def cmd_crops(args: argparse.Namespace, opts: GlobalOptions) -> int:
    """Build the saliency-masked crop library; report kept / degraded / excluded crops (mca-augment)."""
    crops = DatasetManifest.load(args.manifest)
    if args.from_dataset:
        crops = crop_library_from_dataset(crops, args.from_dataset, min_width=args.min_width)
    _, report = build_crop_library(crops, args.external_masks, allow_degraded=args.allow_degraded, jobs=opts.jobs)
    payload = report.to_dict()
    _emit(args, payload, pd.DataFrame([{k: payload[k] for k in ("kept", "degraded", "excluded")}]))
    return 0


def cmd_augment(args: argparse.Namespace, opts: GlobalOptions) -> int:
    """Masked copy-paste: size-matched crops Poisson-blended onto pseudo-labelled targets (mca-augment)."""
    target = DatasetManifest.load(args.manifest)
    library, _ = build_crop_library(DatasetManifest.load(args.crops), args.external_masks,
                                    allow_degraded=args.allow_degraded, jobs=opts.jobs)
    config = AugmentConfig(
        pastes=args.pastes,
        seed=opts.seed,
        max_retries=args.max_retries,
        overlap_iou=args.overlap_iou,
        allow_overlap=args.allow_overlap,
        allow_degraded=args.allow_degraded,
        blend=args.blend,
        size_fallback=args.size_fallback,
    )
    result = augment_dataset(target, library, config, args.out, jobs=opts.jobs)
    summary = result.summary()
    _emit(args, {**summary, "error_entries": result.errors}, pd.DataFrame([summary]))
    return 0


def cmd_eval(args: argparse.Namespace, opts: GlobalOptions) -> int:
    """mAP@0.5 of a prediction directory against a ground-truth manifest (evaluation)."""
    report = map50(DatasetManifest.load(args.manifest), args.predictions, mode=args.mode)
    payload = report.to_dict()
    if not args.pr_curve:
        payload.pop("pr_curve", None)
        payload.pop("matches", None)
    table = pd.DataFrame([{
        "map50": display_round(report.map50), "tp": report.result.tp, "fp": report.result.fp,
        "fn": report.result.fn, "n_gt": report.result.n_gt,
    }])
    _emit(args, payload, report.result.pr_frame() if args.pr_curve else table)
    return 0


def cmd_gain(args: argparse.Namespace, opts: GlobalOptions) -> int:
    """Adaptation gain rho = (a - s) / (o - s) * 100 (evaluation)."""
    if args.table:
        frame = gain_table()
        _emit(args, {"rows": frame.to_dict(orient="records"), "max_deviation": float(frame["deviation"].max())},
              frame)
        return 0
    if args.adapted is None or args.source is None or args.oracle is None:
        raise ConfigurationError("gain needs --adapted, --source and --oracle (or --table)")
    report = gain_report(AdaptationGainInputs(args.adapted, args.source, args.oracle))
    _emit(args, report, pd.DataFrame([report]))
    return 0


def cmd_synth(args: argparse.Namespace, opts: GlobalOptions) -> int:
    """Render a synthetic domain, or a disc crop set with --crops (synth-fixtures)."""
    if args.crops:
        manifest = generate_crops(args.count, args.out, seed=opts.seed, write_masks=args.write_masks)
    else:
        spec = SceneSpec.load(args.spec) if args.spec else PRESETS[args.preset]
        if args.seed is not None:
            spec = SceneSpec.from_dict({**spec.to_dict(), "seed": opts.seed})
        manifest = generate_domain(spec, args.count, args.out, domain=args.domain, split=args.split, jobs=opts.jobs)
    payload = {"images": len(manifest), "root": str(manifest.root)}
    _emit(args, payload, pd.DataFrame([payload]))
    return 0


def cmd_stub_detect(args: argparse.Namespace, opts: GlobalOptions) -> int:
    """Corrupted-ground-truth predictions (synth-fixtures)."""
    corruption = Corruption(args.confidence, args.drop_rate, args.jitter_px, args.fp_rate)
    out = stub_detect(DatasetManifest.load(args.manifest), corruption, opts.seed, args.out, jobs=opts.jobs)
    payload = {"out": str(out), **corruption.to_dict()}
    _emit(args, payload, pd.DataFrame([payload]))
    return 0


def cmd_run(args: argparse.Namespace, opts: GlobalOptions) -> int:
    """Staged self-training S1 -> S2.1 -> S2.2 -> S3 with loss L_s + alpha * L_u + beta * L_t (orchestrator)."""
    if opts.config is None:
        raise ConfigurationError("run needs --config <pipeline.json>")
    data = load_config_file(opts.config)
    data["seed"] = opts.seed
    data["jobs"] = opts.jobs
    if args.workdir is not None or "workdir" not in data:
        data["workdir"] = str(opts.workdir.resolve())
    config = PipelineConfig.from_dict(data, base_dir=opts.config.resolve().parent)
    result = run_pipeline(config, args.state, stop_after=args.stop_after)
    frame = result.summary_frame()
    payload = {
        "completed": list(result.state.completed),
        "final_model": str(result.final_model) if result.final_model else None,
        "stages": frame.to_dict(orient="records"),
    }
    _emit(args, payload, frame)
    return 0


# =========================
# Parser
# =========================

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON config file (global options, pipeline settings)")
    p.add_argument("--seed", type=int, help="Seed (env NSN_SEED)")
    p.add_argument("-v", "--verbose", action="count", default=None, help="-v info, -vv debug")
    p.add_argument("--jobs", type=int, help="Worker threads (env NSN_JOBS)")
    p.add_argument("--workdir", help="Pipeline working directory (env NSN_WORKDIR)")
    p.add_argument("--json", action="store_true", help="One JSON document on stdout")
    return p


def _difficulty_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tau-ts", type=float, default=DEFAULT_TAU_TS)
    p.add_argument("--tau-lc", type=float, default=DEFAULT_TAU_LC)
    p.add_argument("--tau-bc", type=float, default=DEFAULT_TAU_BC)
    p.add_argument("--factor", type=float, default=DEFAULT_BG_FACTOR, help="Background window scale")
    p.add_argument("--pre-resize", type=int, help="Square side the image is resized to before measuring")


def _curriculum_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="Target manifest")
    p.add_argument("--predictions", required=True, help="Directory of confidence-suffixed label files")
    p.add_argument("--tau-min", type=float, default=DEFAULT_TAU_MIN)
    p.add_argument("--tau-max", type=float, default=DEFAULT_TAU_MAX)
    p.add_argument("--fixed", action="store_true", help="Constant tau_min cut instead of adaptive thresholds")
    _difficulty_args(p)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="nsn-cli", description="Noise suppression network toolchain (offline).")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, fn: Callable[[argparse.Namespace, GlobalOptions], int]) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=fn.__doc__, description=fn.__doc__)
        p.set_defaults(func=fn)
        return p

    p = add("validate", cmd_validate)
    p.add_argument("--manifest", required=True)

    p = add("difficulty", cmd_difficulty)
    p.add_argument("--manifest", required=True)
    p.add_argument("--predictions", help="Score these boxes instead of the manifest labels")
    p.add_argument("--per-box", action="store_true", help="Table of every box instead of counts")
    _difficulty_args(p)

    p = add("thresholds", cmd_thresholds)
    _curriculum_args(p)
    p.add_argument("--decisions", help="Write per-candidate decisions (JSON lines) here")

    p = add("filter", cmd_filter)
    _curriculum_args(p)
    p.add_argument("--out", required=True)

    p = add("crops", cmd_crops)
    p.add_argument("--manifest", required=True, help="Crop manifest, or a labelled dataset with --from-dataset")
    p.add_argument("--external-masks", help="Directory of <stem>.mask.png files")
    p.add_argument("--allow-degraded", action="store_true")
    p.add_argument("--from-dataset", metavar="OUT", help="Cut ground-truth boxes of --manifest into OUT first")
    p.add_argument("--min-width", type=int, default=CROP_SOURCE_MIN_WIDTH)

    p = add("augment", cmd_augment)
    p.add_argument("--manifest", required=True, help="Target manifest with pseudo-label files")
    p.add_argument("--crops", required=True, help="Crop manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--external-masks")
    p.add_argument("--allow-degraded", action="store_true")
    p.add_argument("--pastes", type=int, default=DEFAULT_PASTES)
    p.add_argument("--max-retries", type=int, default=DEFAULT_RETRIES)
    p.add_argument("--overlap-iou", type=float, default=DEFAULT_OVERLAP_IOU)
    p.add_argument("--allow-overlap", action="store_true")
    p.add_argument("--blend", choices=["poisson", "hard"], default="poisson")
    p.add_argument("--size-fallback", action="store_true")

    p = add("eval", cmd_eval)
    p.add_argument("--manifest", required=True, help="Ground-truth manifest")
    p.add_argument("--predictions", required=True)
    p.add_argument("--mode", choices=MODES, default="all-point")
    p.add_argument("--pr-curve", action="store_true")

    p = add("gain", cmd_gain)
    p.add_argument("--adapted", type=float)
    p.add_argument("--source", type=float)
    p.add_argument("--oracle", type=float)
    p.add_argument("--table", action="store_true", help="Recompute every published gain row")

    p = add("synth", cmd_synth)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--spec", help="SceneSpec JSON")
    g.add_argument("--preset", choices=sorted(PRESETS), default="source")
    g.add_argument("--crops", action="store_true", help="Disc-on-ground crop set")
    p.add_argument("--write-masks", action="store_true")
    p.add_argument("--domain", choices=["source", "target"], default="source")
    p.add_argument("--split", choices=["train", "val", "test"], default="train")

    p = add("stub-detect", cmd_stub_detect)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--confidence", default="constant:1.0", help="constant:v | uniform:a:b | quality:q")
    p.add_argument("--drop-rate", type=float, default=0.0)
    p.add_argument("--jitter-px", type=int, default=0)
    p.add_argument("--fp-rate", type=float, default=0.0)

    p = add("run", cmd_run)
    p.add_argument("--state", help="Checkpoint file (default <workdir>/state.json)")
    p.add_argument("--stop-after", choices=STAGE_ORDER)
    return parser


def dispatch(argv: Sequence[str] | None = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        opts = resolve_global_options(
            config=args.config, seed=args.seed, verbosity=args.verbose, jobs=args.jobs, workdir=args.workdir
        )
    except NsnError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1

    level = {0: logging.WARNING, 1: logging.INFO}.get(opts.verbosity, logging.DEBUG)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args, opts)
    except (NsnError, ValueError) as e:
        logger.debug("command %s failed", args.command, exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
