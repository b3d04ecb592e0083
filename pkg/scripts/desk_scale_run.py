#!/usr/bin/env python3
"""
Desk-scale end-to-end run: synthesize source/target/val domains and a crop library,
then drive the full stage sequence with the stub detector and trainer adapters.

Usage:
  python scripts/desk_scale_run.py --out desk_run
  python scripts/desk_scale_run.py --out desk_run --resume
  python scripts/desk_scale_run.py --out desk_run --source 50 --target 25 --jobs 4

Artifacts: <out>/data (datasets), <out>/work (periods, models, reports, state.json)
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parent.parent
SRC = PROJECT_ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from nsn_engine.errors import NsnError  # noqa: E402
from nsn_engine.orchestrator import PipelineConfig, run_pipeline  # noqa: E402
from nsn_engine.synth import SOURCE_SCENE, TARGET_SCENE, generate_crops, generate_domain  # noqa: E402


def build_data(root: Path, n_source: int, n_target: int, n_val: int, n_crops: int, seed: int, jobs: int) -> None:
    generate_domain(replace(SOURCE_SCENE, seed=seed), n_source, root / "source", jobs=jobs)
    generate_domain(replace(TARGET_SCENE, seed=seed + 1), n_target, root / "target", domain="target", jobs=jobs)
    generate_domain(replace(TARGET_SCENE, seed=seed + 2), n_val, root / "val", domain="target", split="val",
                    jobs=jobs)
    generate_crops(n_crops, root / "crops", seed=seed, write_masks=True)


def write_config(out: Path, seed: int, jobs: int) -> Path:
    data = out / "data"
    stub = [sys.executable, "-m", "nsn_engine.stub_adapter"]
    oracles = ["--oracle", str(data / "target" / "manifest.json"), "--oracle", str(data / "val" / "manifest.json")]
    cfg = {
        "workdir": str(out / "work"),
        "source_manifest": str(data / "source" / "manifest.json"),
        "target_manifest": str(data / "target" / "manifest.json"),
        "val_manifest": str(data / "val" / "manifest.json"),
        "crop_manifest": str(data / "crops" / "crops.json"),
        "external_masks": str(data / "crops" / "masks"),
        "detector": stub + oracles,
        "trainer": stub,
        "seed": seed,
        "jobs": jobs,
    }
    path = out / "pipeline.json"
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def main() -> None:
    ap = argparse.ArgumentParser(description="Synthesize a small world and run every stage with stub adapters")
    ap.add_argument("--out", type=Path, default=PROJECT_ROOT / "desk_run")
    ap.add_argument("--source", type=int, default=200, help="source-domain images")
    ap.add_argument("--target", type=int, default=100, help="target-domain images")
    ap.add_argument("--val", type=int, default=50, help="held-out target images")
    ap.add_argument("--crops", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--resume", action="store_true", help="keep existing data and continue from state.json")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    # stub adapters run as subprocesses and import from src/
    os.environ["PYTHONPATH"] = os.pathsep.join(p for p in (str(SRC), os.environ.get("PYTHONPATH", "")) if p)

    out = args.out.resolve()
    t0 = time.perf_counter()
    if not (args.resume and (out / "data" / "target" / "manifest.json").exists()):
        build_data(out / "data", args.source, args.target, args.val, args.crops, args.seed, args.jobs)
        print(f"data ready in {time.perf_counter() - t0:.1f}s")

    try:
        config = PipelineConfig.load(write_config(out, args.seed, args.jobs))
        result = run_pipeline(config)
    except NsnError as e:
        print(f"error: {e}", file=sys.stderr)
        sys.exit(1)

    print(result.summary_frame().to_string(index=False))
    print(f"final model: {result.final_model}")
    print(f"total {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
