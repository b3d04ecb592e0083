# src/nsn_engine/stub_adapter.py
"""
Stub detector/trainer speaking the adapter protocol, for desk-scale pipeline runs.

    nsn-stub-adapter --oracle target.json [--oracle val.json] [--seed N] [--fp-rate R] infer --request req.json
    nsn-stub-adapter train --request req.json

A stub model is a small JSON artifact {"kind", "role", "quality", "generation"}.
Source training gives quality 0.4 (large) / 0.3 (small). Adaptation training gives
    q = min(0.95, q_base + 0.2 + 0.4 * f)
where q_base is the base model's quality (the role's source quality when starting from scratch)
and f is the fraction of target images in the training manifest carrying accepted pseudo
labels. Inference looks the image up in the oracle manifests and corrupts its ground truth
with Corruption.for_quality(q); the per-image stream is keyed by the oracle entry path, so a
better model detects a superset of boxes with higher confidences.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from nsn_engine.adapters import result_path
from nsn_engine.annotations import (
    DatasetManifest,
    LabelKind,
    ManifestEntry,
    load_entry_labels,
    load_labels,
    save_labels,
)
from nsn_engine.augment import image_stream
from nsn_engine.errors import NsnError
from nsn_engine.imaging import read_image_size
from nsn_engine.synth import Corruption, corrupt_boxes

logger = logging.getLogger(__name__)

MODEL_KIND = "nsn-stub-model"
SOURCE_QUALITY = {"large": 0.4, "small": 0.3}
MAX_QUALITY = 0.95


class StubModelError(NsnError, ValueError):
    pass


def read_model(path: str | Path) -> dict[str, Any]:
    try:
        model = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise StubModelError(f"cannot read stub model {path}: {e}") from e
    if model.get("kind") != MODEL_KIND:
        raise StubModelError(f"{path} is not a stub model")
    return model


def labelled_fraction(train_manifest: DatasetManifest, provenance_dir: Path | None) -> float:
    """Share of target entries (labels under provenance_dir) holding at least one pseudo label."""
    if provenance_dir is None:
        return 0.0
    prov = provenance_dir.resolve()
    target = []
    for entry in train_manifest.entries:
        lp = train_manifest.label_path(entry)
        if lp is not None and lp.resolve().is_relative_to(prov):
            target.append(lp)
    if not target:
        return 0.0
    with_pseudo = sum(1 for lp in target if any(b.kind is LabelKind.PSEUDO for b in load_labels(lp)))
    return with_pseudo / len(target)


def trained_quality(role: str, base: dict[str, Any] | None, fraction: float | None) -> float:
    """fraction None means source training; otherwise an adaptation step from base (or scratch)."""
    q = float(base["quality"]) if base is not None else SOURCE_QUALITY[role]
    if fraction is None:
        return q
    return min(MAX_QUALITY, q + 0.2 + 0.4 * fraction)


def train(request: dict[str, Any], request_path: Path) -> Path:
    role = request["model_role"]
    if role not in SOURCE_QUALITY:
        raise StubModelError(f"unknown model role {role!r}")
    base = read_model(request["base_model"]) if request.get("base_model") else None
    prov = request.get("label_provenance_dir")
    fraction = None
    if prov:
        fraction = labelled_fraction(DatasetManifest.load(request["train_manifest"]), Path(prov))

    model = {
        "kind": MODEL_KIND,
        "role": role,
        "quality": round(trained_quality(role, base, fraction), 6),
        "generation": (int(base["generation"]) if base is not None else 0) + int(fraction is not None),
    }
    out = Path(request["output_model"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(model, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    result_path(request_path).write_text(json.dumps({"model": str(out)}) + "\n", encoding="utf-8")
    logger.info("trained %s stub model: quality %.3f (labelled fraction %s)", role, model["quality"], fraction)
    return out


def _oracle_index(paths: Sequence[str]) -> dict[Path, tuple[DatasetManifest, ManifestEntry]]:
    index: dict[Path, tuple[DatasetManifest, ManifestEntry]] = {}
    for p in paths:
        manifest = DatasetManifest.load(p)
        for entry in manifest.entries:
            index[manifest.image_path(entry).resolve()] = (manifest, entry)
    return index


def infer(request: dict[str, Any], oracles: Sequence[str], seed: int, fp_rate: float) -> int:
    model = read_model(request["model"])
    corruption = Corruption.for_quality(float(model["quality"]), fp_rate)
    index = _oracle_index(oracles)
    out_dir = Path(request["output_dir"])
    total = 0
    for item in request["images"]:
        found = index.get(Path(item["path"]).resolve())
        if found is None:
            logger.warning("no oracle entry for %s; writing an empty prediction", item["path"])
            preds = []
        else:
            manifest, entry = found
            gt = load_entry_labels(manifest, entry)
            dims = read_image_size(manifest.image_path(entry))
            preds = corrupt_boxes(gt, corruption, image_stream(seed, entry.image), dims)
        save_labels(preds, out_dir / item["prediction"])
        total += len(preds)
    return total


def main(argv: Sequence[str] | None = None) -> None:
    ap = argparse.ArgumentParser(prog="nsn-stub-adapter", description="Stub detector/trainer adapter")
    ap.add_argument("--oracle", action="append", default=[], help="Ground-truth manifest the detector reads")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--fp-rate", type=float, default=0.0, help="Expected false positives per image at quality 0")
    ap.add_argument("verb", choices=["infer", "train"])
    ap.add_argument("--request", required=True)
    args = ap.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    request_path = Path(args.request)
    try:
        request = json.loads(request_path.read_text(encoding="utf-8"))
        if args.verb == "train":
            train(request, request_path)
        else:
            n = infer(request, args.oracle, args.seed, args.fp_rate)
            logger.info("wrote %d predictions for %d images", n, len(request["images"]))
    except (NsnError, OSError, KeyError, json.JSONDecodeError) as e:
        print(f"stub adapter {args.verb} failed: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
