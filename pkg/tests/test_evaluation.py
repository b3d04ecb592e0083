import numpy as np
import pytest

from nsn_engine.annotations import (
    BBox,
    DatasetManifest,
    LabeledBox,
    ManifestEntry,
    iou,
    pseudo,
    save_labels,
)
from nsn_engine.errors import DetectionInputError, UndefinedGainError
from nsn_engine.evaluation import (
    PUBLISHED_GAIN_ROWS,
    AdaptationGainInputs,
    adaptation_gain,
    average_precision,
    display_round,
    gain_report,
    gain_table,
    map50,
)
from nsn_engine.imaging import write_image


def gt_box(cx, cy, w=0.2, h=0.2):
    return LabeledBox(BBox(cx, cy, w, h))


def brute_force_ap(gt, dets, thr=0.5):
    """Re-match from scratch at every distinct threshold, then integrate the precision envelope."""
    n_gt = sum(len(v) for v in gt.values())
    flat = sorted(
        ((d.confidence, img, i) for img, ds in dets.items() for i, d in enumerate(ds)),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    points = []
    for t in sorted({c for c, _, _ in flat}, reverse=True):
        used = {img: set() for img in gt}
        tp = fp = 0
        for c, img, i in flat:
            if c < t:
                continue
            best, best_v = None, -1.0
            for j, g in enumerate(gt.get(img, [])):
                v = iou(dets[img][i].bbox, g.bbox)
                if j not in used.setdefault(img, set()) and v >= thr and v > best_v:
                    best, best_v = j, v
            if best is None:
                fp += 1
            else:
                used[img].add(best)
                tp += 1
        points.append((tp / n_gt, tp / (tp + fp)))
    ap, prev_r = 0.0, 0.0
    for k, (r, _) in enumerate(points):
        ap += (r - prev_r) * max(p for _, p in points[k:])
        prev_r = r
    return ap


def make_instance(rng):
    gt, dets = {}, {}
    for i in range(int(rng.integers(1, 11))):
        img = f"img{i}.png"
        gt[img] = [gt_box(*rng.uniform(0.2, 0.8, size=2), *rng.uniform(0.05, 0.3, size=2))
                   for _ in range(int(rng.integers(0, 6)))]
        ds = []
        for g in gt[img]:
            if rng.random() < 0.7:
                b = g.bbox
                jitter = rng.normal(0, 0.02, size=2)
                ds.append(pseudo(BBox(float(np.clip(b.cx + jitter[0], 0, 1)),
                                      float(np.clip(b.cy + jitter[1], 0, 1)), b.w, b.h),
                                 float(rng.choice([0.3, 0.5, 0.7, 0.9]))))
        for _ in range(int(rng.integers(0, 3))):
            ds.append(pseudo(BBox(*rng.uniform(0.1, 0.9, size=2), 0.1, 0.1), float(rng.choice([0.3, 0.5, 0.7, 0.9]))))
        dets[img] = ds[:5]
    return gt, dets


# =========================
# Average precision
# =========================

def test_single_match_both_modes():
    gt = {"a": [gt_box(0.5, 0.5)]}
    det = {"a": [pseudo(BBox(0.5, 0.505, 0.2, 0.2), 0.9)]}
    assert average_precision(gt, det).ap == 1.0
    assert average_precision(gt, det, mode="11-point").ap == 1.0


def test_low_iou_is_a_miss():
    gt = {"a": [gt_box(0.25, 0.5, 0.5, 0.5)]}
    det = {"a": [pseudo(BBox(0.5, 0.5, 0.5, 0.5), 0.9)]}
    result = average_precision(gt, det)
    assert result.ap == 0.0
    assert (result.tp, result.fp, result.fn) == (0, 1, 1)


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(2024)
    checked = 0
    for _ in range(200):
        gt, dets = make_instance(rng)
        if not sum(len(v) for v in gt.values()) or not sum(len(v) for v in dets.values()):
            continue
        assert abs(average_precision(gt, dets).ap - brute_force_ap(gt, dets)) <= 1e-9
        checked += 1
    assert checked > 100


def test_ap_depends_only_on_confidence_order():
    rng = np.random.default_rng(7)
    for _ in range(200):
        gt, dets = make_instance(rng)
        squashed = {img: [pseudo(d.bbox, 0.1 + 0.5 * d.confidence ** 3) for d in ds] for img, ds in dets.items()}
        for mode in ("all-point", "11-point"):
            a = average_precision(gt, dets, mode=mode).ap
            b = average_precision(gt, squashed, mode=mode).ap
            assert abs(a - b) <= 1e-12


def test_duplicate_correct_detections_never_exceed_one():
    rng = np.random.default_rng(11)
    for _ in range(100):
        gt, dets = make_instance(rng)
        doubled = {img: list(dets.get(img, [])) + [pseudo(g.bbox, 1.0) for g in gs for _ in range(2)]
                   for img, gs in gt.items()}
        for mode in ("all-point", "11-point"):
            assert 0.0 <= average_precision(gt, doubled, mode=mode).ap <= 1.0

    gt = {"a": [gt_box(0.5, 0.5)]}
    dupes = [pseudo(gt["a"][0].bbox, c) for c in (0.9, 0.5, 0.3)]
    assert average_precision(gt, {"a": dupes}).ap == 1.0


def test_pr_curve_has_one_point_per_threshold():
    gt = {"a": [gt_box(0.3, 0.3), gt_box(0.7, 0.7)]}
    det = {"a": [pseudo(gt["a"][0].bbox, 0.9), pseudo(BBox(0.1, 0.9, 0.1, 0.1), 0.9), pseudo(gt["a"][1].bbox, 0.4)]}
    curve = average_precision(gt, det).pr_curve
    assert [p.threshold for p in curve] == [0.9, 0.4]
    assert curve[0].precision == 0.5 and curve[-1].recall == 1.0


def test_detection_without_confidence_rejected():
    with pytest.raises(DetectionInputError):
        average_precision({"a": [gt_box(0.5, 0.5)]}, {"a": [gt_box(0.5, 0.5)]})


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        average_precision({}, {}, mode="coco")


# =========================
# Dataset mAP
# =========================

def make_eval_fixture(root, n=3):
    entries = []
    for i in range(n):
        write_image(root / "images" / f"{i}.png", np.zeros((32, 32, 3), dtype=np.uint8))
        save_labels([gt_box(0.5, 0.5, 0.25, 0.25)], root / "labels" / f"{i}.txt")
        entries.append(ManifestEntry(f"images/{i}.png", f"labels/{i}.txt"))
    return DatasetManifest(root, tuple(entries), split="val", domain="target")


def test_perfect_predictions_score_exactly_100(tmp_path):
    manifest = make_eval_fixture(tmp_path)
    for i in range(3):
        save_labels([pseudo(BBox(0.5, 0.5, 0.25, 0.25), 1.0)], tmp_path / "preds" / "images" / f"{i}.txt")
    report = map50(manifest, tmp_path / "preds")
    assert report.map50 == 100.0
    assert report.to_dict()["map50_display"] == 100.0


def test_missing_predictions_count_as_empty(tmp_path):
    manifest = make_eval_fixture(tmp_path)
    save_labels([pseudo(BBox(0.5, 0.5, 0.25, 0.25), 0.8)], tmp_path / "preds" / "0.txt")
    report = map50(manifest, tmp_path / "preds")
    assert report.missing_predictions == ["images/1.png", "images/2.png"]
    assert report.map50 == pytest.approx(100.0 / 3)
    assert report.to_dict()["per_image"] == {"images/0.png": {"tp": 1, "fp": 0}}


def test_no_detections_scores_zero(tmp_path):
    assert map50(make_eval_fixture(tmp_path), tmp_path / "empty").map50 == 0.0


# =========================
# Adaptation gain
# =========================

def test_gain_reference_values():
    assert gain_report(AdaptationGainInputs(46.9, 39.9, 89.5))["rho_display"] == 14.1
    assert gain_report(AdaptationGainInputs(41.1, 39.9, 89.5))["rho_display"] == 2.4
    rho = adaptation_gain(AdaptationGainInputs(61.5, 31.9, 89.1))
    assert rho == pytest.approx(51.748, abs=1e-3)
    assert display_round(rho) == 51.7
    assert adaptation_gain(AdaptationGainInputs(39.9, 39.9, 89.5)) == 0.0


def test_undefined_gain():
    with pytest.raises(UndefinedGainError):
        adaptation_gain(AdaptationGainInputs(40.0, 30.0, 30.0))


def test_gain_is_affine_invariant():
    base = adaptation_gain(AdaptationGainInputs(46.9, 39.9, 89.5))
    moved = adaptation_gain(AdaptationGainInputs(0.5 * 46.9 + 10, 0.5 * 39.9 + 10, 0.5 * 89.5 + 10))
    assert moved == pytest.approx(base)


def test_published_rows_reproduce_within_a_tenth():
    table = gain_table()
    assert len(table) == len(PUBLISHED_GAIN_ROWS)
    assert table["deviation"].max() <= 0.1


def test_display_round_is_half_up():
    assert display_round(0.25) == 0.3
    assert display_round(-0.25) == -0.3
    assert display_round(51.75) == 51.8
