import json

import pytest

from nsn_engine.cli import build_parser, dispatch


def run_json(capsys, *argv):
    code = dispatch([*argv, "--json"])
    out = capsys.readouterr().out
    return code, json.loads(out) if out.strip() else None


def test_gain_json(capsys):
    code, payload = run_json(capsys, "gain", "--adapted", "46.9", "--source", "39.9", "--oracle", "89.5")
    assert code == 0
    assert payload["rho"] == pytest.approx(14.1129, abs=1e-4)
    assert payload["rho_display"] == 14.1


def test_gain_undefined_exits_one(capsys):
    assert dispatch(["gain", "--adapted", "50", "--source", "50", "--oracle", "50"]) == 1
    assert "undefined" in capsys.readouterr().err


def test_gain_table(capsys):
    code, payload = run_json(capsys, "gain", "--table")
    assert code == 0
    assert payload["max_deviation"] <= 0.1


def test_synth_validate_difficulty_eval(tmp_path, capsys):
    data = tmp_path / "d"
    code, payload = run_json(capsys, "synth", "--count", "3", "--out", str(data), "--preset", "target",
                             "--domain", "target")
    assert code == 0 and payload["images"] == 3

    code, report = run_json(capsys, "validate", "--manifest", str(data / "manifest.json"))
    assert code == 0 and report["errors"] == 0

    code, diff = run_json(capsys, "difficulty", "--manifest", str(data / "manifest.json"))
    assert code == 0
    assert sum(diff["counts"].values()) == report["boxes"]

    preds = tmp_path / "p"
    code, _ = run_json(capsys, "stub-detect", "--manifest", str(data / "manifest.json"), "--out", str(preds))
    assert code == 0
    code, ev = run_json(capsys, "eval", "--manifest", str(data / "manifest.json"), "--predictions", str(preds))
    assert code == 0 and ev["map50"] == 100.0

    code, th = run_json(capsys, "thresholds", "--manifest", str(data / "manifest.json"),
                        "--predictions", str(preds))
    assert code == 0
    assert set(th["per_category"]) == {"st", "lc", "cb", "se"}


def test_validate_broken_manifest_exits_one(tmp_path, capsys):
    data = tmp_path / "d"
    dispatch(["synth", "--count", "2", "--out", str(data)])
    (data / "images" / "000001.png").unlink()
    capsys.readouterr()
    code, report = run_json(capsys, "validate", "--manifest", str(data / "manifest.json"))
    assert code == 1
    assert report["errors"] == 1


def test_missing_manifest_is_a_clean_error(tmp_path, capsys):
    assert dispatch(["validate", "--manifest", str(tmp_path / "nope.json")]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as ei:
        build_parser().parse_args(["bogus"])
    assert ei.value.code == 2


def test_run_requires_config(capsys):
    assert dispatch(["run"]) == 1
    assert "--config" in capsys.readouterr().err


def test_filter_output_feeds_augment(tmp_path, capsys):
    data, preds, accepted = tmp_path / "d", tmp_path / "p", tmp_path / "acc"
    dispatch(["synth", "--count", "3", "--out", str(data), "--preset", "target", "--domain", "target"])
    dispatch(["synth", "--crops", "--count", "4", "--out", str(tmp_path / "crops"), "--write-masks"])
    dispatch(["stub-detect", "--manifest", str(data / "manifest.json"), "--out", str(preds)])
    capsys.readouterr()

    code, sel = run_json(capsys, "filter", "--manifest", str(data / "manifest.json"), "--predictions", str(preds),
                         "--out", str(accepted))
    assert code == 0
    assert sel["accepted"] == sel["candidates"]
    assert (accepted / "manifest.json").exists()

    code, aug = run_json(capsys, "augment", "--manifest", str(accepted / "manifest.json"),
                         "--crops", str(tmp_path / "crops" / "crops.json"),
                         "--external-masks", str(tmp_path / "crops" / "masks"), "--out", str(tmp_path / "aug"))
    assert code == 0
    assert aug["images"] == 3
    assert aug["errors"] == 0


@pytest.mark.parametrize("name, fragment", [
    ("difficulty", "(difficulty)"),
    ("thresholds", "tau_c = max(sigma_c / max(sigma) * tau_max, tau_min)"),
    ("filter", "p > tau_c"),
    ("augment", "Poisson"),
    ("gain", "rho = (a - s) / (o - s) * 100"),
    ("run", "L_s + alpha * L_u + beta * L_t"),
])
def test_subcommand_help_names_its_method_step(capsys, name, fragment):
    with pytest.raises(SystemExit) as ei:
        build_parser().parse_args([name, "--help"])
    assert ei.value.code == 0
    assert fragment in " ".join(capsys.readouterr().out.split())
