"""End-to-end command-line tests through main(argv) against the in-process
service: artifact files, byte stability, resume, exit codes, and manifest
file-reference handling."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from domainscout.cli import (
    EXIT_OK, EXIT_PARTIAL, EXIT_UNAVAILABLE, EXIT_VALIDATION, main,
)
from domainscout.service import load_preset_descriptions, resolve_initial_descriptions

from test_search import REF_BEST, small_cfg
from test_service import synthetic_manifest


def write_manifest(tmp_path: Path, name: str = "manifest.json", **overrides) -> Path:
    path = tmp_path / name
    path.write_text(json.dumps(synthetic_manifest(**overrides)), encoding="utf-8")
    return path


def read(path: Path) -> str:
    return path.read_text(encoding="utf-8")


# ---------------------------------------------------------------------------
# investigate


def test_investigate_writes_artifacts(tmp_path, capsys):
    manifest = write_manifest(tmp_path)
    out = tmp_path / "out"
    code = main(["investigate", "--manifest", str(manifest), "--out", str(out)])
    assert code == EXIT_OK
    assert capsys.readouterr().out.strip() == f"class 0: {REF_BEST}"

    tree = json.loads(read(out / "class_0.tree.json"))
    assert tree["config_digest"] == small_cfg().digest()
    report = json.loads(read(out / "class_0.report.json"))
    assert report["best_description"] == REF_BEST
    summary = json.loads(read(out / "summary.json"))
    assert summary == {"classes": {"0": REF_BEST}, "partial": False,
                       "config_digest": small_cfg().digest()}


def test_investigate_artifacts_are_byte_stable(tmp_path):
    manifest = write_manifest(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["investigate", "--manifest", str(manifest), "--out", str(out_a)]) == EXIT_OK
    assert main(["investigate", "--manifest", str(manifest), "--out", str(out_b)]) == EXIT_OK
    for name in ("class_0.tree.json", "class_0.report.json", "summary.json"):
        assert read(out_a / name) == read(out_b / name), name


def test_investigate_partial_then_resume_round_trip(tmp_path, capsys):
    tight = write_manifest(tmp_path, name="tight.json",
                           budgets={"classify": 200})
    full = write_manifest(tmp_path, name="full.json")
    out = tmp_path / "out"

    code = main(["investigate", "--manifest", str(tight), "--out", str(out)])
    captured = capsys.readouterr()
    assert code == EXIT_PARTIAL
    assert "class 0: partial, no selection" in captured.out
    assert "PARTIAL" in captured.err
    assert json.loads(read(out / "summary.json"))["partial"] is True

    code = main(["investigate", "--manifest", str(full), "--out", str(out),
                 "--resume"])
    assert code == EXIT_OK
    assert json.loads(read(out / "summary.json"))["classes"]["0"] == REF_BEST

    # resumed artifacts match a from-scratch run byte for byte
    fresh = tmp_path / "fresh"
    main(["investigate", "--manifest", str(full), "--out", str(fresh)])
    assert read(out / "class_0.tree.json") == read(fresh / "class_0.tree.json")
    assert read(out / "summary.json") == read(fresh / "summary.json")


def test_investigate_resume_without_prior_artifacts_runs_fresh(tmp_path, capsys):
    manifest = write_manifest(tmp_path)
    out = tmp_path / "out"
    code = main(["investigate", "--manifest", str(manifest), "--out", str(out),
                 "--resume"])
    assert code == EXIT_OK
    assert json.loads(read(out / "summary.json"))["classes"]["0"] == REF_BEST


def test_investigate_inlines_universe_file_reference(tmp_path):
    world = synthetic_manifest()["universe"]
    (tmp_path / "world.json").write_text(json.dumps(world), encoding="utf-8")
    manifest = synthetic_manifest()
    del manifest["universe"]
    manifest["universe_file"] = "world.json"
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(manifest), encoding="utf-8")
    out = tmp_path / "out"
    assert main(["investigate", "--manifest", str(path), "--out", str(out)]) == EXIT_OK
    assert json.loads(read(out / "summary.json"))["classes"]["0"] == REF_BEST


def test_investigate_rejects_ref_and_inline_universe(tmp_path, capsys):
    manifest = synthetic_manifest()
    manifest["universe_file"] = "world.json"
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(manifest), encoding="utf-8")
    code = main(["investigate", "--manifest", str(path), "--out",
                 str(tmp_path / "out")])
    assert code == EXIT_VALIDATION
    assert "both" in capsys.readouterr().err


def test_investigate_missing_manifest(tmp_path, capsys):
    code = main(["investigate", "--manifest", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "out")])
    assert code == EXIT_VALIDATION
    assert "not found" in capsys.readouterr().err


def test_investigate_validation_error_maps_to_exit_2(tmp_path, capsys):
    manifest = write_manifest(tmp_path, classes=[7])
    code = main(["investigate", "--manifest", str(manifest),
                 "--out", str(tmp_path / "out")])
    assert code == EXIT_VALIDATION
    assert "InvalidInput" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()  # nothing written on failure


def test_investigate_unknown_field_maps_to_exit_2(tmp_path, capsys):
    manifest = write_manifest(tmp_path, surprise=1)
    code = main(["investigate", "--manifest", str(manifest),
                 "--out", str(tmp_path / "out")])
    assert code == EXIT_VALIDATION
    assert "validation" in capsys.readouterr().err


def test_unreachable_server_maps_to_exit_4(tmp_path, capsys):
    manifest = write_manifest(tmp_path)
    code = main(["--server", "http://127.0.0.1:9", "investigate",
                 "--manifest", str(manifest), "--out", str(tmp_path / "out")])
    assert code == EXIT_UNAVAILABLE
    assert "service unreachable" in capsys.readouterr().err


def test_investigate_imagenet_preset_resolves_1000_roots(tmp_path, capsys):
    # zero budget: the run halts before any oracle call, which keeps this a
    # pure test of preset resolution through the full stack
    manifest = write_manifest(tmp_path, initial_descriptions="imagenet-1000",
                              budgets={"decode": 0})
    out = tmp_path / "out"
    code = main(["investigate", "--manifest", str(manifest), "--out", str(out)])
    assert code == EXIT_PARTIAL
    tree = json.loads(read(out / "class_0.tree.json"))
    # 999, not 1000: the category list really does contain both "Cardigan"
    # (the corgi) and "cardigan" (the sweater), which are one canonical text
    assert len(tree["nodes"]) == 999
    texts = {n["description"] for n in tree["nodes"]}
    assert "tench" in texts and "toilet tissue" in texts
    assert "cardigan" in texts


def test_preset_loader_guards():
    names = load_preset_descriptions("imagenet-1000")
    assert len(names) == 1000
    assert len(set(names)) == 1000
    resolved = resolve_initial_descriptions("imagenet-1000")
    assert len(resolved) == 1000
    single = resolve_initial_descriptions("red fox")
    assert [d.text for d in single] == ["red fox"]


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_prints_objective_json(tmp_path, capsys):
    manifest = write_manifest(tmp_path)
    code = main(["evaluate", "--manifest", str(manifest), "--class", "0",
                 "--description", "t01 t04"])
    assert code == EXIT_OK
    body = json.loads(capsys.readouterr().out)
    assert set(body) == {"relevance", "penalty", "lambda", "value"}
    assert body["lambda"] == 0.25
    assert body["relevance"] == pytest.approx(1.0)


def test_evaluate_bad_class_exits_2(tmp_path, capsys):
    manifest = write_manifest(tmp_path)
    code = main(["evaluate", "--manifest", str(manifest), "--class", "9",
                 "--description", "t01"])
    assert code == EXIT_VALIDATION


# ---------------------------------------------------------------------------
# brute-force


def test_brute_force_prints_winner(tmp_path, capsys):
    world = synthetic_manifest()["universe"]
    world_path = tmp_path / "world.json"
    world_path.write_text(json.dumps(world), encoding="utf-8")
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(small_cfg().to_dict()), encoding="utf-8")
    code = main(["brute-force", "--universe", str(world_path), "--class", "0",
                 "--config", str(cfg_path), "--seed-count", "16"])
    assert code == EXIT_OK
    body = json.loads(capsys.readouterr().out)
    assert body["best_description"] == "t01 t04"
    assert body["candidates_evaluated"] == 92


def test_brute_force_lambda_flag(tmp_path, capsys):
    world = synthetic_manifest()["universe"]
    world_path = tmp_path / "world.json"
    world_path.write_text(json.dumps(world), encoding="utf-8")
    code = main(["brute-force", "--universe", str(world_path), "--class", "0",
                 "--lambda", "10", "--seed-count", "16"])
    assert code == EXIT_OK
    assert json.loads(capsys.readouterr().out)["best_description"] == "t02"


# ---------------------------------------------------------------------------
# report


def investigated(tmp_path) -> Path:
    manifest = write_manifest(tmp_path)
    out = tmp_path / "out"
    assert main(["investigate", "--manifest", str(manifest), "--out", str(out)]) == EXIT_OK
    return out


def test_report_folds_in_sibling_report(tmp_path, capsys):
    out = investigated(tmp_path)
    capsys.readouterr()  # drop the investigate run's own output
    code = main(["report", "--tree", str(out / "class_0.tree.json")])
    assert code == EXIT_OK
    text = capsys.readouterr().out
    assert text.startswith("investigation report")
    assert f"best description: '{REF_BEST}'" in text   # from the sibling file
    assert "relevance progression by depth:" in text   # from the tree itself
    assert "[PARTIAL]" not in text


def test_report_renders_tree_without_sibling(tmp_path, capsys):
    out = investigated(tmp_path)
    lone = tmp_path / "lone.json"
    lone.write_text(read(out / "class_0.tree.json"), encoding="utf-8")
    code = main(["report", "--tree", str(lone)])
    assert code == EXIT_OK
    text = capsys.readouterr().out
    assert "iterations completed: 3" in text
    assert "best description:" not in text


def test_report_accepts_report_files_too(tmp_path, capsys):
    out = investigated(tmp_path)
    code = main(["report", "--tree", str(out / "class_0.report.json")])
    assert code == EXIT_OK
    assert f"best description: '{REF_BEST}'" in capsys.readouterr().out


def test_report_rejects_unrecognized_json(tmp_path, capsys):
    stray = tmp_path / "stray.json"
    stray.write_text('{"some": "thing"}', encoding="utf-8")
    code = main(["report", "--tree", str(stray)])
    assert code == EXIT_VALIDATION
    assert "neither a tree nor a report" in capsys.readouterr().err
