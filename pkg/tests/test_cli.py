import json

import numpy as np
import pytest

from gradprune.cli import main
from gradprune.container import read_container

SEED = "4"


@pytest.fixture(scope="module")
def toy_export(tmp_path_factory):
    root = tmp_path_factory.mktemp("export")
    tensors = root / "toy.st"
    stats = root / "calib.st"
    rc = main([
        "toy", "export", "--seed", SEED, "--sgd-steps", "300", "--n-calib", "32",
        "--out-tensors", str(tensors), "--out-stats", str(stats),
    ])
    assert rc == 0
    return tensors, stats


def run_json(capsys, argv):
    rc = main(argv)
    out = capsys.readouterr().out
    return rc, json.loads(out)


def test_prune_end_to_end_exact_row_cardinality(toy_export, tmp_path, capsys):
    tensors, stats = toy_export
    masks_path = tmp_path / "masks.st"
    report_path = tmp_path / "report.json"
    rc, report = run_json(capsys, [
        "prune", "--tensors", str(tensors), "--stats", str(stats),
        "--out-masks", str(masks_path), "--report", str(report_path),
    ])
    assert rc == 0
    masks = read_container(masks_path)
    for name in ("layers.0.fc.weight.mask", "layers.1.fc.weight.mask"):
        m = masks[name]
        assert m.dtype == np.uint8
        assert (m.sum(axis=1) == m.shape[1] // 2).all()
    assert report["perplexity"]["pruned"] > report["perplexity"]["dense"]
    assert report["metric"]["name"] == "gblm-l1"
    assert json.loads(report_path.read_text()) == report


def test_prune_nm_conformance_flag(toy_export, tmp_path, capsys):
    tensors, stats = toy_export
    rc, report = run_json(capsys, [
        "prune", "--tensors", str(tensors), "--stats", str(stats),
        "--sparsity", "2:4", "--out-masks", str(tmp_path / "nm.st"),
    ])
    assert rc == 0
    for layer in report["layers"].values():
        assert layer["nm_conformant"] is True
        assert layer["sparsity"] == 0.5


def test_prune_missing_stats_exits_2(toy_export, tmp_path, capsys):
    tensors, _ = toy_export
    rc = main(["prune", "--tensors", str(tensors), "--stats", str(tmp_path / "absent.st")])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_prune_reproducible_and_worker_independent(toy_export, tmp_path, capsys):
    tensors, stats = toy_export
    blobs, reports = [], []
    for i, workers in enumerate(("1", "4", "1")):
        masks_path = tmp_path / f"m{i}.st"
        rc, report = run_json(capsys, [
            "prune", "--tensors", str(tensors), "--stats", str(stats),
            "--out-masks", str(masks_path), "--workers", workers,
        ])
        assert rc == 0
        report.pop("timing_s")
        blobs.append(masks_path.read_bytes())
        reports.append(report)
    assert blobs[0] == blobs[1] == blobs[2]
    assert reports[0] == reports[1] == reports[2]


def test_prune_custom_metric_json(toy_export, tmp_path, capsys):
    tensors, stats = toy_export
    spec_path = tmp_path / "metric.json"
    spec_path.write_text(json.dumps({
        "name": "custom-wanda",
        "terms": [{"coefficient": 1.0, "weight_factor": "abs_w", "act_factor": "act_l2"}],
    }))
    rc, report = run_json(capsys, [
        "prune", "--tensors", str(tensors), "--stats", str(stats),
        "--metric-json", str(spec_path),
    ])
    assert rc == 0
    assert report["metric"]["name"] == "custom-wanda"


def test_toy_eval_with_masks(toy_export, tmp_path, capsys):
    tensors, stats = toy_export
    masks_path = tmp_path / "m.st"
    rc, prune_report = run_json(capsys, [
        "prune", "--tensors", str(tensors), "--stats", str(stats),
        "--out-masks", str(masks_path),
    ])
    assert rc == 0
    rc, dense = run_json(capsys, ["toy", "eval", "--tensors", str(tensors)])
    assert rc == 0
    rc, pruned = run_json(capsys, ["toy", "eval", "--tensors", str(tensors), "--masks", str(masks_path)])
    assert rc == 0
    assert dense["perplexity"] == pytest.approx(prune_report["perplexity"]["dense"])
    assert pruned["perplexity"] == pytest.approx(prune_report["perplexity"]["pruned"])


def test_verify_passes_and_mutation_detected(tmp_path, capsys):
    rc, report = run_json(capsys, ["verify", "--report", str(tmp_path / "v.json")])
    assert rc == 0
    assert report["passed"] is True
    assert len(report["checks"]) >= 10

    rc, mutated = run_json(capsys, ["verify", "--mutate", "third-term"])
    assert rc == 1
    assert mutated["passed"] is False
    assert mutated["first_failure"] == "obs_closed_form_substitution"


def test_sweep_alpha_zero_matches_wanda(capsys, monkeypatch):
    import gradprune.cli as cli

    # shrink training for test speed; both runs share the cached model
    monkeypatch.setattr(cli, "train", lambda cfg: _cached_fast_model(cfg))
    rc, sweep = run_json(capsys, ["sweep-alpha", "--seed", SEED, "--alphas", "0", "--n-calib", "16"])
    assert rc == 0
    assert len(sweep["rows"]) == 1
    alpha0_ppl = sweep["rows"][0]["perplexity"]

    rc, wanda = run_json(capsys, [
        "sweep-alpha", "--seed", SEED, "--alphas", "0", "--metric", "wanda", "--n-calib", "16",
    ])
    assert rc == 0
    assert wanda["rows"][0]["perplexity"] == alpha0_ppl


_model_cache = {}


def _cached_fast_model(cfg):
    from dataclasses import replace
    from gradprune.toylm import train as real_train

    key = (cfg.seed,)
    if key not in _model_cache:
        _model_cache[key] = real_train(replace(cfg, sgd_steps=150))
    return _model_cache[key]


def test_sweep_alpha_nine_point_grid(capsys, monkeypatch):
    import gradprune.cli as cli

    monkeypatch.setattr(cli, "train", lambda cfg: _cached_fast_model(cfg))
    rc, sweep = run_json(capsys, [
        "sweep-alpha", "--seed", SEED, "--n-calib", "16",
        "--alphas", "0.001,0.01,0.1,1,10,100,1000,10000,100000",
    ])
    assert rc == 0
    assert len(sweep["rows"]) == 9
    assert sweep["best_alpha"] in [r["alpha"] for r in sweep["rows"]]

    rc = main(["sweep-alpha", "--seed", SEED, "--alphas", ""])
    assert rc == 2


def test_sweep_calib_repeats_and_determinism(capsys, monkeypatch):
    import gradprune.cli as cli

    monkeypatch.setattr(cli, "train", lambda cfg: _cached_fast_model(cfg))
    rc, a = run_json(capsys, ["sweep-calib", "--seed", SEED, "--sizes", "4,4", "--repeats", "3"])
    assert rc == 0
    assert len(a["rows"]) == 2
    assert a["rows"][0] == a["rows"][1]  # repeated size, same seed
    assert a["rows"][0]["perplexity_std"] >= 0.0


def test_compare_groups_five_rows_and_winner(capsys, monkeypatch):
    import gradprune.cli as cli

    monkeypatch.setattr(cli, "train", lambda cfg: _cached_fast_model(cfg))
    rc, report = run_json(capsys, ["compare-groups", "--seed", SEED, "--n-calib", "16", "--block", "16"])
    assert rc == 0
    assert [r["group"] for r in report["rows"]] == ["layer", "output,1", "input,1", "output,16", "input,16"]
    assert report["winner"] in {r["group"] for r in report["rows"]}

    rc = main(["compare-groups", "--seed", SEED, "--block", "999"])
    assert rc == 2
    assert "block exceeds" in capsys.readouterr().err


def test_viz_command(toy_export, tmp_path, capsys):
    tensors, stats = toy_export
    masks_path = tmp_path / "m.st"
    main(["prune", "--tensors", str(tensors), "--stats", str(stats), "--out-masks", str(masks_path)])
    capsys.readouterr()
    out_pgm = tmp_path / "layer.pgm"
    rc, report = run_json(capsys, [
        "viz", "--mask", str(masks_path), "--layer", "layers.0.fc.weight",
        "--out", str(out_pgm), "--report", str(tmp_path / "viz.json"),
    ])
    assert rc == 0
    blob = out_pgm.read_bytes()
    assert blob.startswith(b"P5\n32 64\n255\n")
    assert report["structure"]["excess_variance_ratio"] > 0

    rc = main(["viz", "--mask", str(masks_path), "--layer", "nope", "--out", str(out_pgm)])
    assert rc == 2


def test_stats_command(toy_export, capsys):
    _, stats = toy_export
    rc, report = run_json(capsys, ["stats", "--stats", str(stats)])
    assert rc == 0
    layer = report["layers"]["layers.0.fc.weight"]
    assert layer["n_samples"] == 32
    assert layer["d_out"] == 64 and layer["d_in"] == 32
