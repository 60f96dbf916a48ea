from __future__ import annotations

import csv
import json
import shutil

import pytest
import torch
import yaml

import elinspect.gan_training as gt
from elinspect.cli import main
from elinspect.errors import ConfigError, DependencyError, InspectError
from elinspect.evalkit import ConfusionCounts, confusion_metrics
from elinspect.pipeline import PipelineConfig, Workspace, audit, report, run_all, run_stage, stable_hash

TINY = {
    "synth": {"total_defect_free": 80, "total_defective": 16},
    "phase1": {"iterations": 5},
    "phase2": {"iterations": 5},
    "ae": {"variants": ["autoencoder64"], "iterations": 5},
    "unet": {"iterations": 5},
    "eval": {"timing_images": 1, "warmup": 0},
}


def tiny_config(seed: int = 7) -> PipelineConfig:
    return PipelineConfig.from_dict({"master_seed": seed, **TINY})


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    run_all(tiny_config(), root)
    return Workspace(root)


def test_config_sections_and_seeds():
    cfg = tiny_config()
    assert cfg.seed("synth") != cfg.seed("train-gan")
    assert cfg.seed("synth") == tiny_config().seed("synth")
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"bogus": {}})


def test_yaml_config_load(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"master_seed": 7, **TINY}))
    assert PipelineConfig.load(path).to_dict() == tiny_config().to_dict()


def test_stage_ordering_guard(tmp_path):
    with pytest.raises(DependencyError, match="'synth' first"):
        run_stage("autolabel", tiny_config(), tmp_path)
    run_stage("synth", tiny_config(), tmp_path)
    with pytest.raises(DependencyError, match="train-encoder"):
        run_stage("autolabel", tiny_config(), tmp_path)
    with pytest.raises(ConfigError):
        run_stage("dance", tiny_config(), tmp_path)


def test_cli_exit_codes(tmp_path):
    assert main(["autolabel", "--workspace", str(tmp_path / "a")]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"phase1": {"lambda_gp": -1}}))
    assert main(["synth", "--workspace", str(tmp_path / "b"), "--config", str(bad)]) == 2


def test_cli_numeric_abort(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    ws = str(tmp_path / "w")
    assert main(["synth", "--workspace", ws, "--config", str(cfg)]) == 0

    def nan_penalty(*args, **kwargs):
        return torch.tensor(float("nan"))

    monkeypatch.setattr(gt, "gradient_penalty", nan_penalty)
    assert main(["train-gan", "--workspace", ws]) == 4


def test_workspace_manifest_records_stages(workspace):
    doc = workspace.read()
    assert doc["master_seed"] == 7
    for name in ("synth", "train-gan", "train-encoder", "train-ae", "calibrate", "score", "autolabel",
                 "train-unet:manual", "train-unet:auto", "evaluate", "report"):
        rec = doc["stages"][name]
        assert rec["artifacts"] and rec["seed"] == tiny_config().seed(name)


def test_rerun_is_noop(workspace):
    before = workspace.manifest_path.read_bytes()
    mtimes = {f: workspace.path(f).stat().st_mtime_ns for f in workspace.files()}
    run_all(tiny_config(), workspace)
    assert workspace.manifest_path.read_bytes() == before
    assert {f: workspace.path(f).stat().st_mtime_ns for f in workspace.files()} == mtimes


def test_audit_clean_then_detects_orphans_and_edits(workspace, tmp_path):
    assert audit(workspace).ok
    copy = Workspace(shutil.copytree(workspace.root, tmp_path / "copy"))
    (copy.root / "stray.txt").write_text("x")
    target = copy.path("reports/eval/pixel_count.csv")
    target.write_text(target.read_text() + "tampered,row\n")
    result = audit(copy)
    assert result.orphans == ["stray.txt"]
    assert result.modified == ["reports/eval/pixel_count.csv"]
    assert main(["audit", "--workspace", str(copy.root)]) == 1


def test_lock_blocks_concurrent_writer(workspace, tmp_path):
    copy = Workspace(shutil.copytree(workspace.root, tmp_path / "locked"))
    with copy.lock():
        with pytest.raises(InspectError):
            run_stage("report", tiny_config(), copy)


def test_evaluate_emits_both_supervised_arms(workspace):
    rows = list(csv.DictReader(workspace.path("reports/eval/pixel_count.csv").open()))
    assert {r["arm"] for r in rows if r["subset"] == "all"} == {"fanogan", "unet_manual", "unet_auto"}


def test_summary_recall_rederivable_from_decisions(workspace):
    summary = json.loads(workspace.path("reports/summary.json").read_text())
    for arm in ("fanogan", "unet_manual", "unet_auto"):
        path = workspace.path(f"reports/eval/decisions_{arm}_pixel_count.csv")
        rows = list(csv.DictReader(path.open()))
        tp = sum(r["defective"] == "1" and r["predicted"] == "1" for r in rows)
        fn = sum(r["defective"] == "1" and r["predicted"] == "0" for r in rows)
        fp = sum(r["defective"] == "0" and r["predicted"] == "1" for r in rows)
        tn = sum(r["defective"] == "0" and r["predicted"] == "0" for r in rows)
        recall = confusion_metrics(ConfusionCounts(tp, fp, tn, fn))["recall"]
        row = next(r for r in summary["pixel_count"] if r["arm"] == arm and r["subset"] == "all")
        assert float(row["recall"]) == pytest.approx(recall, abs=1e-12)
    assert set(summary["comparison"]) == {"unet_manual", "unet_auto"}


def test_summary_has_timing_rows(workspace):
    text = workspace.path("reports/summary.md").read_text()
    assert "| fanogan | patch | 256 |" in text and "| fanogan | whole | 1 |" in text
    assert "Recall comparison" in text


def test_report_requires_evaluation(tmp_path):
    with pytest.raises(DependencyError):
        report(tmp_path)
    run_stage("synth", tiny_config(), tmp_path)
    with pytest.raises(DependencyError):
        report(tmp_path)


def test_summary_without_unet_has_no_fabricated_rows(workspace, tmp_path):
    copy = Workspace(shutil.copytree(workspace.root, tmp_path / "partial"))
    doc = copy.read()
    for name in ("train-unet:manual", "train-unet:auto", "evaluate", "report"):
        del doc["stages"][name]
    copy.write(doc)
    for rel in ("models/unet_manual", "models/unet_auto"):
        shutil.rmtree(copy.path(rel))
    run_stage("evaluate", tiny_config(), copy)
    text = report(copy)
    assert "unet" not in text
    assert "fanogan" in text


def test_two_runs_identical_hashes(workspace, tmp_path):
    other = tmp_path / "again"
    run_all(tiny_config(), other)
    a, b = workspace.read()["stages"], Workspace(other).read()["stages"]
    assert {k: v["artifacts"] for k, v in a.items()} == {k: v["artifacts"] for k, v in b.items()}


def test_stable_hash_ignores_timing(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_text(json.dumps({"auc": 0.9, "timing": [1.0]}))
    b.write_text(json.dumps({"auc": 0.9, "timing": [2.0]}))
    assert stable_hash(a) == stable_hash(b)
    b.write_text(json.dumps({"auc": 0.8, "timing": [1.0]}))
    assert stable_hash(a) != stable_hash(b)
