"""Workspace-backed orchestration of the full inspection methodology.

A workspace is a directory holding every stage's outputs plus
``workspace.json``, which records for each completed stage its config
hash, seed, a hash of its inputs and a stable hash of each artifact.
Stable hashes ignore wall-clock fields (``seconds``/``elapsed_seconds``
columns, ``timing`` keys, markdown blocks fenced by ``<!-- volatile -->``)
so two runs with the same master seed produce identical manifests.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import io
import json
import os
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np
import torch

from .anomaly_engine import MODES, Threshold, calibrate_threshold, infer_cell, model_from_checkpoint
from .autolabel import autolabel_dataset, fit_mask, shadow_report
from .dataset_core import (
    DatasetManifest,
    Split,
    load_manifest,
    save_manifest,
    split_dataset,
    write_mask_png,
)
from .errors import ConfigError, DependencyError, InspectError
from .evalkit import (
    Prediction,
    evaluate_predictions,
    plot_roc,
    timing_benchmark,
    write_report_csv,
    write_report_json,
    write_roc_csv,
    CYCLE_TIME_SECONDS,
)
from .gan_training import AEConfig, Phase1Config, Phase2Config, train_autoencoder, train_phase1, train_phase2
from .model_zoo import load_checkpoint
from .segmentation import DiceConfig, segment_samples, train_unet
from .synthcell import BenchmarkConfig, build_benchmark

MANIFEST_FILE = "workspace.json"
CONFIG_FILE = "config.json"
LOCK_FILE = ".lock"
VOLATILE_COLUMNS = {"seconds", "elapsed_seconds"}
VOLATILE_KEYS = {"seconds", "elapsed_seconds", "timing"}
VOLATILE_OPEN, VOLATILE_CLOSE = "<!-- volatile -->", "<!-- /volatile -->"
LABELS = {"manual": "manual", "auto": "automatic"}
ANOMALY_ARM = "fanogan"


# --------------------------------------------------------------------------
# configuration


def _stage_defaults(cls, drop: tuple[str, ...]) -> dict:
    return {f.name: getattr(cls(), f.name) for f in fields(cls) if f.name not in drop}


@dataclass
class PipelineConfig:
    """All stage settings. Stage seeds derive from ``master_seed``."""

    master_seed: int = 0
    mode: str = "whole"
    synth: dict = field(default_factory=lambda: {
        k: v for k, v in _stage_defaults(BenchmarkConfig, ("master_seed",)).items() if k != "class_mix"})
    phase1: dict = field(default_factory=lambda: _stage_defaults(Phase1Config, ("seed", "mode")))
    phase2: dict = field(default_factory=lambda: _stage_defaults(Phase2Config, ("seed", "mode")))
    ae: dict = field(default_factory=lambda: {"variants": ["autoencoder64", "autoencoder256"], "iterations": 1000,
                                              "batch_size": 16, "lr": 1e-3, "mode": "whole"})
    anomaly: dict = field(default_factory=lambda: {"quantile": 0.995, "grid": 16})
    unet: dict = field(default_factory=lambda: _stage_defaults(DiceConfig, ("seed", "label_source")))
    eval: dict = field(default_factory=lambda: {"timing_images": 3, "warmup": 1})

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        # Building every stage config validates keys and values up front.
        self.benchmark()
        self.phase1_config()
        self.phase2_config()
        for v in self.ae.get("variants", []):
            self.ae_config(v)
        self.dice_config("manual")
        if not 0 < float(self.anomaly.get("quantile", 0.995)) < 1:
            raise ConfigError("anomaly.quantile must lie in (0, 1)")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        base = cls()
        merged = {}
        for name in known:
            default = getattr(base, name)
            value = doc.get(name, default)
            if isinstance(default, dict):
                if not isinstance(value, Mapping):
                    raise ConfigError(f"config section {name!r} must be a mapping")
                merged[name] = {**default, **value}
            else:
                merged[name] = value
        return cls(**merged)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            if path.suffix in (".yaml", ".yml"):
                import yaml

                doc = yaml.safe_load(text) or {}
            else:
                doc = json.loads(text)
        except Exception as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(doc, Mapping):
            raise ConfigError(f"config {path} must hold a mapping")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        # JSON-normal form so a saved and reloaded config compares equal.
        return json.loads(json.dumps(asdict(self)))

    def seed(self, stage: str) -> int:
        digest = hashlib.sha256(f"{self.master_seed}/{stage}".encode()).digest()
        return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF

    def section_hash(self, *names: str) -> str:
        doc = {n: getattr(self, n) for n in names}
        doc["master_seed"] = self.master_seed
        return _json_hash(doc)

    # typed stage configs

    def _build(self, cls, section: dict, **extra):
        try:
            return cls(**{**section, **extra})
        except TypeError as exc:
            raise ConfigError(f"{cls.__name__}: {exc}") from exc

    def benchmark(self) -> BenchmarkConfig:
        return self._build(BenchmarkConfig, self.synth, master_seed=self.seed("synth"))

    def phase1_config(self) -> Phase1Config:
        return self._build(Phase1Config, self.phase1, seed=self.seed("train-gan"), mode=self.mode)

    def phase2_config(self) -> Phase2Config:
        return self._build(Phase2Config, self.phase2, seed=self.seed("train-encoder"), mode=self.mode)

    def ae_config(self, variant: str) -> AEConfig:
        section = {k: v for k, v in self.ae.items() if k != "variants"}
        return self._build(AEConfig, section, variant=variant, seed=self.seed(f"train-ae/{variant}"))

    def dice_config(self, labels: str) -> DiceConfig:
        return self._build(DiceConfig, self.unet, label_source=LABELS.get(labels, labels),
                           seed=self.seed(f"train-unet/{labels}"))


# --------------------------------------------------------------------------
# stable hashing


def _json_hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()


def _strip_keys(doc):
    if isinstance(doc, dict):
        return {k: _strip_keys(v) for k, v in doc.items() if k not in VOLATILE_KEYS}
    if isinstance(doc, list):
        return [_strip_keys(v) for v in doc]
    return doc


def stable_hash(path: str | Path) -> str:
    """SHA-256 of a file with wall-clock content removed."""
    path = Path(path)
    if path.suffix == ".csv":
        rows = list(csv.reader(io.StringIO(path.read_text())))
        if rows:
            keep = [i for i, name in enumerate(rows[0]) if name not in VOLATILE_COLUMNS]
            rows = [[r[i] for i in keep if i < len(r)] for r in rows]
        return _json_hash(rows)
    if path.suffix == ".json":
        return _json_hash(_strip_keys(json.loads(path.read_text())))
    if path.suffix == ".md":
        kept, skipping = [], False
        for line in path.read_text().splitlines():
            if line.strip() == VOLATILE_OPEN:
                skipping = True
            elif line.strip() == VOLATILE_CLOSE:
                skipping = False
            elif not skipping:
                kept.append(line)
        return hashlib.sha256("\n".join(kept).encode()).hexdigest()
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# workspace


class Workspace:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_FILE

    def read(self) -> dict:
        if not self.manifest_path.exists():
            return {"stages": {}}
        return json.loads(self.manifest_path.read_text())

    def write(self, doc: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        os.replace(tmp, self.manifest_path)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def stage(self, name: str) -> dict | None:
        return self.read()["stages"].get(name)

    @contextlib.contextmanager
    def lock(self) -> Iterator[None]:
        self.root.mkdir(parents=True, exist_ok=True)
        lock = self.root / LOCK_FILE
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise InspectError(f"workspace {self.root} is locked by another run ({lock})") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            lock.unlink(missing_ok=True)

    def load_config(self) -> PipelineConfig | None:
        p = self.root / CONFIG_FILE
        return PipelineConfig.load(p) if p.exists() else None

    def save_config(self, config: PipelineConfig) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / CONFIG_FILE).write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")

    def files(self) -> list[str]:
        out = []
        for p in sorted(self.root.rglob("*")):
            if p.is_file():
                out.append(p.relative_to(self.root).as_posix())
        return out


# --------------------------------------------------------------------------
# stages


@dataclass(frozen=True)
class Stage:
    name: str
    outputs: tuple[str, ...]
    requires: tuple[str, ...]
    optional: tuple[str, ...]
    sections: tuple[str, ...]
    run: Callable[["Context"], None]


@dataclass
class Context:
    ws: Workspace
    config: PipelineConfig
    stage: str

    def out(self, rel: str) -> Path:
        p = self.ws.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def seed(self) -> int:
        return self.config.seed(self.stage)

    # shared readers

    def unsupervised(self) -> DatasetManifest:
        return load_manifest(self.ws.path("data/unsupervised.json"))

    def supervised(self) -> DatasetManifest:
        return load_manifest(self.ws.path("data/supervised.json"))

    def arms(self) -> dict[str, tuple[str, str]]:
        """Available anomaly arms: name -> (checkpoint dir, mode)."""
        arms = {}
        if self.ws.stage("train-encoder"):
            arms[ANOMALY_ARM] = ("models/phase2", self.config.mode)
        if self.ws.stage("train-ae"):
            for v in self.config.ae.get("variants", []):
                if self.ws.path(f"models/{v}").exists():
                    arms[v] = (f"models/{v}", self.config.ae_config(v).mode)
        return arms

    def threshold(self, arm: str) -> Threshold:
        doc = json.loads(self.ws.path(f"thresholds/{arm}.json").read_text())
        return Threshold(**doc)


def _synth(ctx: Context) -> None:
    bench = build_benchmark(ctx.config.benchmark())
    unsup = split_dataset(bench, "unsupervised", ctx.seed())
    sup = split_dataset(unsup, "supervised", ctx.seed() + 1)
    save_manifest(unsup, ctx.out("data/unsupervised.json"))
    save_manifest(sup, ctx.out("data/supervised.json"))


def _train_gan(ctx: Context) -> None:
    train_phase1(ctx.unsupervised().subset(Split.TRAIN), ctx.config.phase1_config(), ctx.out("models/phase1"))


def _train_encoder(ctx: Context) -> None:
    train_phase2(ctx.unsupervised().subset(Split.TRAIN), ctx.ws.path("models/phase1"),
                 ctx.config.phase2_config(), ctx.out("models/phase2"))


def _train_ae(ctx: Context) -> None:
    train = ctx.unsupervised().subset(Split.TRAIN)
    for v in ctx.config.ae.get("variants", []):
        train_autoencoder(train, ctx.config.ae_config(v), ctx.out(f"models/{v}"))


def _grid(ctx: Context) -> int:
    return int(ctx.config.anomaly.get("grid", 16))


def _calibrate(ctx: Context) -> None:
    val = ctx.unsupervised().subset(Split.VAL)
    q = float(ctx.config.anomaly.get("quantile", 0.995))
    for arm, (ckpt, mode) in ctx.arms().items():
        model = model_from_checkpoint(ctx.ws.path(ckpt))
        results = [infer_cell(s.image, model, mode, grid=_grid(ctx)) for s in val]
        t = calibrate_threshold(results, q, validation_set="unsupervised/val")
        ctx.out(f"thresholds/{arm}.json").write_text(json.dumps(asdict(t), indent=1, sort_keys=True) + "\n")


SCORE_COLUMNS = ["id", "classes", "score_total", "score_image", "score_feature", "mask_pixels",
                 "defective", "forward_passes", "elapsed_seconds"]


def _score(ctx: Context) -> None:
    test = ctx.unsupervised().subset(Split.TEST)
    for arm, (ckpt, mode) in ctx.arms().items():
        model = model_from_checkpoint(ctx.ws.path(ckpt))
        thr = ctx.threshold(arm)
        with ctx.out(f"scores/{arm}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SCORE_COLUMNS)
            for s in test:
                r = infer_cell(s.image, model, mode, c=thr, grid=_grid(ctx))
                mask = fit_mask(r.mask, s.image.shape)
                write_mask_png(mask, ctx.out(f"scores/{arm}/masks/{s.id}.png"))
                w.writerow([s.id, "+".join(sorted(c.value for c in s.classes)), repr(r.score_total),
                            repr(r.score_image), repr(r.score_feature), int(mask.sum()), int(r.defective),
                            r.forward_passes, repr(r.elapsed_seconds)])


def _autolabel(ctx: Context) -> None:
    sup = ctx.supervised()
    keep = [s for s in sup.samples if sup.splits[s.id] in (Split.TRAIN, Split.VAL)]
    subset = DatasetManifest(keep, {s.id: sup.splits[s.id] for s in keep}, sup.seed)
    model = model_from_checkpoint(ctx.ws.path("models/phase2"))
    auto = autolabel_dataset(subset, model, ctx.threshold(ANOMALY_ARM), ctx.config.mode, _grid(ctx))
    save_manifest(auto, ctx.out("autolabel/manifest.json"))
    shadow_report(auto).write(ctx.ws.path("autolabel/report"))


def _train_unet(labels: str) -> Callable[[Context], None]:
    def run(ctx: Context) -> None:
        if labels == "manual":
            train = ctx.supervised().subset(Split.TRAIN)
        else:
            train = load_manifest(ctx.ws.path("autolabel/manifest.json")).subset(Split.TRAIN)
        train_unet(train, ctx.config.dice_config(labels), ctx.out(f"models/unet_{labels}"))

    return run


def _read_scores(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _predictions(rows: list[dict], ids: set[str] | None = None) -> list[Prediction]:
    out = []
    for r in rows:
        if ids is not None and r["id"] not in ids:
            continue
        classes = frozenset(c for c in r["classes"].split("+") if c)
        out.append(Prediction(r["id"], classes, float(r["score_total"]), int(r["mask_pixels"])))
    return out


def _write_decisions(preds: list[Prediction], report, path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "classes", "defective", "score", "mask_pixels", "predicted"])
        for p in preds:
            if report.decision_rule == "score_threshold":
                predicted = p.score >= report.threshold
            else:
                predicted = p.mask_pixels > 20
            w.writerow([p.id, "+".join(sorted(getattr(c, "value", c) for c in p.classes)), int(p.is_defective),
                        repr(p.score), p.mask_pixels, int(predicted)])


def _evaluate(ctx: Context) -> None:
    seed = ctx.seed()
    unsup = ctx.unsupervised()
    sup = ctx.supervised()
    detection, curves = [], {}
    arms = ctx.arms()
    for arm in arms:
        preds = _predictions(_read_scores(ctx.ws.path(f"scores/{arm}.csv")))
        rep = evaluate_predictions(preds, "score_threshold", seed)
        write_report_json(rep, ctx.out(f"reports/eval/anomaly_{arm}.json"))
        write_roc_csv(rep.roc, ctx.out(f"reports/eval/roc_{arm}.csv"))
        _write_decisions(preds, rep, ctx.out(f"reports/eval/decisions_{arm}_score_threshold.csv"))
        detection += rep.rows(arm)
        curves[arm] = rep.roc
    write_report_csv(detection, ctx.out("reports/eval/detection.csv"))
    plot_roc(curves, ctx.out("reports/eval/roc.png"), "anomaly detection")

    # Supervised test split: anomaly masks versus both U-Net arms, pixel-count rule.
    test = sup.subset(Split.TEST)
    ids = {s.id for s in test}
    pixel_rule = []
    if ANOMALY_ARM in arms:
        preds = _predictions(_read_scores(ctx.ws.path(f"scores/{ANOMALY_ARM}.csv")), ids)
        rep = evaluate_predictions(preds, "pixel_count", seed)
        write_report_json(rep, ctx.out(f"reports/eval/pixel_count_{ANOMALY_ARM}.json"))
        _write_decisions(preds, rep, ctx.out(f"reports/eval/decisions_{ANOMALY_ARM}_pixel_count.csv"))
        pixel_rule += rep.rows(ANOMALY_ARM)
    for labels in LABELS:
        ckpt_dir = ctx.ws.path(f"models/unet_{labels}")
        if not ctx.ws.stage(f"train-unet:{labels}"):
            continue
        ckpt = load_checkpoint(ckpt_dir)
        masks = segment_samples(test, ckpt)
        preds = []
        for s in test:
            m = fit_mask(masks[s.id], s.image.shape)
            write_mask_png(m, ctx.out(f"reports/eval/masks/unet_{labels}/{s.id}.png"))
            preds.append(Prediction(s.id, s.classes, float(m.sum()), int(m.sum())))
        rep = evaluate_predictions(preds, "pixel_count", seed)
        arm = f"unet_{labels}"
        write_report_json(rep, ctx.out(f"reports/eval/pixel_count_{arm}.json"))
        _write_decisions(preds, rep, ctx.out(f"reports/eval/decisions_{arm}_pixel_count.csv"))
        pixel_rule += rep.rows(arm)
    write_report_csv(pixel_rule, ctx.out("reports/eval/pixel_count.csv"))

    timing = []
    n = int(ctx.config.eval.get("timing_images", 3))
    images = [s.image for s in unsup.subset(Split.TEST)[:n]]
    warmup = int(ctx.config.eval.get("warmup", 1))
    for arm, (ckpt, mode) in arms.items():
        model = model_from_checkpoint(ctx.ws.path(ckpt))
        modes = MODES if arm == ANOMALY_ARM else (mode,)
        for m in modes:
            rec = timing_benchmark(model, images, m, warmup, _grid(ctx))
            timing.append({"arm": arm, **rec.to_dict()})
    ctx.out("reports/eval/timing.json").write_text(json.dumps({"timing": timing}, indent=1, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if v is None or v == "undefined":
        return "undefined"
    try:
        return f"{float(v):.3f}"
    except ValueError:
        return str(v)


def _md_table(rows: list[dict], cols: list[str]) -> list[str]:
    out = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    out += ["| " + " | ".join(_fmt(r.get(c)) if c not in ("arm", "subset") else str(r.get(c)) for c in cols) + " |"
            for r in rows]
    return out


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def build_summary(ws: Workspace) -> tuple[str, dict]:
    """Markdown summary plus its machine-readable comparison block."""
    ev = ws.path("reports/eval")
    if not ws.stage("evaluate") or not (ev / "detection.csv").exists():
        raise DependencyError("no evaluation artifacts in workspace; run 'evaluate' first")
    cols = ["arm", "subset", "auc", "precision", "recall", "specificity", "f1"]
    detection = _read_csv(ev / "detection.csv")
    pixel_rule = _read_csv(ev / "pixel_count.csv")
    lines = ["# Inspection pipeline summary", "",
             "## Anomaly detection, image level (best-F1 score threshold; per-class rows balanced)", ""]
    lines += _md_table(detection, cols)
    lines += ["", "## Supervised test split, pixel-count rule (> 20 defective pixels)", ""]
    lines += _md_table(pixel_rule, cols) if pixel_rule else ["(no supervised arms evaluated)"]
    comparison = {}
    recall = {r["arm"]: r["recall"] for r in pixel_rule if r["subset"] == "all"}
    if ANOMALY_ARM in recall:
        for arm in ("unet_manual", "unet_auto"):
            if arm in recall:
                a, b = recall[arm], recall[ANOMALY_ARM]
                ok = a != "undefined" and b != "undefined" and float(a) >= float(b)
                comparison[arm] = {"recall": a, "anomaly_recall": b, "recall_at_least_anomaly": ok}
    if comparison:
        lines += ["", "### Recall comparison against the anomaly model", ""]
        for arm, c in comparison.items():
            verdict = ">=" if c["recall_at_least_anomaly"] else "<"
            lines.append(f"- {arm}: recall {_fmt(c['recall'])} {verdict} anomaly recall {_fmt(c['anomaly_recall'])}")
    auto_json = ws.path("autolabel/report/autolabel_report.json")
    if auto_json.exists():
        s = json.loads(auto_json.read_text())
        lines += ["", "## Auto-label agreement with ground truth", "",
                  f"- samples: {s['n']}", f"- mean IoU: {_fmt(s['mean_iou'])}",
                  f"- mean surplus pixels (auto only): {_fmt(s['mean_surplus'])}",
                  f"- mean deficit pixels (manual only): {_fmt(s['mean_deficit'])}"]
    timing_path = ev / "timing.json"
    lines += ["", "## Time per cell", "", VOLATILE_OPEN]
    if timing_path.exists():
        rows = json.loads(timing_path.read_text())["timing"]
        lines += ["| arm | mode | passes/cell | s/image | s/patch | ratio | < 0.5 s |", "|---|---|---|---|---|---|---|"]
        for r in rows:
            ratio = "n/a" if r["patch_ratio"] is None else f"{r['patch_ratio']:.1f}"
            per_patch = "n/a" if r["seconds_per_patch"] is None else f"{r['seconds_per_patch']:.5f}"
            lines.append(f"| {r['arm']} | {r['mode']} | {r['forward_passes_per_cell']} | "
                         f"{r['seconds_per_image']:.4f} | {per_patch} | {ratio} | {r['within_cycle_time']} |")
        lines.append(f"\nBudget: {CYCLE_TIME_SECONDS} s per cell.")
    lines += [VOLATILE_CLOSE, ""]
    return "\n".join(lines), {"comparison": comparison, "detection": detection, "pixel_count": pixel_rule}


def _report(ctx: Context) -> None:
    text, doc = build_summary(ctx.ws)
    ctx.out("reports/summary.md").write_text(text)
    ctx.out("reports/summary.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


STAGES: dict[str, Stage] = {
    s.name: s
    for s in (
        Stage("synth", ("data",), (), (), ("synth",), _synth),
        Stage("train-gan", ("models/phase1",), ("synth",), (), ("mode", "phase1"), _train_gan),
        Stage("train-encoder", ("models/phase2",), ("synth", "train-gan"), (), ("mode", "phase2"), _train_encoder),
        Stage("train-ae", ("models/autoencoder64", "models/autoencoder256"), ("synth",), (), ("ae",), _train_ae),
        Stage("calibrate", ("thresholds",), ("synth", "train-encoder"), ("train-ae",), ("mode", "anomaly", "ae"),
              _calibrate),
        Stage("score", ("scores",), ("synth", "train-encoder", "calibrate"), ("train-ae",),
              ("mode", "anomaly", "ae"), _score),
        Stage("autolabel", ("autolabel",), ("synth", "train-encoder", "calibrate"), (), ("mode", "anomaly"),
              _autolabel),
        Stage("train-unet:manual", ("models/unet_manual",), ("synth",), (), ("unet",), _train_unet("manual")),
        Stage("train-unet:auto", ("models/unet_auto",), ("synth", "autolabel"), (), ("unet",), _train_unet("auto")),
        Stage("evaluate", ("reports/eval",), ("synth", "train-encoder", "score"),
              ("train-ae", "train-unet:manual", "train-unet:auto"), ("mode", "anomaly", "ae", "eval"), _evaluate),
        Stage("report", ("reports/summary.md", "reports/summary.json"), ("evaluate",), ("autolabel",), (),
              _report),
    )
}
ORDER = list(STAGES)


def _inputs_hash(ws: Workspace, stage: Stage) -> str:
    doc = ws.read()["stages"]
    deps = list(stage.requires) + [o for o in stage.optional if o in doc]
    return _json_hash({d: doc[d]["artifacts"] for d in deps})


def _artifacts(ws: Workspace, outputs: tuple[str, ...]) -> dict[str, str]:
    arts = {}
    for rel in outputs:
        p = ws.path(rel)
        if p.is_file():
            arts[rel] = stable_hash(p)
        elif p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file():
                    arts[f.relative_to(ws.root).as_posix()] = stable_hash(f)
    return arts


def _up_to_date(ws: Workspace, stage: Stage, record: dict | None, config_hash: str, inputs: str) -> bool:
    if not record or record["config_hash"] != config_hash or record["inputs_hash"] != inputs:
        return False
    for rel, h in record["artifacts"].items():
        p = ws.path(rel)
        if not p.is_file() or stable_hash(p) != h:
            return False
    return True


def run_stage(name: str, config: PipelineConfig, workspace: str | Path | Workspace) -> list[Path]:
    """Run one stage unless its config and inputs are unchanged; returns its artifact paths."""
    if name not in STAGES:
        raise ConfigError(f"unknown stage {name!r}; stages: {ORDER}")
    ws = workspace if isinstance(workspace, Workspace) else Workspace(workspace)
    stage = STAGES[name]
    with ws.lock():
        doc = ws.read()
        for dep in stage.requires:
            if dep not in doc["stages"]:
                raise DependencyError(f"stage {name!r} needs {dep!r}; run '{dep.split(':')[0]}' first")
        stored = ws.load_config()
        if stored is None or stored.to_dict() != config.to_dict():
            ws.save_config(config)
        config_hash = config.section_hash(*stage.sections)
        inputs = _inputs_hash(ws, stage)
        record = doc["stages"].get(name)
        if not _up_to_date(ws, stage, record, config_hash, inputs):
            for rel in stage.outputs:
                p = ws.path(rel)
                if p.is_dir():
                    shutil.rmtree(p)
                elif p.exists():
                    p.unlink()
            torch.set_num_threads(1)
            stage.run(Context(ws, config, name))
            doc = ws.read()
            doc["master_seed"] = config.master_seed
            doc["config_hash"] = _json_hash(config.to_dict())
            doc["stages"][name] = {
                "config_hash": config_hash,
                "seed": config.seed(name),
                "inputs_hash": inputs,
                "artifacts": _artifacts(ws, stage.outputs),
            }
            ws.write(doc)
            record = doc["stages"][name]
        return [ws.path(rel) for rel in record["artifacts"]]


def run_all(config: PipelineConfig, workspace: str | Path | Workspace, skip: tuple[str, ...] = ()) -> None:
    for name in ORDER:
        if name not in skip:
            run_stage(name, config, workspace)


@dataclass
class AuditReport:
    orphans: list[str]
    missing: list[str]
    modified: list[str]

    @property
    def ok(self) -> bool:
        return not (self.orphans or self.missing or self.modified)


def audit(workspace: str | Path | Workspace) -> AuditReport:
    """Every file must be a recorded artifact with an unchanged stable hash."""
    ws = workspace if isinstance(workspace, Workspace) else Workspace(workspace)
    if not ws.manifest_path.exists():
        raise DependencyError(f"{ws.root} has no {MANIFEST_FILE}")
    recorded: dict[str, str] = {}
    for rec in ws.read()["stages"].values():
        recorded.update(rec["artifacts"])
    present = set(ws.files()) - {MANIFEST_FILE, CONFIG_FILE, LOCK_FILE}
    missing = sorted(set(recorded) - present)
    modified = sorted(r for r in recorded if r in present and stable_hash(ws.path(r)) != recorded[r])
    return AuditReport(sorted(present - set(recorded)), missing, modified)


def report(workspace: str | Path | Workspace) -> str:
    """Consolidated summary text of an evaluated workspace."""
    ws = workspace if isinstance(workspace, Workspace) else Workspace(workspace)
    if not ws.manifest_path.exists():
        raise DependencyError(f"{ws.root} is empty; run the pipeline first")
    return build_summary(ws)[0]
