"""Image-level evaluation: confusion metrics, balanced ROC/AUC and timing.

Defective cells are the positive class. Undefined ratios (zero
denominators) are reported as ``None`` and serialized as JSON ``null``;
they are never silently replaced by zero.
"""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .anomaly_engine import ReconstructionModel, infer_cell
from .dataset_core import DefectClass, ImageSample
from .errors import CapacityError, ConfigError, DataError

PIXEL_COUNT_MIN = 20
DECISION_RULES = ("score_threshold", "pixel_count")
CYCLE_TIME_SECONDS = 0.5


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError(f"confusion counts must be non-negative: {self}")

    @classmethod
    def from_decisions(cls, predicted: Sequence[bool], actual: Sequence[bool]) -> "ConfusionCounts":
        p = np.asarray(predicted, dtype=bool)
        a = np.asarray(actual, dtype=bool)
        return cls(int((p & a).sum()), int((p & ~a).sum()), int((~p & ~a).sum()), int((~p & a).sum()))


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def confusion_metrics(counts: ConfusionCounts) -> dict[str, float | None]:
    """Precision, recall, specificity and F1; ``None`` marks 0/0."""
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    specificity = _ratio(counts.tn, counts.tn + counts.fp)
    f1 = None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    return {"precision": precision, "recall": recall, "specificity": specificity, "f1": f1}


# --------------------------------------------------------------------------
# ROC


def roc_curve(scores: Sequence[float], labels: Sequence[bool]) -> list[tuple[float, float]]:
    """(FPR, TPR) points for every distinct threshold, from (0,0) to (1,1).

    A sample is predicted positive when its score is >= the threshold;
    tied scores enter together, which yields half credit in the area.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs at least one positive and one negative sample")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tps = np.cumsum(y)
    fps = np.cumsum(~y)
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    pts = [(0.0, 0.0)]
    pts += [(fps[i] / n_neg, tps[i] / n_pos) for i in last_of_group]
    return [(float(a), float(b)) for a, b in pts]


def auc_trapezoid(roc: Sequence[tuple[float, float]]) -> float:
    pts = np.asarray(roc, dtype=np.float64)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


def threshold_sweep(scores: Sequence[float], labels: Sequence[bool]) -> list[dict]:
    """Confusion metrics at every distinct score used as threshold (ascending)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    rows = []
    for t in np.unique(s):
        counts = ConfusionCounts.from_decisions(s >= t, y)
        rows.append({"threshold": float(t), "counts": counts, **confusion_metrics(counts)})
    return rows


def best_f1_threshold(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Threshold maximizing F1; ties go to the highest threshold."""
    best_t, best_f1 = None, -1.0
    for row in threshold_sweep(scores, labels):
        f1 = row["f1"] if row["f1"] is not None else -1.0
        if f1 >= best_f1:
            best_t, best_f1 = row["threshold"], f1
    if best_t is None:
        raise DataError("no scores to threshold")
    return best_t


# --------------------------------------------------------------------------
# predictions and balancing


@dataclass(frozen=True)
class Prediction:
    """Per-cell model output paired with the cell's ground-truth classes."""

    id: str
    classes: frozenset
    score: float
    mask_pixels: int | None = None

    @property
    def is_defective(self) -> bool:
        return bool(self.classes)


def _as_predictions(items: Iterable) -> list[Prediction]:
    out = []
    for i, it in enumerate(items):
        if isinstance(it, Prediction):
            out.append(it)
        else:
            score, defective = it[0], it[1]
            out.append(Prediction(f"s{i}", frozenset({"defective"}) if defective else frozenset(), float(score)))
    return out


def _has_class(p: Prediction, cls: DefectClass | str | None) -> bool:
    if cls is None:
        return p.is_defective
    value = cls.value if isinstance(cls, DefectClass) else str(cls)
    return any((c.value if isinstance(c, DefectClass) else str(c)) == value for c in p.classes)


def balanced_subset(
    predictions: Sequence[Prediction], class_filter: DefectClass | str | None = None, seed: int = 0
) -> list[Prediction]:
    """All defective samples of the class plus an equal random draw of defect-free ones."""
    pos = [p for p in predictions if _has_class(p, class_filter)]
    neg = [p for p in predictions if not p.is_defective]
    if not pos or not neg:
        raise DataError("balancing needs at least one defective and one defect-free sample")
    if len(neg) < len(pos):
        raise CapacityError(f"only {len(neg)} defect-free samples to balance {len(pos)} defective ones")
    rng = np.random.default_rng(seed)
    picked = sorted(rng.choice(len(neg), size=len(pos), replace=False).tolist())
    return pos + [neg[i] for i in picked]


def balanced_roc_auc(
    scores: Sequence[Prediction] | Sequence[tuple[float, bool]],
    class_filter: DefectClass | str | None = None,
    seed: int = 0,
) -> tuple[list[tuple[float, float]], float]:
    """ROC and trapezoidal AUC after class balancing."""
    subset = balanced_subset(_as_predictions(scores), class_filter, seed)
    roc = roc_curve([p.score for p in subset], [p.is_defective for p in subset])
    return roc, auc_trapezoid(roc)


def image_decision_pixelcount(mask: np.ndarray, min_pixels: int = PIXEL_COUNT_MIN) -> bool:
    """A cell is defective when its mask has strictly more than ``min_pixels`` pixels."""
    return int(np.count_nonzero(mask)) > min_pixels


# --------------------------------------------------------------------------
# reports


@dataclass
class TimingRecord:
    mode: str
    seconds_per_image: float
    seconds_per_patch: float | None = None
    forward_passes_per_cell: int = 1
    n_images: int = 0
    structure_ok: bool | None = None

    @property
    def patch_ratio(self) -> float | None:
        if not self.seconds_per_patch:
            return None
        return self.seconds_per_image / self.seconds_per_patch

    @property
    def within_cycle_time(self) -> bool:
        return self.seconds_per_image < CYCLE_TIME_SECONDS

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seconds_per_image": self.seconds_per_image,
            "seconds_per_patch": self.seconds_per_patch,
            "forward_passes_per_cell": self.forward_passes_per_cell,
            "patch_ratio": self.patch_ratio,
            "structure_ok": self.structure_ok,
            "within_cycle_time": self.within_cycle_time,
            "n_images": self.n_images,
        }


@dataclass
class MetricsReport:
    decision_rule: str
    counts: ConfusionCounts
    precision: float | None
    recall: float | None
    specificity: float | None
    f1: float | None
    auc: float | None = None
    roc: list[tuple[float, float]] = field(default_factory=list)
    threshold: float | None = None
    balanced: bool = False
    per_class: dict[str, "MetricsReport"] = field(default_factory=dict)
    timing: TimingRecord | None = None

    def to_dict(self, with_roc: bool = False) -> dict:
        d = {
            "decision_rule": self.decision_rule,
            "tp": self.counts.tp, "fp": self.counts.fp, "tn": self.counts.tn, "fn": self.counts.fn,
            "precision": self.precision, "recall": self.recall,
            "specificity": self.specificity, "f1": self.f1,
            "auc": self.auc, "threshold": self.threshold, "balanced": self.balanced,
        }
        if with_roc:
            d["roc"] = [list(p) for p in self.roc]
        if self.per_class:
            d["per_class"] = {k: v.to_dict(with_roc) for k, v in self.per_class.items()}
        return d

    def rows(self, arm: str) -> list[dict]:
        """Flat rows: one for all classes, one per defect class."""
        out = [{"arm": arm, "subset": "all", **self.to_dict()}]
        for name, rep in self.per_class.items():
            out.append({"arm": arm, "subset": name, **rep.to_dict()})
        for r in out:
            r.pop("per_class", None)
        return out


def _report(preds: Sequence[Prediction], decide, rule: str, threshold: float | None, balanced: bool) -> MetricsReport:
    labels = [p.is_defective for p in preds]
    counts = ConfusionCounts.from_decisions([decide(p) for p in preds], labels)
    auc, roc = None, []
    if any(labels) and not all(labels):
        roc = roc_curve([p.score for p in preds], labels)
        auc = auc_trapezoid(roc)
    return MetricsReport(rule, counts, **confusion_metrics(counts), auc=auc, roc=roc, threshold=threshold, balanced=balanced)


def evaluate_predictions(
    predictions: Sequence[Prediction],
    decision_rule: str = "score_threshold",
    seed: int = 0,
    threshold: float | None = None,
    balance_all: bool = False,
    min_pixels: int = PIXEL_COUNT_MIN,
) -> MetricsReport:
    """All-classes report plus one balanced report per defect class.

    ``score_threshold``: a cell is defective when its score reaches
    ``threshold`` (default: the best-F1 point of the all-classes ROC).
    ``pixel_count``: a cell is defective when its mask has more than
    ``min_pixels`` pixels; ROC/AUC still use the continuous score.
    The all-classes report covers every test sample unless ``balance_all``.
    """
    if decision_rule not in DECISION_RULES:
        raise ConfigError(f"decision rule must be one of {DECISION_RULES}")
    preds = list(predictions)
    base = balanced_subset(preds, None, seed) if balance_all else preds
    if decision_rule == "score_threshold":
        if threshold is None:
            threshold = best_f1_threshold([p.score for p in base], [p.is_defective for p in base])
        t = threshold

        def decide(p: Prediction) -> bool:
            return p.score >= t
    else:
        if any(p.mask_pixels is None for p in preds):
            raise DataError("pixel_count rule needs a mask pixel count for every prediction")

        def decide(p: Prediction) -> bool:
            return p.mask_pixels > min_pixels

    report = _report(base, decide, decision_rule, threshold, balance_all)
    classes = sorted({(c.value if isinstance(c, DefectClass) else str(c)) for p in preds for c in p.classes})
    for cls in classes:
        subset = balanced_subset(preds, cls, seed)
        report.per_class[cls] = _report(subset, decide, decision_rule, threshold, True)
    return report


def predict_cells(
    samples: Sequence[ImageSample], model: ReconstructionModel, mode: str = "whole", c: float | None = None, grid: int = 16
) -> tuple[list[Prediction], list]:
    """Run the anomaly model over ``samples``; returns predictions and raw results."""
    preds, results = [], []
    for s in samples:
        r = infer_cell(s.image, model, mode, c=c, grid=grid)
        results.append(r)
        preds.append(Prediction(s.id, s.classes, r.score_total, r.mask_pixels if r.mask is not None else None))
    return preds, results


def evaluate_model(
    samples: Sequence[ImageSample],
    model: ReconstructionModel | None = None,
    masks: Mapping[str, np.ndarray] | None = None,
    decision_rule: str = "score_threshold",
    seed: int = 0,
    c: float | None = None,
    mode: str = "whole",
    grid: int = 16,
    **kw,
) -> MetricsReport:
    """Evaluate a model (run here, with timing) or precomputed masks."""
    if (model is None) == (masks is None):
        raise ConfigError("pass exactly one of model or masks")
    missing = [s.id for s in samples if s.provenance.value == "autolabeled" or (s.is_defective and s.mask is None)]
    if missing:
        raise DataError(f"test samples without ground truth: {missing[:5]}")
    if model is not None:
        preds, results = predict_cells(samples, model, mode, c, grid)
        report = evaluate_predictions(preds, decision_rule, seed, **kw)
        report.timing = TimingRecord(
            mode=mode,
            seconds_per_image=statistics.median(r.elapsed_seconds for r in results),
            forward_passes_per_cell=results[0].forward_passes,
            n_images=len(results),
        )
        return report
    absent = [s.id for s in samples if s.id not in masks]
    if absent:
        raise DataError(f"no predicted mask for: {absent[:5]}")
    preds = [
        Prediction(s.id, s.classes, float(np.count_nonzero(masks[s.id])), int(np.count_nonzero(masks[s.id])))
        for s in samples
    ]
    return evaluate_predictions(preds, decision_rule, seed, **kw)


def timing_benchmark(
    model: ReconstructionModel, images: Sequence[np.ndarray], mode: str = "whole", warmup: int = 1, grid: int = 16
) -> TimingRecord:
    """Median per-cell model time, single stream; warm-up runs are discarded.

    In patch mode the per-patch time is the median single-pass time and
    ``structure_ok`` records whether per-image time is within 20 % of
    ``grid**2`` times the per-patch time.
    """
    if len(images) == 0:
        raise DataError("timing benchmark needs at least one image")
    for im in list(images)[:warmup]:
        infer_cell(im, model, mode, grid=grid)
    per_image, per_patch, passes = [], [], 1
    for im in images:
        r = infer_cell(im, model, mode, grid=grid)
        per_image.append(r.elapsed_seconds)
        passes = r.forward_passes
        if r.pass_seconds is not None:
            per_patch.extend(r.pass_seconds)
    rec = TimingRecord(mode, statistics.median(per_image), forward_passes_per_cell=passes, n_images=len(images))
    if mode == "patch":
        rec.seconds_per_patch = statistics.median(per_patch)
        expected = grid * grid
        rec.structure_ok = 0.8 * expected <= rec.patch_ratio <= 1.2 * expected
    return rec


# --------------------------------------------------------------------------
# output


REPORT_COLUMNS = ["arm", "subset", "decision_rule", "auc", "precision", "recall", "specificity", "f1",
                  "tp", "fp", "tn", "fn", "threshold", "balanced"]


def _fmt(v) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report_csv(rows: Iterable[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in REPORT_COLUMNS})
    return path


def write_roc_csv(roc: Sequence[tuple[float, float]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr"])
        w.writerows([[repr(a), repr(b)] for a, b in roc])
    return path


def write_report_json(report: MetricsReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(with_roc=True), indent=1, sort_keys=True) + "\n")
    return path


def plot_roc(curves: Mapping[str, Sequence[tuple[float, float]]], path: str | Path, title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    for name, roc in curves.items():
        pts = np.asarray(roc)
        ax.plot(pts[:, 0], pts[:, 1], label=f"{name} (AUC {auc_trapezoid(roc):.3f})")
    ax.plot([0, 1], [0, 1], color="grey", lw=0.5, ls="--")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
