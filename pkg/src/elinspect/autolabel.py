"""Pixel-wise labels produced by the anomaly model instead of annotators."""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .anomaly_engine import ReconstructionModel, Threshold, infer_cell
from .dataset_core import DatasetManifest, ImageSample, Provenance, resize_mask
from .errors import IntegrityError, PairingError, ShapeError


def mask_hash(mask: np.ndarray) -> str:
    m = np.ascontiguousarray(np.asarray(mask, dtype=np.uint8))
    h = hashlib.sha256(repr(m.shape).encode())
    h.update(m.tobytes())
    return h.hexdigest()


def fit_mask(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if mask.shape == shape:
        return mask.astype(np.uint8)
    if shape[0] != shape[1]:
        raise ShapeError(f"cannot map a {mask.shape} mask onto a non-square image {shape}")
    return resize_mask(mask, shape[0])


def autolabel_sample(
    sample: ImageSample, model: ReconstructionModel, c: float | Threshold, mode: str = "whole", grid: int = 16
) -> ImageSample:
    res = infer_cell(sample.image, model, mode, c=c, grid=grid)
    return ImageSample(
        id=sample.id,
        image=sample.image,
        mask=fit_mask(res.mask, sample.image.shape),
        classes=sample.classes,
        provenance=Provenance.AUTOLABELED,
        ground_truth=sample.mask if sample.ground_truth is None else sample.ground_truth,
    )


def autolabel_dataset(
    manifest: DatasetManifest | Sequence[ImageSample],
    model: ReconstructionModel,
    c: float | Threshold,
    mode: str = "whole",
    grid: int = 16,
) -> DatasetManifest:
    """Replace the masks of all defective samples by binarized residual maps.

    Defect-free samples are dropped. The original masks move to the
    ``ground_truth`` shadow field; splits of the kept samples carry over.
    """
    if isinstance(manifest, DatasetManifest):
        samples, splits, seed = manifest.samples, manifest.splits, manifest.seed
    else:
        samples, splits, seed = list(manifest), {}, 0
    defective = [s for s in samples if s.is_defective]
    if not defective:
        warnings.warn("no defective samples to auto-label; returning an empty manifest", stacklevel=2)
    out = [autolabel_sample(s, model, c, mode, grid) for s in defective]
    kept = {s.id for s in out}
    return DatasetManifest(out, {k: v for k, v in splits.items() if k in kept}, seed)


@dataclass(frozen=True)
class LabelComparison:
    id: str
    auto_pixels: int
    manual_pixels: int
    iou: float | None
    surplus: int
    deficit: int


def compare_masks(sample_id: str, auto: np.ndarray, manual: np.ndarray) -> LabelComparison:
    """IoU plus auto-only (surplus) and manual-only (deficit) pixel counts.

    IoU of two empty masks is undefined (``None``).
    """
    a = np.asarray(auto).astype(bool)
    m = np.asarray(manual).astype(bool)
    if a.shape != m.shape:
        raise ShapeError(f"{sample_id}: mask shapes differ {a.shape} vs {m.shape}")
    union = int((a | m).sum())
    inter = int((a & m).sum())
    return LabelComparison(
        sample_id, int(a.sum()), int(m.sum()), inter / union if union else None, int((a & ~m).sum()), int((m & ~a).sum())
    )


@dataclass
class AutoLabelReport:
    rows: list[LabelComparison] = field(default_factory=list)

    def _mean(self, name: str) -> float | None:
        vals = [getattr(r, name) for r in self.rows if getattr(r, name) is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def summary(self) -> dict:
        return {
            "n": len(self.rows),
            "mean_iou": self._mean("iou"),
            "mean_auto_pixels": self._mean("auto_pixels"),
            "mean_manual_pixels": self._mean("manual_pixels"),
            "mean_surplus": self._mean("surplus"),
            "mean_deficit": self._mean("deficit"),
        }

    def write(self, directory: str | Path) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = d / "autolabel_report.csv", d / "autolabel_report.json"
        names = list(LabelComparison.__dataclass_fields__)
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.rows:
                w.writerow(["undefined" if v is None else v for v in asdict(r).values()])
        json_path.write_text(json.dumps(self.summary, indent=1, sort_keys=True) + "\n")
        return csv_path, json_path


def _mask_map(items: DatasetManifest | Sequence[ImageSample] | Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    if isinstance(items, Mapping):
        return dict(items)
    samples = items.samples if isinstance(items, DatasetManifest) else items
    return {s.id: s.mask for s in samples}


def compare_labels(auto, manual) -> AutoLabelReport:
    """Per-sample comparison of auto-labels against manual masks (matching ids)."""
    a, m = _mask_map(auto), _mask_map(manual)
    if set(a) != set(m):
        only_a, only_m = sorted(set(a) - set(m)), sorted(set(m) - set(a))
        raise PairingError(f"sample ids differ: auto-only {only_a[:5]}, manual-only {only_m[:5]}")
    rows = []
    for sid in sorted(a):
        if a[sid] is None or m[sid] is None:
            raise PairingError(f"{sid}: mask missing on one side")
        rows.append(compare_masks(sid, a[sid], m[sid]))
    return AutoLabelReport(rows)


def shadow_report(manifest: DatasetManifest | Sequence[ImageSample]) -> AutoLabelReport:
    """Compare auto-labels against the ground truth they carry as shadow masks."""
    samples = manifest.samples if isinstance(manifest, DatasetManifest) else manifest
    with_gt = [s for s in samples if s.ground_truth is not None]
    return compare_labels({s.id: s.mask for s in with_gt}, {s.id: s.ground_truth for s in with_gt})


def check_no_leakage(feed: Iterable[np.ndarray], ground_truth: Iterable[np.ndarray | None]) -> None:
    """Raise if a non-empty ground-truth mask appears verbatim in a training feed."""
    gt = {mask_hash(m) for m in ground_truth if m is not None and np.any(m)}
    for i, m in enumerate(feed):
        if mask_hash(m) in gt:
            raise IntegrityError(f"training mask #{i} is a ground-truth mask")
