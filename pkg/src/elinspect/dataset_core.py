"""Data model, normalization, dataset splitting and patch tiling.

Images live on disk as 8-bit grayscale PNGs and in memory as ``uint8``
arrays. Networks consume *normalized* float32 arrays in ``[-1, 1]`` which
matches the range of a tanh generator output.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image

from .errors import CapacityError, ConfigError, DataError, ShapeError


class DefectClass(str, enum.Enum):
    CRACK = "crack"
    MICROCRACK = "microcrack"
    FINGER_INTERRUPTION = "finger_interruption"
    BREAK = "break"
    BAD_SOLDERING = "bad_soldering"


class Provenance(str, enum.Enum):
    REAL = "real"
    SYNTHETIC = "synthetic"
    AUTOLABELED = "autolabeled"


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class SplitScheme(str, enum.Enum):
    UNSUPERVISED = "unsupervised"
    SUPERVISED = "supervised"


DEFECT_FREE = "defect_free"

# Reference split sizes of the industrial dataset; used as proportions.
UNSUPERVISED_REFERENCE = {"train": 750, "val": 373, "test": 375, "total": 1498}
SUPERVISED_REFERENCE = {"train": 232, "val": 68, "test": 75, "total": 375}


@dataclass
class ImageSample:
    """One grayscale cell image with optional pixel mask.

    ``ground_truth`` is a shadow copy of the human/synthetic mask kept on
    auto-labeled samples for auditing only; training code never reads it.
    """

    id: str
    image: np.ndarray
    mask: np.ndarray | None = None
    classes: frozenset[DefectClass] = frozenset()
    provenance: Provenance = Provenance.SYNTHETIC
    ground_truth: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.classes = frozenset(DefectClass(c) for c in self.classes)
        self.provenance = Provenance(self.provenance)
        if self.image.ndim != 2:
            raise ShapeError(f"sample {self.id}: image must be 2-D, got shape {self.image.shape}")
        for name in ("mask", "ground_truth"):
            m = getattr(self, name)
            if m is None:
                continue
            if m.shape != self.image.shape:
                raise ShapeError(
                    f"sample {self.id}: {name} shape {m.shape} != image shape {self.image.shape}"
                )
            if not np.isin(m, (0, 1)).all():
                raise DataError(f"sample {self.id}: {name} values must be in {{0, 1}}")
            setattr(self, name, m.astype(np.uint8, copy=False))
        # Auto-labels may legitimately miss a defect, so the emptiness
        # equivalence only binds human/synthetic ground truth.
        if self.mask is not None and self.provenance is not Provenance.AUTOLABELED:
            if bool(self.classes) != bool(self.mask.any()):
                raise DataError(
                    f"sample {self.id}: classes {sorted(c.value for c in self.classes)} "
                    "disagree with mask emptiness"
                )

    @property
    def is_defective(self) -> bool:
        return bool(self.classes)

    @property
    def class_key(self) -> str:
        if not self.classes:
            return DEFECT_FREE
        return "+".join(sorted(c.value for c in self.classes))


def count_classes(samples: Iterable[ImageSample]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for s in samples:
        keys = [c.value for c in s.classes] or [DEFECT_FREE]
        for k in keys:
            counts[k] = counts.get(k, 0) + 1
    return dict(sorted(counts.items()))


@dataclass
class DatasetManifest:
    samples: list[ImageSample]
    splits: dict[str, Split] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate sample ids in manifest")
        self.splits = {k: Split(v) for k, v in self.splits.items()}
        unknown = set(self.splits) - set(ids)
        if unknown:
            raise DataError(f"split map references unknown ids: {sorted(unknown)[:5]}")
        if self.splits and len(self.splits) != len(ids):
            missing = sorted(set(ids) - set(self.splits))
            raise DataError(f"samples without a split assignment: {missing[:5]}")

    def __len__(self) -> int:
        return len(self.samples)

    def by_id(self) -> dict[str, ImageSample]:
        return {s.id: s for s in self.samples}

    def subset(self, split: Split | str) -> list[ImageSample]:
        split = Split(split)
        return [s for s in self.samples if self.splits.get(s.id) is split]

    def class_counts(self) -> dict[str, dict[str, int]]:
        """Per-split class counts, recomputed from the samples."""
        if not self.splits:
            return {"all": count_classes(self.samples)}
        return {sp.value: count_classes(self.subset(sp)) for sp in Split}


# --------------------------------------------------------------------------
# normalization and resizing


def _check_2d(a: np.ndarray) -> None:
    if np.ndim(a) != 2:
        raise ShapeError(f"expected a 2-D grayscale array, got shape {np.shape(a)}")


def normalize(image: np.ndarray) -> np.ndarray:
    """Map 8-bit intensities ``[0, 255]`` affinely onto ``[-1, 1]``."""
    _check_2d(image)
    img = np.asarray(image)
    if img.size and (img.min() < 0 or img.max() > 255):
        raise ShapeError("intensities must lie in [0, 255]")
    return (img.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).clip(-1.0, 1.0)


def denormalize(data: np.ndarray) -> np.ndarray:
    _check_2d(data)
    return np.rint((np.asarray(data, dtype=np.float64) + 1.0) * 127.5).clip(0, 255).astype(np.uint8)


def resize_image(data: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a float (normalized) image to ``size`` x ``size``."""
    _check_2d(data)
    if data.shape == (size, size):
        return np.asarray(data, dtype=np.float32)
    pil = Image.fromarray(np.asarray(data, dtype=np.float32), mode="F")
    out = np.asarray(pil.resize((size, size), Image.BILINEAR), dtype=np.float32)
    return out.clip(-1.0, 1.0)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize so the mask stays binary."""
    _check_2d(mask)
    if mask.shape == (size, size):
        return np.asarray(mask, dtype=np.uint8)
    pil = Image.fromarray(np.asarray(mask, dtype=np.uint8))
    return np.asarray(pil.resize((size, size), Image.NEAREST), dtype=np.uint8)


# --------------------------------------------------------------------------
# patches


def extract_patches(image: np.ndarray, patch: int = 64, grid: int | None = 16) -> list[np.ndarray]:
    """Cut a square image into ``grid**2`` non-overlapping patches, row-major.

    When ``grid`` is given the image is first resized to ``grid * patch``
    pixels per side. With ``grid=None`` the image side must already be a
    multiple of ``patch``.
    """
    _check_2d(image)
    if patch < 1:
        raise ConfigError(f"patch size must be positive, got {patch}")
    h, w = image.shape
    if h != w:
        raise ShapeError(f"patch extraction needs a square image, got {h}x{w}")
    if grid is None:
        if h % patch:
            raise ConfigError(f"image side {h} is not divisible by patch size {patch}")
        grid = h // patch
    elif grid < 1:
        raise ConfigError(f"grid must be positive, got {grid}")
    side = grid * patch
    if h != side:
        image = resize_image(image, side)
    tiles = np.asarray(image).reshape(grid, patch, grid, patch).swapaxes(1, 2)
    return [t.copy() for t in tiles.reshape(grid * grid, patch, patch)]


def assemble_patches(patches: list[np.ndarray] | np.ndarray, grid: int) -> np.ndarray:
    """Inverse of :func:`extract_patches` (row-major tiling)."""
    arr = np.asarray(patches)
    if arr.ndim != 3 or arr.shape[0] != grid * grid or arr.shape[1] != arr.shape[2]:
        raise ShapeError(f"cannot tile {arr.shape} patches on a {grid}x{grid} grid")
    p = arr.shape[1]
    return arr.reshape(grid, grid, p, p).swapaxes(1, 2).reshape(grid * p, grid * p)


# --------------------------------------------------------------------------
# splitting


def _largest_remainder(total: int, weights: Mapping[str, int]) -> dict[str, int]:
    """Integer apportionment of ``total`` proportional to ``weights``."""
    wsum = sum(weights.values())
    if wsum == 0:
        return {k: 0 for k in weights}
    quotas = {k: total * w / wsum for k, w in weights.items()}
    alloc = {k: int(np.floor(q)) for k, q in quotas.items()}
    short = total - sum(alloc.values())
    order = sorted(weights, key=lambda k: (-(quotas[k] - alloc[k]), k))
    for k in order[:short]:
        alloc[k] += 1
    return alloc


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _sizes(n: int, reference: Mapping[str, int], counts: Mapping[str, int] | None) -> dict[str, int]:
    if counts is None:
        train = _round_half_up(n * reference["train"] / reference["total"])
        val = _round_half_up(n * reference["val"] / reference["total"])
        return {"train": train, "val": val, "test": n - train - val}
    sizes = {k: int(counts.get(k, 0)) for k in ("train", "val", "test")}
    if any(v < 0 for v in sizes.values()):
        raise ConfigError(f"split counts must be non-negative: {sizes}")
    if sum(sizes.values()) > n:
        raise CapacityError(f"requested {sizes} ({sum(sizes.values())}) but only {n} samples available")
    return sizes


def split_dataset(
    manifest: DatasetManifest,
    scheme: SplitScheme | str,
    seed: int,
    counts: Mapping[str, int] | None = None,
) -> DatasetManifest:
    """Assign train/val/test splits following one of the two protocols.

    ``unsupervised``: defect-free samples are divided train/val/test in the
    reference 750/373/375 proportions (or ``counts``) and every defective
    sample goes to test.

    ``supervised``: defective samples are stratified by class into
    train/val/test (reference 232/68/75, or ``counts``). Defect-free samples
    are only used for evaluation: if the input already carries splits, the
    defect-free samples previously in test are kept in test and the rest are
    dropped; otherwise all defect-free samples go to test.

    Samples not allocated because ``counts`` asked for fewer are dropped from
    the returned manifest so every remaining id has exactly one split.
    """
    scheme = SplitScheme(scheme)
    rng = np.random.default_rng(seed)
    ordered = sorted(manifest.samples, key=lambda s: s.id)
    free = [s for s in ordered if not s.is_defective]
    defective = [s for s in ordered if s.is_defective]
    splits: dict[str, Split] = {}

    if scheme is SplitScheme.UNSUPERVISED:
        if not free:
            raise CapacityError("unsupervised split needs defect-free samples")
        sizes = _sizes(len(free), UNSUPERVISED_REFERENCE, counts)
        perm = [free[i] for i in rng.permutation(len(free))]
        start = 0
        for name in ("train", "val", "test"):
            for s in perm[start : start + sizes[name]]:
                splits[s.id] = Split(name)
            start += sizes[name]
        for s in defective:
            splits[s.id] = Split.TEST
    else:
        if not defective:
            raise CapacityError("supervised split needs defective samples")
        sizes = _sizes(len(defective), SUPERVISED_REFERENCE, counts)
        groups: dict[str, list[ImageSample]] = {}
        for s in defective:
            groups.setdefault(s.class_key, []).append(s)
        weights = {k: len(v) for k, v in groups.items()}
        test_alloc = _largest_remainder(sizes["test"], weights)
        val_alloc = _largest_remainder(sizes["val"], weights)
        for key in sorted(groups):
            members = groups[key]
            members = [members[i] for i in rng.permutation(len(members))]
            n_test = min(test_alloc[key], len(members))
            n_val = min(val_alloc[key], len(members) - n_test)
            for s in members[:n_test]:
                splits[s.id] = Split.TEST
            for s in members[n_test : n_test + n_val]:
                splits[s.id] = Split.VAL
            for s in members[n_test + n_val :]:
                splits[s.id] = Split.TRAIN
        if counts is not None:
            # Respect an explicit train total by dropping surplus train samples.
            train_ids = [i for i, sp in splits.items() if sp is Split.TRAIN]
            for sid in train_ids[sizes["train"] :]:
                del splits[sid]
        for s in free:
            prior = manifest.splits.get(s.id)
            if not manifest.splits or prior is Split.TEST:
                splits[s.id] = Split.TEST

    kept = [s for s in manifest.samples if s.id in splits]
    return DatasetManifest(samples=kept, splits={s.id: splits[s.id] for s in kept}, seed=seed)


# --------------------------------------------------------------------------
# persistence


def _write_png(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path, format="PNG", optimize=False)


def write_mask_png(mask: np.ndarray, path: Path) -> None:
    _write_png(np.asarray(mask, dtype=np.uint8) * 255, path)


def read_mask_png(path: Path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.uint8)


def read_image_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.uint8)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write images, masks and the manifest JSON under ``path.parent``."""
    path = Path(path)
    root = path.parent
    records = []
    for s in manifest.samples:
        rec: dict = {"id": s.id, "image_path": f"images/{s.id}.png", "mask_path": None}
        _write_png(s.image, root / rec["image_path"])
        if s.mask is not None:
            rec["mask_path"] = f"masks/{s.id}.png"
            write_mask_png(s.mask, root / rec["mask_path"])
        if s.ground_truth is not None:
            rec["ground_truth_path"] = f"ground_truth/{s.id}.png"
            write_mask_png(s.ground_truth, root / rec["ground_truth_path"])
        rec["classes"] = sorted(c.value for c in s.classes)
        rec["provenance"] = s.provenance.value
        records.append(rec)
    doc = {
        "seed": manifest.seed,
        "samples": records,
        "splits": {k: v.value for k, v in manifest.splits.items()},
        "class_counts": manifest.class_counts(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    doc = json.loads(path.read_text())
    samples = []
    for rec in doc["samples"]:
        mask = read_mask_png(root / rec["mask_path"]) if rec.get("mask_path") else None
        gt = read_mask_png(root / rec["ground_truth_path"]) if rec.get("ground_truth_path") else None
        samples.append(
            ImageSample(
                id=rec["id"],
                image=read_image_png(root / rec["image_path"]),
                mask=mask,
                classes=frozenset(rec.get("classes", ())),
                provenance=Provenance(rec.get("provenance", "real")),
                ground_truth=gt,
            )
        )
    manifest = DatasetManifest(samples=samples, splits=doc.get("splits", {}), seed=int(doc.get("seed", 0)))
    stored = doc.get("class_counts")
    if stored is not None and stored != manifest.class_counts():
        raise DataError(f"{path}: stored class counts do not match the samples")
    return manifest


def with_splits(manifest: DatasetManifest, splits: Mapping[str, Split | str]) -> DatasetManifest:
    return replace(manifest, splits=dict(splits))
