from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from elinspect.dataset_core import (
    DatasetManifest,
    DefectClass,
    ImageSample,
    Provenance,
    Split,
    assemble_patches,
    denormalize,
    extract_patches,
    load_manifest,
    normalize,
    resize_mask,
    save_manifest,
    split_dataset,
)
from elinspect.errors import CapacityError, DataError, ShapeError


def _sample(i: int, cls: str | None = None, side: int = 4) -> ImageSample:
    img = np.full((side, side), 100, np.uint8)
    mask = np.zeros((side, side), np.uint8)
    classes = frozenset()
    if cls is not None:
        mask[0, 0] = 1
        classes = frozenset({cls})
    return ImageSample(f"s{i:05d}", img, mask, classes)


def _apportion(total: int, weights: dict[str, int]) -> dict[str, int]:
    """Independent largest-remainder oracle in exact rationals."""
    wsum = sum(weights.values())
    quotas = {k: Fraction(total * w, wsum) for k, w in weights.items()}
    base = {k: q.numerator // q.denominator for k, q in quotas.items()}
    rest = total - sum(base.values())
    for k in sorted(weights, key=lambda k: (-(quotas[k] - base[k]), k))[:rest]:
        base[k] += 1
    return base


# --------------------------------------------------------------------------
# samples and manifests


def test_image_must_be_2d():
    with pytest.raises(ShapeError):
        ImageSample("a", np.zeros((2, 2, 3), np.uint8))


def test_mask_shape_must_match():
    with pytest.raises(ShapeError):
        ImageSample("a", np.zeros((4, 4), np.uint8), np.zeros((3, 3), np.uint8))


def test_mask_values_binary():
    with pytest.raises(DataError):
        ImageSample("a", np.zeros((2, 2), np.uint8), np.full((2, 2), 2, np.uint8))


def test_classes_must_agree_with_mask():
    with pytest.raises(DataError):
        ImageSample("a", np.zeros((2, 2), np.uint8), np.zeros((2, 2), np.uint8), frozenset({"crack"}))
    with pytest.raises(DataError):
        ImageSample("a", np.zeros((2, 2), np.uint8), np.ones((2, 2), np.uint8))


def test_autolabeled_mask_may_be_empty():
    s = ImageSample("a", np.zeros((2, 2), np.uint8), np.zeros((2, 2), np.uint8), frozenset({"crack"}),
                    Provenance.AUTOLABELED)
    assert s.is_defective and not s.mask.any()


def test_duplicate_ids_rejected():
    with pytest.raises(DataError):
        DatasetManifest([_sample(1), _sample(1)])


def test_split_map_must_cover_every_sample():
    with pytest.raises(DataError):
        DatasetManifest([_sample(1), _sample(2)], {"s00001": "train"})


def test_manifest_roundtrip(tmp_path, small_split):
    path = save_manifest(small_split, tmp_path / "m.json")
    back = load_manifest(path)
    assert back.splits == small_split.splits
    for a, b in zip(small_split.samples, back.samples):
        assert a.id == b.id and a.classes == b.classes
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)


def test_manifest_count_tamper_detected(tmp_path, small_split):
    import json

    path = save_manifest(small_split, tmp_path / "m.json")
    doc = json.loads(path.read_text())
    doc["class_counts"]["test"]["defect_free"] += 1
    path.write_text(json.dumps(doc))
    with pytest.raises(DataError):
        load_manifest(path)


# --------------------------------------------------------------------------
# normalization and patches


@given(arrays(np.uint8, st.tuples(st.integers(1, 8), st.integers(1, 8))))
def test_normalize_roundtrip(img):
    x = normalize(img)
    assert x.dtype == np.float32 and x.min() >= -1 and x.max() <= 1
    assert np.array_equal(denormalize(x), img)


def test_normalize_endpoints():
    x = normalize(np.array([[0, 255]], np.uint8))
    assert x.tolist() == [[-1.0, 1.0]]


def test_normalize_rejects_3d():
    with pytest.raises(ShapeError):
        normalize(np.zeros((2, 2, 2), np.uint8))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_patches_roundtrip(grid, patch, seed):
    img = np.random.default_rng(seed).uniform(-1, 1, (grid * patch, grid * patch)).astype(np.float32)
    tiles = extract_patches(img, patch, None)
    assert len(tiles) == grid * grid
    assert np.array_equal(assemble_patches(tiles, grid), img)


def test_patches_row_major():
    img = np.arange(16, dtype=np.float32).reshape(4, 4)
    tiles = extract_patches(img, 2, None)
    assert tiles[0].tolist() == [[0, 1], [4, 5]]
    assert tiles[1].tolist() == [[2, 3], [6, 7]]
    assert tiles[2].tolist() == [[8, 9], [12, 13]]


def test_patch_protocol_yields_256_tiles():
    tiles = extract_patches(np.zeros((64, 64), np.float32), 64, 16)
    assert len(tiles) == 256 and tiles[0].shape == (64, 64)


def test_resize_mask_stays_binary():
    m = np.zeros((64, 64), np.uint8)
    m[10:20, 5:9] = 1
    out = resize_mask(m, 1024)
    assert set(np.unique(out)) <= {0, 1}
    assert out.sum() == m.sum() * 256


# --------------------------------------------------------------------------
# splits


def test_unsupervised_reference_split():
    m = DatasetManifest([_sample(i) for i in range(1498)])
    out = split_dataset(m, "unsupervised", 0)
    sizes = {sp: len(out.subset(sp)) for sp in Split}
    assert sizes == {Split.TRAIN: 750, Split.VAL: 373, Split.TEST: 375}


def test_unsupervised_defectives_go_to_test(small_split):
    for s in small_split.samples:
        if s.is_defective:
            assert small_split.splits[s.id] is Split.TEST
    assert not any(s.is_defective for s in small_split.subset("train") + small_split.subset("val"))


def test_supervised_stratified_split():
    mix = {"crack": 18, "microcrack": 240, "finger_interruption": 117}
    samples, i = [], 0
    for cls, n in mix.items():
        for _ in range(n):
            samples.append(_sample(i, cls))
            i += 1
    out = split_dataset(DatasetManifest(samples), "supervised", 5)
    assert [len(out.subset(sp)) for sp in ("train", "val", "test")] == [232, 68, 75]
    test_alloc, val_alloc = _apportion(75, mix), _apportion(68, mix)
    for cls in mix:
        got = {sp: sum(1 for s in out.subset(sp) if DefectClass(cls) in s.classes) for sp in ("train", "val", "test")}
        assert got["test"] == test_alloc[cls]
        assert got["val"] == val_alloc[cls]
        assert got["train"] == mix[cls] - test_alloc[cls] - val_alloc[cls]
    # frozen from the oracle above
    assert test_alloc == {"crack": 4, "microcrack": 48, "finger_interruption": 23}


def test_supervised_keeps_only_test_defect_free(small_split):
    out = split_dataset(small_split, "supervised", 1)
    prior_test = {s.id for s in small_split.subset("test") if not s.is_defective}
    free = {s.id for s in out.samples if not s.is_defective}
    assert free == prior_test
    assert all(out.splits[i] is Split.TEST for i in free)


def test_split_deterministic(small_benchmark):
    a = split_dataset(small_benchmark, "unsupervised", 7)
    b = split_dataset(small_benchmark, "unsupervised", 7)
    assert a.splits == b.splits


def test_split_capacity_error():
    with pytest.raises(CapacityError):
        split_dataset(DatasetManifest([_sample(0)]), "unsupervised", 0, counts={"train": 2, "val": 0, "test": 0})
    with pytest.raises(CapacityError):
        split_dataset(DatasetManifest([_sample(0)]), "supervised", 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 60), st.integers(0, 1000))
def test_every_sample_exactly_one_split(n, seed):
    out = split_dataset(DatasetManifest([_sample(i) for i in range(n)]), "unsupervised", seed)
    assert len(out.splits) == n
    assert sum(len(out.subset(sp)) for sp in Split) == n
