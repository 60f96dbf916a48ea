from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import IdentityModel
from elinspect.autolabel import autolabel_dataset
from elinspect.dataset_core import ImageSample, Provenance
from elinspect.errors import ConfigError, DataError, DomainError, IntegrityError, ShapeError
from elinspect.model_zoo import load_checkpoint
from elinspect.segmentation import DiceConfig, dice_loss, segment, train_unet


def test_dice_perfect_overlap():
    g = torch.tensor([[1.0, 0.0], [1.0, 1.0]])
    assert float(dice_loss(g, g, 0.0)) == -1.0


def test_dice_no_overlap():
    g = torch.tensor([1.0, 1.0, 0.0])
    assert float(dice_loss(torch.zeros(3), g, 0.0)) == 0.0
    assert float(dice_loss(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]), 0.0)) == 0.0


def test_dice_smoothing_handles_empty_maps():
    assert float(dice_loss(torch.zeros(4), torch.zeros(4), 1.0)) == -1.0
    with pytest.raises(DomainError):
        dice_loss(torch.zeros(4), torch.zeros(4), 0.0)


def test_dice_domain_errors():
    with pytest.raises(DomainError):
        dice_loss(torch.tensor([1.2]), torch.tensor([1.0]))
    with pytest.raises(DomainError):
        dice_loss(torch.tensor([0.5]), torch.tensor([0.5]))
    with pytest.raises(ShapeError):
        dice_loss(torch.zeros(3), torch.zeros(4))
    with pytest.raises(ConfigError):
        DiceConfig(smoothing_epsilon=-1)


def test_dice_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(0)
    for _ in range(5):
        p = torch.rand(4, 4, generator=gen, dtype=torch.float64) * 0.8 + 0.1
        g = (torch.rand(4, 4, generator=gen, dtype=torch.float64) > 0.5).double()
        g[0, 0] = 1.0
        p.requires_grad_(True)
        (analytic,) = torch.autograd.grad(dice_loss(p, g, 0.0), p)
        h = 1e-6
        numeric = torch.zeros_like(p)
        with torch.no_grad():
            for i in range(4):
                for j in range(4):
                    pp, pm = p.detach().clone(), p.detach().clone()
                    pp[i, j] += h
                    pm[i, j] -= h
                    numeric[i, j] = (dice_loss(pp, g, 0.0) - dice_loss(pm, g, 0.0)) / (2 * h)
        rel = float((analytic - numeric).norm() / numeric.norm())
        assert rel < 1e-4


maps = st.integers(1, 30).flatmap(
    lambda n: st.tuples(
        st.lists(st.floats(0, 1), min_size=n, max_size=n),
        st.lists(st.sampled_from([0.0, 1.0]), min_size=n, max_size=n),
    )
)


@settings(max_examples=60, deadline=None)
@given(maps, st.floats(0, 2))
def test_dice_range(pg, eps):
    p, g = torch.tensor(pg[0], dtype=torch.float64), torch.tensor(pg[1], dtype=torch.float64)
    if eps == 0 and p.sum() + g.sum() == 0:
        return
    v = float(dice_loss(p, g, eps))
    assert -1 - 1e-12 <= v <= 1e-12


@settings(max_examples=40, deadline=None)
@given(maps, st.randoms(use_true_random=False))
def test_dice_permutation_invariance(pg, rnd):
    p, g = torch.tensor(pg[0], dtype=torch.float64), torch.tensor(pg[1], dtype=torch.float64)
    perm = list(range(len(p)))
    rnd.shuffle(perm)
    idx = torch.tensor(perm)
    assert float(dice_loss(p, g, 1.0)) == pytest.approx(float(dice_loss(p[idx], g[idx], 1.0)), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from([0.0, 1.0]), min_size=1, max_size=30))
def test_dice_minus_one_iff_equal(gl):
    g = torch.tensor(gl, dtype=torch.float64)
    if g.sum() == 0:
        return
    assert float(dice_loss(g, g, 0.0)) == -1.0
    q = g.clone()
    q[0] = 1 - q[0] if q.sum() > 1 or q[0] == 0 else 0.5
    assert float(dice_loss(q, g, 0.0)) > -1.0


def test_unet_smoke(tmp_path, defective):
    res = train_unet(defective[:8], DiceConfig(iterations=20, batch_size=4), tmp_path / "unet")
    losses = res.log.column("dice_loss")
    assert np.isfinite(losses).all() and len(losses) == 20
    ck = load_checkpoint(tmp_path / "unet")
    assert ck.meta["label_source"] == "manual"


def test_unet_missing_masks_listed(defective):
    bad = ImageSample("nomask", defective[0].image, None, frozenset())
    with pytest.raises(DataError, match="nomask"):
        train_unet([defective[0], bad], DiceConfig(iterations=1))


def test_automatic_labels_required(defective):
    with pytest.raises(DataError):
        train_unet(defective[:2], DiceConfig(iterations=1, label_source="automatic"))


def test_manual_arm_rejects_autolabels(defective):
    auto = autolabel_dataset(defective[:2], IdentityModel(), 0.5)
    with pytest.raises(DataError):
        train_unet(auto, DiceConfig(iterations=1, label_source="manual"))


def test_automatic_arm_rejects_ground_truth_copies(defective):
    s = defective[0]
    leaked = ImageSample(s.id, s.image, s.mask, s.classes, Provenance.AUTOLABELED, ground_truth=s.mask)
    with pytest.raises(IntegrityError):
        train_unet([leaked], DiceConfig(iterations=1, label_source="automatic"))


@pytest.fixture(scope="module")
def small_unet(defective):
    return train_unet(defective[:4], DiceConfig(iterations=3))


def test_segment_shapes_and_determinism(small_unet, defective):
    p1, m1 = segment(defective[0].image, small_unet)
    p2, m2 = segment(defective[0].image, small_unet)
    assert p1.shape == defective[0].image.shape == m1.shape
    assert np.array_equal(p1, p2) and np.array_equal(m1, m2)
    assert p1.min() >= 0 and p1.max() <= 1
    assert np.array_equal(m1, (p1 >= 0.5).astype(np.uint8))


def test_segment_binarize_at_zero(small_unet, defective):
    assert segment(defective[0].image, small_unet, 0.0)[1].all()


def test_segment_shape_mismatch(small_unet):
    with pytest.raises(ShapeError):
        segment(np.zeros((32, 32), np.uint8), small_unet)
