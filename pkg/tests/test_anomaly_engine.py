from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import ConstantModel, IdentityModel
from elinspect.anomaly_engine import (
    AnomalyResult,
    FAnoGANModel,
    Threshold,
    anomaly_score,
    binarize,
    calibrate_threshold,
    infer_cell,
    model_from_checkpoint,
    reconstruct,
    residual_map,
)
from elinspect.errors import ConfigError, DataError, ShapeError
from elinspect.model_zoo import build_model, instantiate

finite = st.floats(0, 2, allow_nan=False, width=32)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=finite), finite)
def test_binarize_matches_elementwise_definition(rmap, c):
    out = binarize(rmap, c)
    expected = np.array([[1 if v >= c else 0 for v in row] for row in rmap.tolist()], dtype=np.uint8)
    assert np.array_equal(out, expected)


def test_binarize_edge_cases():
    rmap = np.array([[0.0, 0.5], [0.2, 1.0]], np.float32)
    assert binarize(rmap, 0.0).all()
    assert binarize(rmap, 0.5).tolist() == [[0, 1], [0, 1]]  # inclusive
    with pytest.raises(ConfigError):
        binarize(rmap, -0.1)
    with pytest.raises(ConfigError):
        Threshold(c=-1)


def test_residual_shape_mismatch():
    with pytest.raises(ShapeError):
        residual_map(np.zeros((4, 4)), np.zeros((4, 5)))


def test_identity_model_gives_zero_residual(defect_free):
    res = infer_cell(defect_free[0].image, IdentityModel(), "whole", c=0.01)
    assert res.score_total == 0.0
    assert not res.residual_map.any()
    assert res.mask_pixels == 0


@settings(max_examples=20, deadline=None)
@given(st.floats(-1, 1), st.floats(0, 3), st.integers(0, 2**31))
def test_score_decomposition(value, k, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, (64, 64)).astype(np.float32)
    model = ConstantModel(value, k=1.0)
    res = anomaly_score(x, model, k)
    assert res.score_total == res.score_image + k * res.score_feature


def test_score_terms_against_direct_computation():
    x = np.linspace(-1, 1, 64 * 64, dtype=np.float32).reshape(64, 64)
    res = anomaly_score(x, ConstantModel(0.25, feature_scale=0.5), 2.0)
    image = float(np.mean((x.astype(np.float64) - 0.25) ** 2))
    feature = 0.5 * float(np.mean(np.abs(x.astype(np.float64) - 0.25)))
    assert res.score_image == pytest.approx(image, rel=1e-6)
    assert res.score_feature == pytest.approx(feature, rel=1e-6)
    assert res.score_total == res.score_image + 2.0 * res.score_feature


def test_fanogan_model_terms(tiny_phase2):
    nets = tiny_phase2.networks
    model = FAnoGANModel(nets["encoder"], nets["generator"], nets["discriminator"], k=1.0)
    x = np.random.default_rng(0).uniform(-1, 1, (64, 64)).astype(np.float32)
    res = anomaly_score(x, model)
    recon = reconstruct(x, nets["encoder"], nets["generator"])
    assert res.score_image == pytest.approx(float(np.mean((x - recon) ** 2)), rel=1e-5)
    assert np.allclose(res.residual_map, np.abs(x - recon), atol=1e-6)
    assert res.score_total == res.score_image + res.score_feature


def test_model_from_checkpoint(tiny_phase2):
    model = model_from_checkpoint(tiny_phase2.checkpoint())
    assert isinstance(model, FAnoGANModel) and model.k == 1.0


def test_reconstruct_checks_shape(tiny_phase2):
    nets = tiny_phase2.networks
    with pytest.raises(ShapeError):
        reconstruct(np.zeros((32, 32), np.float32), nets["encoder"], nets["generator"])


def test_whole_mode_single_pass(defect_free):
    model = IdentityModel()
    res = infer_cell(defect_free[0].image, model, "whole")
    assert res.forward_passes == 1 and model.forward_passes == 1
    assert res.residual_map.shape == (64, 64)


def test_patch_mode_256_passes(defect_free):
    model = IdentityModel()
    res = infer_cell(defect_free[0].image, model, "patch")
    assert res.forward_passes == 256
    assert res.residual_map.shape == (1024, 1024)
    assert len(res.patch_scores) == 256 and len(res.pass_seconds) == 256


class OnePatchModel(ConstantModel):
    """Flags exactly the patch whose mean exceeds ``cut``."""

    def __init__(self, cut: float):
        super().__init__()
        self.cut = cut

    def _run(self, x):
        recon = x.clone()
        bad = x.flatten(1).mean(1) > self.cut
        recon[bad] = -1.0
        image = ((x - recon) ** 2).flatten(1).mean(1)
        return recon, image, torch.zeros_like(image)


def test_patch_aggregation_flags_cell_on_single_patch():
    cell = np.full((1024, 1024), -0.5, np.float32)
    cell[64:128, 192:256] = 0.9  # patch index 1*16 + 3
    res = infer_cell(cell, OnePatchModel(0.0), "patch", score_threshold=0.5)
    assert res.defective is True
    assert int(np.argmax(res.patch_scores)) == 19
    assert (res.patch_scores >= 0.5).sum() == 1
    clean = infer_cell(np.full((1024, 1024), -0.5, np.float32), OnePatchModel(0.0), "patch", score_threshold=0.5)
    assert clean.defective is False


def test_unknown_mode():
    with pytest.raises(ConfigError):
        infer_cell(np.zeros((64, 64), np.uint8), IdentityModel(), "tiles")


def test_model_input_size_enforced():
    with pytest.raises(ShapeError):
        IdentityModel(64).run(torch.zeros(1, 1, 32, 32))


def test_calibration_quantile():
    maps = [np.full((4, 4), v, np.float32) for v in range(10)]
    t = calibrate_threshold(maps, 0.5, "val")
    assert t.c == pytest.approx(float(np.quantile(np.concatenate([m.ravel() for m in maps]), 0.5)))
    assert t.quantile == 0.5 and t.validation_set == "val"


def test_calibration_score_threshold():
    results = [AnomalyResult(float(i), float(i), 0.0, residual_map=np.full((2, 2), i * 0.1)) for i in range(5)]
    t = calibrate_threshold(results, 0.75)
    assert t.score_threshold == pytest.approx(np.quantile(np.arange(5.0), 0.75))


@pytest.mark.parametrize("q", [0.0, 1.0, 1.5, -0.1])
def test_calibration_rejects_degenerate_quantiles(q):
    with pytest.raises(ConfigError):
        calibrate_threshold([np.zeros((2, 2))], q)


def test_calibration_requires_data():
    with pytest.raises(DataError):
        calibrate_threshold([], 0.9)


def test_inference_is_deterministic(defective, tiny_phase2):
    model = model_from_checkpoint(tiny_phase2.checkpoint())
    a = infer_cell(defective[0].image, model, "whole", c=0.1)
    b = infer_cell(defective[0].image, model, "whole", c=0.1)
    assert a.score_total == b.score_total
    assert np.array_equal(a.mask, b.mask)


def test_untrained_model_runs_on_both_protocols(defect_free):
    nets = {k: instantiate(build_model(k, 64, width=4), i).eval() for i, k in
            enumerate(("encoder", "generator", "discriminator"))}
    model = FAnoGANModel(nets["encoder"], nets["generator"], nets["discriminator"])
    for mode in ("whole", "patch"):
        res = infer_cell(defect_free[0].image, model, mode, c=0.5)
        assert np.isfinite(res.score_total)
        assert res.mask.shape == res.residual_map.shape
