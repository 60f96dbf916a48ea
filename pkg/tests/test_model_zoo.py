from __future__ import annotations

import json

import pytest
import torch
from torch import nn

from elinspect.errors import ConfigError, ContractError, IntegrityError
from elinspect.model_zoo import (
    KINDS,
    ModelSpec,
    build_model,
    forward_shape_check,
    instantiate,
    load_checkpoint,
    save_checkpoint,
    weights_hash,
)


@pytest.mark.parametrize(
    "kind,size",
    [("generator", 64), ("discriminator", 64), ("encoder", 64), ("autoencoder64", 64),
     ("autoencoder256", 256), ("unet", 64), ("generator", 256), ("encoder", 256)],
)
def test_forward_shapes_match_plan(kind, size):
    spec = build_model(kind, size, width=4 if kind in ("generator", "discriminator", "encoder") else None)
    rep = forward_shape_check(spec)
    assert rep.output_shape == (2, *spec.output_shape)
    assert [n for n, _ in rep.layers] == [p.name for p in spec.layer_plan]


def test_segmentation_output_matches_input_size():
    spec = build_model("unet", 64)
    assert spec.output_shape == (1, 64, 64)
    lo, hi = forward_shape_check(spec).output_range
    assert 0.0 <= lo and hi <= 1.0


def test_feature_dim_reported():
    spec = build_model("discriminator", 64, width=4)
    assert forward_shape_check(spec).feature_dim == spec.feature_dim


def test_unsupported_size_and_kind():
    with pytest.raises(ConfigError):
        build_model("generator", 128)
    with pytest.raises(ConfigError):
        build_model("transformer", 64)
    with pytest.raises(ConfigError):
        build_model("unet", 60)


def test_contract_error_names_layer():
    spec = build_model("encoder", 64, width=4)
    module = instantiate(spec, 0)
    module.blocks["down2"] = nn.Conv2d(4, 8, 3, 1, 1)  # keeps resolution instead of halving
    with pytest.raises(ContractError, match="down2"):
        forward_shape_check(spec, module=module)


def test_equivalent_block_passes():
    spec = build_model("discriminator", 64, width=4)
    module = instantiate(spec, 0)
    module.blocks["down1"] = nn.Sequential(nn.Conv2d(1, 4, 3, 1, 1), nn.AvgPool2d(2))
    forward_shape_check(spec, module=module)


def test_spec_dict_roundtrip():
    spec = build_model("discriminator", 64, width=4)
    assert ModelSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_seeded_instantiation_is_reproducible():
    spec = build_model("generator", 64, width=4)
    assert weights_hash(instantiate(spec, 3)) == weights_hash(instantiate(spec, 3))
    assert weights_hash(instantiate(spec, 3)) != weights_hash(instantiate(spec, 4))


def test_checkpoint_roundtrip(tmp_path):
    nets = {"generator": instantiate(build_model("generator", 64, width=4), 1),
            "discriminator": instantiate(build_model("discriminator", 64, width=4), 2)}
    save_checkpoint(tmp_path / "ck", nets, {"phase": 1})
    ck = load_checkpoint(tmp_path / "ck")
    assert ck.meta["phase"] == 1
    for role, net in nets.items():
        assert weights_hash(ck.networks[role]) == weights_hash(net)
        assert not ck.networks[role].training


def test_checkpoint_bytes_are_deterministic(tmp_path):
    net = {"unet": instantiate(build_model("unet", 64), 0)}
    save_checkpoint(tmp_path / "a", net, {})
    save_checkpoint(tmp_path / "b", net, {})
    for f in ("weights.safetensors", "meta.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_tampered_checkpoint_rejected(tmp_path):
    save_checkpoint(tmp_path / "ck", {"encoder": instantiate(build_model("encoder", 64, width=4), 0)}, {})
    w = tmp_path / "ck" / "weights.safetensors"
    data = bytearray(w.read_bytes())
    data[-1] ^= 0xFF
    w.write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "ck")


def test_spec_mismatch_rejected(tmp_path):
    save_checkpoint(tmp_path / "ck", {"encoder": instantiate(build_model("encoder", 64, width=4), 0)}, {})
    meta_path = tmp_path / "ck" / "meta.json"
    meta = json.loads(meta_path.read_text())
    meta["specs"]["encoder"] = build_model("encoder", 64, width=8).to_dict()
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "ck")


def test_missing_checkpoint(tmp_path):
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "nothing")


def test_all_kinds_known():
    assert set(KINDS) >= {"generator", "discriminator", "encoder", "autoencoder64", "autoencoder256", "unet"}


def test_generator_output_in_tanh_range():
    g = instantiate(build_model("generator", 64, width=4), 0).eval()
    with torch.no_grad():
        y = g(torch.randn(3, 128) * 50)
    assert y.abs().max() <= 1.0
