import dataclasses

import numpy as np
import pytest

from bxlstm_petct.autodiff import Tensor, no_grad
from bxlstm_petct.errors import IncompatibleInit, InvalidConfig, ShapeConflict, ShapeMismatch, VersionMismatch
from bxlstm_petct.network import (
    NetworkConfig,
    build,
    build_mae,
    load_checkpoint,
    load_encoder,
    read_checkpoint,
    save_checkpoint,
)

TINY = NetworkConfig(stages=3, base_channels=4, patch_dims=(8, 8, 8))


def _zero_xlstm(model):
    for name, p in model.named_parameters():
        if ".xlstm.fwd." in name or ".xlstm.bwd." in name:
            p.data[:] = 0


def test_desk_forward_shape():
    cfg = NetworkConfig()
    assert cfg.patch_dims == (32, 48, 40)
    x = np.random.default_rng(0).standard_normal((1, 2) + cfg.patch_dims).astype(np.float32)
    with no_grad():
        assert build(cfg)(Tensor(x)).shape == (1, 2, 32, 48, 40)


def test_placements_differ_only_in_xlstm_parameters():
    names = {p: {n for n, _ in build(dataclasses.replace(TINY, xlstm_placement=p)).named_parameters()} for p in ("none", "enc", "bot")}
    assert names["bot"] - names["none"] == {n for n in names["bot"] if "xlstm" in n}
    assert names["enc"] - names["none"] == {n for n in names["enc"] if "xlstm" in n}
    bot_blocks = {n.split(".xlstm.")[0] for n in names["bot"] if "xlstm" in n}
    enc_blocks = {n.split(".xlstm.")[0] for n in names["enc"] if "xlstm" in n}
    assert len(bot_blocks) == 1 and len(enc_blocks) == TINY.stages


def test_seeded_builds_are_bit_identical():
    a, b = build(TINY), build(TINY)
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    assert pa.keys() == pb.keys()
    assert all(np.array_equal(pa[k].data, pb[k].data) for k in pa)


def test_zeroed_xlstm_reduces_every_placement_to_plain_unet():
    x = Tensor(np.random.default_rng(1).standard_normal((1, 2, 8, 8, 8)).astype(np.float32))
    outs = []
    for placement in ("none", "enc", "bot"):
        model = build(dataclasses.replace(TINY, xlstm_placement=placement))
        _zero_xlstm(model)
        with no_grad():
            outs.append(model(x).data)
    assert np.array_equal(outs[0], outs[1]) and np.array_equal(outs[0], outs[2])


def test_batch_items_are_independent():
    model = build(TINY)
    x = np.random.default_rng(2).standard_normal((2, 2, 8, 8, 8)).astype(np.float32)
    with no_grad():
        y = model(Tensor(x)).data
        y_swapped = model(Tensor(np.ascontiguousarray(x[::-1]))).data
    assert np.array_equal(y[::-1], y_swapped)


def test_zero_input_gives_finite_logits():
    with no_grad():
        y = build(TINY)(Tensor(np.zeros((1, 2, 8, 8, 8), np.float32))).data
    assert np.all(np.isfinite(y))


def test_mae_head_reconstructs_input_channels():
    with no_grad():
        y = build_mae(TINY)(Tensor(np.zeros((1, 2, 8, 8, 8), np.float32)))
    assert y.shape == (1, 2, 8, 8, 8)


def test_input_checks():
    model = build(TINY)
    with pytest.raises(ShapeMismatch):
        model(Tensor(np.zeros((1, 1, 8, 8, 8), np.float32)))
    with pytest.raises(ShapeMismatch):
        model(Tensor(np.zeros((1, 2, 8, 6, 8), np.float32)))


def test_config_validation():
    with pytest.raises(InvalidConfig):
        build(dataclasses.replace(TINY, xlstm_placement="middle"))
    with pytest.raises(InvalidConfig):
        build(dataclasses.replace(TINY, patch_dims=(8, 8, 6)))
    with pytest.raises(InvalidConfig):
        NetworkConfig.from_dict({"stages": 2, "colour": "red"})


def test_config_round_trip():
    assert NetworkConfig.from_dict(TINY.to_dict()) == TINY


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = build(TINY)
    for p in model.parameters():
        p.data = p.data + np.float32(0.123)
    save_checkpoint(model, tmp_path / "m.ckpt", "finetuned")
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    assert loaded.config == TINY and loaded.stage_tag == "finetuned"
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()


def test_checkpoint_corruption_is_detected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build(TINY), path, "finetuned")
    raw = path.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ShapeConflict):
        read_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(VersionMismatch):
        read_checkpoint(tmp_path / "magic.ckpt")


def test_encoder_transfer_reports_fresh_decoder(tmp_path):
    mae = build_mae(TINY)
    for p in mae.parameters():
        p.data = p.data + np.float32(1.0)
    save_checkpoint(mae, tmp_path / "mae.ckpt", "mae_pretrained")
    seg = build(TINY)
    before = {n: p.data.copy() for n, p in seg.named_parameters()}
    report = load_encoder(seg, tmp_path / "mae.ckpt")
    params = dict(seg.named_parameters())
    mae_params = dict(mae.named_parameters())
    assert report["copied"] and all(n.startswith("encoder.") for n in report["copied"])
    assert set(report["fresh"]) == {n for n in params if not n.startswith("encoder.")}
    assert all(np.array_equal(params[n].data, mae_params[n].data) for n in report["copied"])
    assert all(np.array_equal(params[n].data, before[n]) for n in report["fresh"])


def test_encoder_transfer_rejects_other_architecture(tmp_path):
    save_checkpoint(build_mae(TINY), tmp_path / "mae.ckpt", "mae_pretrained")
    with pytest.raises(IncompatibleInit):
        load_encoder(build(dataclasses.replace(TINY, base_channels=2)), tmp_path / "mae.ckpt")
