import numpy as np
import pytest

from tdseg.subnet import (SubNet, SubNetConfig, build_subnets, encode_qkv, forward_features,
                          load_parameters, parameter_count, predict, save_parameters, trunk_macs)
from tdseg import formats
from tdseg.tensor import ShapeError, Tensor, mac_ledger


def zero_bias_net(cfg=SubNetConfig(), seed=0):
    net = SubNet(cfg, seed=seed)
    for p in net.parameters():
        if p.name.endswith("bias"):
            p.data[...] = 0
    return net


def test_d_k_rounding():
    assert SubNetConfig(feature_channels=16).d_k == 2
    assert SubNetConfig(feature_channels=64).d_k == 8
    assert SubNetConfig(feature_channels=12).d_k == 2
    assert SubNetConfig(feature_channels=4).d_k == 1


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        SubNetConfig(depth=0)
    with pytest.raises(ValueError):
        SubNetConfig(downsample_factor=3)
    with pytest.raises(ValueError):
        SubNetConfig(depth=1, downsample_factor=4)


def test_forward_zero_frame_gives_zero_features():
    feats = forward_features(zero_bias_net(), np.zeros((3, 16, 16)))
    assert np.all(feats.data == 0)


def test_forward_shape_contract():
    net = SubNet(SubNetConfig(downsample_factor=4))
    assert forward_features(net, np.random.default_rng(0).random((3, 32, 32))).shape == (16, 8, 8)


def test_forward_deterministic():
    net = SubNet(SubNetConfig())
    frame = np.random.default_rng(1).random((3, 16, 16))
    np.testing.assert_array_equal(forward_features(net, frame).data, forward_features(net, frame.copy()).data)


def test_forward_indivisible_extent():
    with pytest.raises(ShapeError, match="divisible"):
        forward_features(SubNet(SubNetConfig()), np.zeros((3, 18, 16)))


def test_encode_qkv_channels_and_linearity():
    net = zero_bias_net()
    feats = Tensor(np.random.default_rng(2).normal(size=(16, 4, 4)))
    maps = encode_qkv(net, feats)
    assert maps.q.shape == (2, 4, 4) and maps.k.shape == (2, 4, 4) and maps.v.shape == (16, 4, 4)
    zero = encode_qkv(net, Tensor(np.zeros((16, 4, 4))))
    assert all(np.all(t.data == 0) for t in (zero.q, zero.k, zero.v))
    doubled = encode_qkv(net, Tensor(2 * feats.data))
    np.testing.assert_allclose(doubled.v.data, 2 * maps.v.data, atol=1e-12)


def test_encode_channel_mismatch():
    with pytest.raises(ShapeError):
        encode_qkv(SubNet(SubNetConfig()), Tensor(np.zeros((8, 4, 4))))


def test_predict():
    net = zero_bias_net(SubNetConfig(num_classes=11))
    assert np.all(predict(net, Tensor(np.zeros((16, 3, 3)))).data == 0)
    logits = predict(net, Tensor(np.random.default_rng(0).normal(size=(16, 5, 5))))
    assert logits.shape == (11, 5, 5)
    labels = logits.data.argmax(axis=0)
    assert labels.min() >= 0 and labels.max() < 11
    with pytest.raises(ShapeError):
        predict(net, Tensor(np.zeros((8, 3, 3))))


def test_independent_paths_do_not_alias():
    nets = build_subnets(SubNetConfig(), 4, seed=3)
    ids = [{id(p) for p in n.parameters()} for n in nets]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not ids[i] & ids[j]
    assert not np.array_equal(nets[0].trunk[0].weight.data, nets[1].trunk[0].weight.data)


def test_shared_vs_independent_parameter_count():
    cfg = SubNetConfig()
    for m in (2, 4):
        shared = build_subnets(cfg, m, shared=True)
        indep = build_subnets(cfg, m, shared=False)
        assert all(n is shared[0] for n in shared)
        assert parameter_count(indep) == m * parameter_count(shared)


def test_trunk_macs_match_instrumented_and_scale_with_depth():
    cfg = SubNetConfig(depth=2, downsample_factor=4)
    net = SubNet(cfg)
    with mac_ledger() as led:
        forward_features(net, np.zeros((3, 64, 64)))
    assert led["trunk"] == trunk_macs(net.trunk, 64, 64)
    m = 4
    deep = SubNet(SubNetConfig(depth=m * cfg.depth, downsample_factor=4))
    ratio = trunk_macs(net.trunk, 64, 64) / trunk_macs(deep.trunk, 64, 64)
    # first block differs (RGB input, stride 2), so the ratio is near but not exactly 1/m
    assert abs(ratio - 1 / m) <= 0.15 / m


def test_checkpoint_roundtrip(tmp_path):
    net = SubNet(SubNetConfig(), seed=5)
    path = tmp_path / "net.ckpt"
    save_parameters(path, net.parameters())
    other = SubNet(SubNetConfig(), seed=6)
    load_parameters(other.parameters(), formats.read_checkpoint(path))
    for a, b in zip(net.parameters(), other.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
