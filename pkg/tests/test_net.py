import math
import struct

import numpy as np
import pytest

from grnet import gradcheck, layers, net
from grnet.errors import BadMagic, BadVersion, CacheMismatch, ConfigInvalid, ShapeMismatch, TruncatedFile
from grnet.net import BlockSpec, NetworkConfig

from conftest import orthonormal


def one_block(**kw):
    return NetworkConfig(input_dim=12, order=2, n_classes=3, blocks=[BlockSpec(12, 6, 2, "W", 4)], **kw)


def test_block_spec_parse():
    b = BlockSpec.parse("20:12:4:W4")
    assert b == BlockSpec(20, 12, 4, "W", 4)
    assert str(b) == "20:12:4:W4" and b.out_dim == 6 and b.out_channels(1) == 4
    with pytest.raises(ConfigInvalid, match="d_in:d_out"):
        BlockSpec.parse("20:12:4")


@pytest.mark.parametrize("blocks", [
    [BlockSpec(12, 12, 2, "W", 4)],
    [BlockSpec(12, 6, 3, "A", 2)],
    [BlockSpec(12, 6, 2, "W", 16)],
    [BlockSpec(12, 6, 2, "W", 8)],
    [BlockSpec(12, 2, 2, "W", 4)],
    [BlockSpec(10, 6, 2, "W", 4)],
    [BlockSpec(12, 6, 2, "X", 4)],
])
def test_invalid_configs(blocks):
    with pytest.raises(ConfigInvalid):
        NetworkConfig(input_dim=12, order=2, n_classes=2, blocks=blocks).validate()


@pytest.mark.parametrize("kw", [{"order": 0}, {"seed": -1}, {"n_classes": 1}, {"lr": float("nan")}, {"retraction": "x"}])
def test_invalid_scalars(kw):
    args = {"input_dim": 6, "order": 2, "n_classes": 2, **kw}
    with pytest.raises(ConfigInvalid):
        NetworkConfig(**args).validate()


def test_build_deterministic():
    a, b = net.build(one_block(seed=4)), net.build(one_block(seed=4))
    for x, y in zip(a.parameters(), b.parameters()):
        assert x.tobytes() == y.tobytes()
    c = net.build(one_block(seed=5))
    assert not np.array_equal(a.frmaps[0], c.frmaps[0])


def test_build_shapes_and_zero_bias():
    m = net.build(one_block())
    assert m.frmaps[0].shape == (2, 6, 12)
    assert m.fc_weight.shape == (3, 2 * 3 * 3)
    assert not m.fc_bias.any()


def test_zero_block_is_projection_plus_softmax(rng):
    cfg = NetworkConfig(input_dim=5, order=2, n_classes=4)
    m = net.build(cfg)
    assert m.frmaps == [] and m.fc_weight.shape == (4, 25)
    m.fc_weight[:] = 0
    probs, _ = net.forward(m, orthonormal(rng, 3, 5, 2))
    np.testing.assert_array_equal(probs, np.full((3, 4), 0.25))


def test_forward_rows_sum_to_one(rng):
    m = net.build(one_block())
    probs, _ = net.forward(m, orthonormal(rng, 7, 12, 2))
    assert np.all(np.abs(probs.sum(axis=1) - 1) < 1e-12)
    assert np.all(np.isfinite(probs))


def test_channel_arithmetic_a_pool(rng):
    cfg = NetworkConfig(input_dim=16, order=3, n_classes=2, blocks=[BlockSpec(16, 8, 4, "A", 4)])
    assert cfg.validate().fc_inputs == 1 * 8 * 8
    _, tape = net.forward(net.build(cfg), orthonormal(rng, 2, 16, 3))
    c_proj, _ = tape.entries[-1]
    assert c_proj.x.shape == (2, 1, 8, 3)


def test_two_blocks_forward(rng):
    cfg = NetworkConfig(input_dim=16, order=2, n_classes=2,
                        blocks=[BlockSpec(16, 12, 2, "W", 4), BlockSpec(6, 4, 2, "A", 2)])
    probs, tape = net.forward(net.build(cfg), orthonormal(rng, 3, 16, 2))
    assert probs.shape == (3, 2) and len(tape.entries) == 3


def test_forward_deterministic(rng):
    m = net.build(one_block())
    x = orthonormal(rng, 4, 12, 2)
    assert np.array_equal(net.forward(m, x)[0], net.forward(m, x)[0])


def test_forward_shape_errors(rng):
    m = net.build(one_block())
    with pytest.raises(ShapeMismatch):
        net.forward(m, orthonormal(rng, 2, 10, 2))


@pytest.mark.parametrize("pool", ["W", "A"])
def test_full_network_finite_differences(pool):
    rep = gradcheck.check_network(gradcheck.tiny_network_config(pool), seed=3)
    assert rep.passed, rep.line()


def test_backward_linear_in_sample_weights(rng):
    m = net.build(one_block())
    x, labels = orthonormal(rng, 4, 12, 2), np.array([0, 1, 2, 1])
    _, tape = net.forward(m, x)
    w = rng.uniform(0.1, 1.0, 4)
    g1 = net.backward(m, tape, labels, w)
    g2 = net.backward(m, tape, labels, 2 * w)
    for a, b in zip(g1.arrays(), g2.arrays()):
        np.testing.assert_allclose(b, 2 * a, rtol=1e-13, atol=1e-300)


def test_backward_mean_is_average_of_singles(rng):
    m = net.build(one_block())
    x, labels = orthonormal(rng, 3, 12, 2), np.array([2, 0, 1])
    _, tape = net.forward(m, x)
    full = net.backward(m, tape, labels)
    singles = [net.backward(m, net.forward(m, x[i : i + 1])[1], labels[i : i + 1]) for i in range(3)]
    for k, a in enumerate(full.arrays()):
        np.testing.assert_allclose(a, sum(s.arrays()[k] for s in singles) / 3, atol=1e-13)


def test_onehot_probabilities_give_zero_gradients(rng):
    cfg = NetworkConfig(input_dim=4, order=1, n_classes=2)
    m = net.build(cfg)
    m.fc_weight[:] = 0
    m.fc_bias[:] = [1000.0, 0.0]
    _, tape = net.forward(m, orthonormal(rng, 2, 4, 1))
    for g in net.backward(m, tape, np.array([0, 0])).arrays():
        assert not g.any()


def test_tape_replay_and_mismatch(rng):
    m = net.build(one_block())
    x, labels = orthonormal(rng, 2, 12, 2), np.array([0, 2])
    _, tape = net.forward(m, x)
    a, b = net.backward(m, tape, labels), net.backward(m, tape, labels)
    for u, v in zip(a.arrays(), b.arrays()):
        assert np.array_equal(u, v)
    other = net.build(NetworkConfig(input_dim=12, order=2, n_classes=3))
    with pytest.raises(CacheMismatch):
        net.backward(other, tape, labels)
    with pytest.raises(ShapeMismatch):
        net.backward(m, tape, np.array([0]))


def test_loss_examples(rng):
    assert net.loss(np.eye(3), np.arange(3)) <= 1e-14
    assert net.loss(np.full((2, 4), 0.25), np.array([1, 3])) == pytest.approx(math.log(4), abs=1e-15)
    assert net.loss(np.array([[0.0, 1.0]]), np.array([0])) == pytest.approx(-math.log(1e-15))
    with pytest.raises(ShapeMismatch):
        net.loss(np.full((2, 4), 0.25), np.array([1]))


def test_loss_matches_scalar_loop(rng):
    p = rng.uniform(size=(6, 5))
    p /= p.sum(axis=1, keepdims=True)
    labels = rng.integers(0, 5, 6)
    total = 0.0
    for i in range(6):
        total += -math.log(max(p[i, labels[i]], 1e-15))
    assert abs(net.loss(p, labels) - total / 6) < 1e-12


def test_predict_chunks_match_forward(rng):
    m = net.build(one_block())
    x = orthonormal(rng, 7, 12, 2)
    # BLAS may round differently per batch size
    np.testing.assert_allclose(net.predict(m, x, chunk=3), net.forward(m, x)[0], rtol=0, atol=1e-15)
    assert net.predict(m, x[:0]).shape == (0, 3)


def test_error_tagged_with_block_and_sample(rng):
    m = net.build(one_block())
    m.frmaps[0][1] = 0.0
    with pytest.raises(Exception) as info:
        net.forward(m, orthonormal(rng, 2, 12, 2))
    assert "block 0" in str(info.value) and "sample 0" in str(info.value)


def test_pool_stage_is_fig_order(rng):
    m = net.build(one_block())
    x = orthonormal(rng, 1, 12, 2)
    probs, _ = net.forward(m, x)
    h, _ = layers.frmap_fwd(x[:, None], m.frmaps[0])
    h, _ = layers.reorth_fwd(h)
    h, _ = layers.projmap_fwd(h)
    h, _ = layers.projpool_w_fwd(h, 4)
    h, _ = layers.orthmap_fwd(h, 2)
    h, _ = layers.projmap_fwd(h)
    ref, _ = layers.fc_softmax_fwd(h, m.fc_weight, m.fc_bias)
    np.testing.assert_array_equal(probs, ref)


class TestModelFile:
    def test_round_trip(self, tmp_path):
        cfg = NetworkConfig(input_dim=16, order=2, n_classes=3, retraction="stiefel", lr=0.05, batch_size=7,
                            epochs=3, seed=2**40, blocks=[BlockSpec(16, 12, 2, "W", 4), BlockSpec(6, 4, 2, "A", 2)])
        m = net.build(cfg)
        path = tmp_path / "m.grnm"
        net.save_model(m, path)
        back = net.load_model(path)
        assert back.config == cfg
        for a, b in zip(m.parameters(), back.parameters()):
            assert a.tobytes() == b.tobytes()

    def test_layout(self, tmp_path):
        m = net.build(NetworkConfig(input_dim=3, order=1, n_classes=2))
        path = tmp_path / "m.grnm"
        net.save_model(m, path)
        raw = path.read_bytes()
        assert raw[:4] == b"GRNM"
        assert struct.unpack_from("<IIIII", raw, 4) == (1, 3, 1, 2, 0)
        assert struct.unpack_from("<IdIIq", raw, 24) == (0, 0.01, 30, 100, 0)
        body = np.frombuffer(raw[24 + struct.calcsize("<IdIIq"):], dtype="<f8")
        np.testing.assert_array_equal(body, np.concatenate([m.fc_weight.ravel(), m.fc_bias]))

    def test_errors(self, tmp_path):
        m = net.build(one_block())
        path = tmp_path / "m.grnm"
        net.save_model(m, path)
        raw = path.read_bytes()
        bad = tmp_path / "bad"
        bad.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(BadMagic):
            net.load_model(bad)
        bad.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
        with pytest.raises(BadVersion):
            net.load_model(bad)
        bad.write_bytes(raw[:-1])
        with pytest.raises(TruncatedFile):
            net.load_model(bad)
        bad.write_bytes(raw + b"\0")
        with pytest.raises(TruncatedFile):
            net.load_model(bad)
