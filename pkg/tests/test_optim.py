import numpy as np
import pytest

from grnet import data, manifold, net, optim
from grnet.errors import ConfigInvalid, EmptyDataset, ShapeMismatch
from grnet.net import BlockSpec, NetworkConfig

from conftest import orthonormal


def tiny(retraction="psd", seed=0):
    cfg = NetworkConfig(input_dim=12, order=2, n_classes=3, blocks=[BlockSpec(12, 6, 2, "W", 4)],
                        retraction=retraction, batch_size=8, epochs=3, seed=seed)
    return net.build(cfg)


@pytest.fixture(scope="module")
def small_task():
    return data.gen_synthetic(3, 12, 12, 2, 0.1, seed=3)


def zero_grads(model):
    return net.ModelGrads([np.zeros_like(w) for w in model.frmaps],
                          np.zeros_like(model.fc_weight), np.zeros_like(model.fc_bias))


def same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def test_zero_gradients_leave_model_unchanged():
    m = tiny()
    before = m.copy()
    optim.step(m, zero_grads(m), optim.OptimState(0.01))
    assert same(m, before)


def test_zero_lr_leaves_model_unchanged(rng):
    m = tiny()
    before = m.copy()
    x = orthonormal(rng, 4, 12, 2)
    grads, _ = optim.batch_gradients(m, x, np.array([0, 1, 2, 0]))
    state = optim.OptimState(0.0)
    optim.step(m, grads, state)
    assert same(m, before) and state.steps == 1


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("mode", ["psd", "stiefel"])
def test_small_step_descends(seed, mode):
    rng = np.random.default_rng(seed)
    m = tiny(mode, seed)
    x, labels = orthonormal(rng, 6, 12, 2), rng.integers(0, 3, 6)
    if mode == "stiefel":
        m.frmaps = [manifold.retract(w, mode) for w in m.frmaps]
    before = net.loss(net.forward(m, x)[0], labels)
    grads, _ = optim.batch_gradients(m, x, labels)
    optim.step(m, grads, optim.OptimState(1e-4, mode))
    assert net.loss(net.forward(m, x)[0], labels) < before


def test_psd_step_size_bound(rng):
    m = tiny()
    x, labels = orthonormal(rng, 5, 12, 2), rng.integers(0, 3, 5)
    grads, _ = optim.batch_gradients(m, x, labels)
    for lr in (1e-3, 1e-6):
        after = optim.step(m.copy(), grads, optim.OptimState(lr))
        for w0, w1, g in zip(m.frmaps, after.frmaps, grads.frmaps):
            rg = manifold.riemannian_grad(w0, g)
            assert np.linalg.norm(w1 - w0) / lr <= np.linalg.norm(rg) + 1e-9


def test_stiefel_rows_orthonormal_every_step(small_task):
    train, _ = small_task
    m = tiny("stiefel")

    def check(model, state):
        for w in model.frmaps:
            assert np.all(manifold.orthonormality_error(np.swapaxes(w, -1, -2)) < 1e-12)

    optim.train(m, train, epochs=2, batch_size=5, on_step=check)


def test_step_shape_errors():
    m = tiny()
    g = zero_grads(m)
    g.fc_bias = np.zeros(5)
    with pytest.raises(ShapeMismatch):
        optim.step(m, g, optim.OptimState())
    with pytest.raises(ConfigInvalid):
        optim.OptimState(-1.0)


def test_epochs_zero(small_task):
    train, _ = small_task
    m = tiny()
    before = m.copy()
    out, history = optim.train(m, train, epochs=0)
    assert history == [] and same(out, before)


def test_train_deterministic(small_task):
    train, test = small_task
    a, ha = optim.train(tiny(), train, test=test)
    b, hb = optim.train(tiny(), train, test=test)
    assert same(a, b)
    assert [list(r.values()) for r in ha] == [list(r.values()) for r in hb]


def test_history_rows_match_evaluate(small_task):
    train, test = small_task
    m, history = optim.train(tiny(), train, test=test, epochs=2)
    assert [r["epoch"] for r in history] == [1, 2]
    final = optim.evaluate(m, train)
    assert history[-1]["train_loss"] == final["loss"]
    assert history[-1]["train_acc"] == final["accuracy"]
    assert history[-1]["test_acc"] == optim.evaluate(m, test)["accuracy"]


def test_partial_last_batch_is_used(small_task):
    train, _ = small_task
    steps = []
    optim.train(tiny(), train, epochs=1, batch_size=10, on_step=lambda m, s: steps.append(s.steps))
    assert steps == [1, 2, 3, 4]


def test_threads_match_single_thread(rng):
    m = tiny()
    x, labels = orthonormal(rng, 9, 12, 2), rng.integers(0, 3, 9)
    g1, p1 = optim.batch_gradients(m, x, labels, threads=1)
    g3, p3 = optim.batch_gradients(m, x, labels, threads=3)
    np.testing.assert_allclose(p1, p3, atol=1e-15)
    for a, b in zip(g1.arrays(), g3.arrays()):
        np.testing.assert_allclose(a, b, atol=1e-14)
    g3b, _ = optim.batch_gradients(m, x, labels, threads=3)
    for a, b in zip(g3.arrays(), g3b.arrays()):
        assert np.array_equal(a, b)


def test_train_errors(small_task):
    train, _ = small_task
    empty = data.SubspaceDataset(np.zeros((0, 12, 2)), np.zeros(0), 3)
    with pytest.raises(EmptyDataset):
        optim.train(tiny(), empty)
    other = data.gen_synthetic(3, 2, 10, 2, 0.1)[0]
    with pytest.raises(ShapeMismatch):
        optim.train(tiny(), other)


def test_evaluate_confusion(small_task):
    _, test = small_task
    metrics = optim.evaluate(tiny(), test)
    conf = metrics["confusion"]
    assert conf.sum() == len(test)
    np.testing.assert_array_equal(conf.sum(axis=1), np.bincount(test.labels, minlength=3))
    assert metrics["accuracy"] == np.trace(conf) / len(test)
