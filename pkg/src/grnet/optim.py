"""Plain SGD: Riemannian updates for FRMap weights, Euclidean for the FC layer."""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from grnet import manifold, net
from grnet.errors import ConfigInvalid, EmptyDataset, ShapeMismatch
from grnet.manifold import RetractionMode


@dataclass
class OptimState:
    lr: float = 0.01
    retraction: RetractionMode = RetractionMode.PSD_IDENTITY
    steps: int = 0
    jitter_events: int = 0
    seed: int = 0
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise ConfigInvalid(f"learning rate must be finite and non-negative, got {self.lr}")
        self.retraction = RetractionMode(self.retraction)
        if self.rng is None:
            # jitter stream for the rank guard, independent of data shuffling
            self.rng = np.random.default_rng([self.seed, 1])


def step(model, grads, state):
    """One update in place: W <- retract(W - lr * rgrad(W, g)), FC <- FC - lr * g."""
    if len(grads.frmaps) != len(model.frmaps):
        raise ShapeMismatch("gradient does not cover every FRMap layer")
    for p, g in zip(model.parameters(), grads.arrays()):
        if p.shape != g.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} does not match parameter {p.shape}")
    new_frmaps = []
    for w, g in zip(model.frmaps, grads.frmaps):
        raw = w - state.lr * manifold.riemannian_grad(w, g)
        out = manifold.retract(raw, state.retraction, rng=state.rng)
        if state.retraction is RetractionMode.PSD_IDENTITY and out is not raw:
            state.jitter_events += 1
        new_frmaps.append(out)
    model.frmaps = new_frmaps
    model.fc_weight = model.fc_weight - state.lr * grads.fc_weight
    model.fc_bias = model.fc_bias - state.lr * grads.fc_bias
    state.steps += 1
    return model


def _add(a, b):
    return net.ModelGrads(
        [x + y for x, y in zip(a.frmaps, b.frmaps)], a.fc_weight + b.fc_weight, a.fc_bias + b.fc_bias
    )


def batch_gradients(model, bases, labels, threads=1):
    """Mean cross-entropy gradients over a batch.

    With ``threads > 1`` the batch is cut into contiguous chunks processed in
    parallel; partial gradients are summed in chunk order, so the result
    depends only on (inputs, threads).
    """
    n = len(labels)
    weights = np.full(n, 1.0 / n)

    def work(sl):
        probs, tape = net.forward(model, bases[sl])
        return probs, net.backward(model, tape, labels[sl], weights[sl])

    if threads <= 1 or n < 2:
        probs, grads = work(slice(0, n))
        return grads, probs
    bounds = np.linspace(0, n, min(threads, n) + 1).astype(int)
    slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=len(slices)) as pool:
        results = list(pool.map(work, slices))
    grads = results[0][1]
    for _, g in results[1:]:
        grads = _add(grads, g)
    return grads, np.concatenate([p for p, _ in results])


def evaluate(model, dataset):
    """Mean loss, accuracy and the confusion matrix (rows: true class)."""
    probs = net.predict(model, dataset.bases)
    pred = probs.argmax(axis=1)
    c = model.config.n_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (dataset.labels, pred), 1)
    return {
        "loss": net.loss(probs, dataset.labels),
        "accuracy": float(np.mean(pred == dataset.labels)),
        "confusion": confusion,
    }


def train(model, dataset, epochs=None, batch_size=None, seed=None, test=None, state=None,
          threads=1, on_step=None, on_epoch=None):
    """Run SGD for ``epochs`` epochs; returns ``(model, history)``.

    Each epoch reshuffles with a generator seeded once from ``seed``, walks
    the batches in order (the last partial batch included), then evaluates
    the whole training set (and ``test`` if given). History rows are dicts
    with ``epoch, train_loss, train_acc, test_acc``.
    """
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    batch_size = cfg.batch_size if batch_size is None else batch_size
    seed = cfg.seed if seed is None else seed
    if len(dataset) == 0:
        raise EmptyDataset("training set is empty")
    if dataset.dim != cfg.input_dim or dataset.order != cfg.order:
        raise ShapeMismatch(
            f"dataset is Gr({dataset.order}, {dataset.dim}) but the model expects Gr({cfg.order}, {cfg.input_dim})"
        )
    if state is None:
        state = OptimState(cfg.lr, cfg.retraction, seed=seed)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            grads, _ = batch_gradients(model, dataset.bases[idx], dataset.labels[idx], threads)
            step(model, grads, state)
            if on_step is not None:
                on_step(model, state)
        metrics = evaluate(model, dataset)
        row = {
            "epoch": epoch,
            "train_loss": metrics["loss"],
            "train_acc": metrics["accuracy"],
            "test_acc": evaluate(model, test)["accuracy"] if test is not None else float("nan"),
        }
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return model, history
