"""Central finite-difference checks for every layer and for whole networks.

Each check builds a small random instance, compares the analytic gradient
with (f(x + h e) - f(x - h e)) / 2h coordinate by coordinate, and reports
the worst relative error |a - n| / max(|a|, |n|, 1e-8). Inputs that live on
symmetric matrices are perturbed along symmetric directions: e_ii on the
diagonal, e_ij + e_ji off it.
"""
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from grnet import layers, linalg, net
from grnet.errors import UnknownTarget

REL_FLOOR = 1e-8
LAYER_TOL = 1e-5
NETWORK_TOL = 1e-4
DEFAULT_H = 1e-6
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
MIN_EIGEN_GAP = 0.05


@dataclass
class CheckReport:
    target: str
    max_rel_error: float
    worst: dict
    passed: bool
    h: float
    tol: float
    seed: int
    coords: int

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        w = self.worst
        where = f"{w.get('param', '-')}{list(w.get('index', ()))}"
        return (
            f"{status}  {self.target:<12} max_rel_err={self.max_rel_error:.3e}  tol={self.tol:.0e}  "
            f"h={self.h:.0e}  seed={self.seed}  coords={self.coords:<5d} worst={where} "
            f"analytic={w.get('analytic', 0.0):+.6e} numeric={w.get('numeric', 0.0):+.6e}"
        )

    def to_json(self):
        return json.dumps(asdict(self), default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o))


@dataclass
class _Instance:
    params: Dict[str, np.ndarray]
    loss: Callable[[Dict[str, np.ndarray]], float]
    grads: Dict[str, np.ndarray]
    symmetric: List[str] = field(default_factory=list)


def _directions(shape, symmetric):
    if not symmetric:
        for idx in np.ndindex(*shape):
            yield idx, ((idx, 1.0),)
        return
    lead, d = shape[:-2], shape[-1]
    for pre in np.ndindex(*lead):
        for i in range(d):
            for j in range(i, d):
                if i == j:
                    yield pre + (i, i), ((pre + (i, i), 1.0),)
                else:
                    yield pre + (i, j), ((pre + (i, j), 1.0), (pre + (j, i), 1.0))


def compare(inst, h, tol, target="custom", seed=0):
    """Finite-difference every coordinate of ``inst.params`` against ``inst.grads``."""
    worst = {"param": "-", "index": (), "analytic": 0.0, "numeric": 0.0}
    max_err, coords = 0.0, 0
    for name, value in inst.params.items():
        grad = inst.grads[name]
        for idx, entries in _directions(value.shape, name in inst.symmetric):
            analytic = sum(s * grad[e] for e, s in entries)
            shifted = {}
            for sign in (1.0, -1.0):
                p = dict(inst.params)
                v = value.copy()
                for e, s in entries:
                    v[e] += sign * h * s
                p[name] = v
                shifted[sign] = inst.loss(p)
            numeric = (shifted[1.0] - shifted[-1.0]) / (2.0 * h)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)
            coords += 1
            if coords == 1 or err > max_err:
                max_err = err
                worst = {"param": name, "index": tuple(int(i) for i in idx),
                         "analytic": float(analytic), "numeric": float(numeric)}
    return CheckReport(target, float(max_err), worst, bool(max_err < tol), h, tol, seed, coords)


# -- random instances ----------------------------------------------------


def _bases(rng, n, c, d, q):
    return linalg.thin_qr(rng.standard_normal((n, c, d, q))).q


def _linear(c):
    return lambda out: float(np.sum(c * out))


def _frmap(rng, d=8, q=3, d_out=5, filters=3, samples=2, channels=2):
    x = _bases(rng, samples, channels, d, q)
    w = rng.standard_normal((filters, d_out, d))
    out, cache = layers.frmap_fwd(x, w)
    c = rng.standard_normal(out.shape)
    gx, gw = layers.frmap_bwd(cache, c)
    f = _linear(c)
    return _Instance({"x": x, "weights": w}, lambda p: f(layers.frmap_fwd(p["x"], p["weights"])[0]),
                     {"x": gx, "weights": gw})


def _reorth(rng, d=9, q=3, samples=2, channels=2):
    x = rng.standard_normal((samples, channels, d, q))
    out, cache = layers.reorth_fwd(x)
    c = rng.standard_normal(out.shape)
    f = _linear(c)
    return _Instance({"x": x}, lambda p: f(layers.reorth_fwd(p["x"])[0]), {"x": layers.reorth_bwd(cache, c)})


def _projmap(rng, d=6, q=2, samples=2, channels=2):
    x = _bases(rng, samples, channels, d, q)
    out, cache = layers.projmap_fwd(x)
    c = rng.standard_normal(out.shape)
    f = _linear(c)
    return _Instance({"x": x}, lambda p: f(layers.projmap_fwd(p["x"])[0]), {"x": layers.projmap_bwd(cache, c)})


def _projections(rng, n, c, d, q):
    x = _bases(rng, n, c, d, q)
    return x @ linalg.t(x)


def _projpool_a(rng, d=5, q=2, samples=2, channels=4, size=2):
    p0 = _projections(rng, samples, channels, d, q)
    out, cache = layers.projpool_a_fwd(p0, size)
    c = rng.standard_normal(out.shape)
    f = _linear(c)
    return _Instance({"p": p0}, lambda p: f(layers.projpool_a_fwd(p["p"], size)[0]),
                     {"p": layers.projpool_bwd(cache, c)})


def _projpool_w(rng, d=8, q=3, samples=2, channels=2, size=4):
    p0 = _projections(rng, samples, channels, d, q)
    out, cache = layers.projpool_w_fwd(p0, size)
    c = rng.standard_normal(out.shape)
    f = _linear(c)
    return _Instance({"p": p0}, lambda p: f(layers.projpool_w_fwd(p["p"], size)[0]),
                     {"p": layers.projpool_bwd(cache, c)}, symmetric=["p"])


def pooled_projection(rng, d, q, size=4, min_gap=MIN_EIGEN_GAP, tries=1000):
    """Mean of ``size`` random rank-q projections whose q-th eigen-gap is at least ``min_gap``."""
    for _ in range(tries):
        p = _projections(rng, 1, size, d, q)[0].mean(axis=0)
        sigma = linalg.sym_eig(p).sigma
        if q == d or sigma[q - 1] - sigma[q] >= min_gap:
            return p
    raise RuntimeError("could not draw a pooled projection with the requested eigen-gap")


def _orthmap(rng, d=6, q=2, samples=2, channels=2):
    p0 = np.stack([np.stack([pooled_projection(rng, d, q) for _ in range(channels)]) for _ in range(samples)])
    c = rng.standard_normal((samples, channels, d, d))
    f = _linear(c)

    def loss(p):
        u, _ = layers.orthmap_fwd(p["p"], q)
        return f(layers.projmap_fwd(u)[0])

    u, c_om = layers.orthmap_fwd(p0, q)
    _, c_pm = layers.projmap_fwd(u)
    grad = layers.orthmap_bwd(c_om, layers.projmap_bwd(c_pm, c))
    return _Instance({"p": p0}, loss, {"p": grad}, symmetric=["p"])


def _fc_softmax(rng, d=3, q=1, samples=3, channels=2, classes=3):
    p0 = _projections(rng, samples, channels, d, q)
    w = rng.standard_normal((classes, channels * d * d))
    b = rng.standard_normal(classes)
    labels = rng.integers(0, classes, samples)

    def loss(p):
        probs, _ = layers.fc_softmax_fwd(p["p"], p["w"], p["b"])
        return net.loss(probs, labels)

    _, cache = layers.fc_softmax_fwd(p0, w, b)
    gp, gw, gb = layers.fc_softmax_bwd(cache, labels)
    return _Instance({"p": p0, "w": w, "b": b}, loss, {"p": gp, "w": gw, "b": gb})


LAYER_BUILDERS = {
    "frmap": _frmap,
    "reorth": _reorth,
    "projmap": _projmap,
    "projpool_a": _projpool_a,
    "projpool_w": _projpool_w,
    "orthmap": _orthmap,
    "fc_softmax": _fc_softmax,
}


def check_layer(layer, dims=None, seed=0, h=DEFAULT_H, tol=LAYER_TOL):
    """Finite-difference check of one layer's backward pass."""
    if layer not in LAYER_BUILDERS:
        raise UnknownTarget(f"unknown layer {layer!r}; choose from {', '.join(LAYER_BUILDERS)}")
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    rng = np.random.default_rng(seed)
    inst = LAYER_BUILDERS[layer](rng, **(dims or {}))
    return compare(inst, h, tol, layer, seed)


def network_instance(config, seed=0, n_samples=3):
    """Random model, bases and labels for a whole-network check."""
    config.validate()
    rng = np.random.default_rng([seed, 17])
    model = net.build(config, seed=seed)
    model.fc_bias = rng.standard_normal(model.fc_bias.shape) * 0.1
    bases = linalg.thin_qr(rng.standard_normal((n_samples, config.input_dim, config.order))).q
    labels = rng.integers(0, config.n_classes, n_samples)
    names = [f"frmap{i}" for i in range(len(model.frmaps))] + ["fc_weight", "fc_bias"]
    params = dict(zip(names, model.parameters()))

    def loss(p):
        m = net.Model(config, [p[n] for n in names[:-2]], p["fc_weight"], p["fc_bias"])
        return net.loss(net.forward(m, bases)[0], labels)

    probs, tape = net.forward(model, bases)
    grads = net.backward(model, tape, labels)
    return _Instance(params, loss, dict(zip(names, grads.arrays())))


def check_network(config, seed=0, h=DEFAULT_H, tol=NETWORK_TOL, n_samples=3):
    """Check the Euclidean gradient of the mean cross-entropy w.r.t. every parameter."""
    inst = network_instance(config, seed, n_samples)
    return compare(inst, h, tol, "network", seed)


def tiny_network_config(pool="W"):
    """GrNet-1Block on Gr(2, 12): d_out 6, two filters, W4 or A2 pooling, two classes."""
    block = net.BlockSpec(12, 6, 2, "W", 4) if pool == "W" else net.BlockSpec(12, 6, 2, "A", 2)
    return net.NetworkConfig(input_dim=12, order=2, n_classes=2, blocks=[block])


NETWORK_TARGETS = {
    "network": (lambda: tiny_network_config("W"), NETWORK_TOL),
    "network_a": (lambda: tiny_network_config("A"), NETWORK_TOL),
    "network0": (lambda: net.NetworkConfig(input_dim=5, order=2, n_classes=3), 1e-6),
}
TARGETS = list(LAYER_BUILDERS) + list(NETWORK_TARGETS)


def run_target(target, seeds=DEFAULT_SEEDS, h=DEFAULT_H, tol: Optional[float] = None):
    """Worst report over ``seeds`` for one target."""
    reports = []
    for seed in seeds:
        if target in LAYER_BUILDERS:
            reports.append(check_layer(target, seed=seed, h=h, tol=LAYER_TOL if tol is None else tol))
        elif target in NETWORK_TARGETS:
            make, default_tol = NETWORK_TARGETS[target]
            rep = check_network(make(), seed=seed, h=h, tol=default_tol if tol is None else tol)
            rep.target = target
            reports.append(rep)
        else:
            raise UnknownTarget(f"unknown target {target!r}; choose from {', '.join(TARGETS)} or all")
    return max(reports, key=lambda r: (not r.passed, r.max_rel_error))


def run_suite(targets=None, seeds=DEFAULT_SEEDS, h=DEFAULT_H, tol=None):
    return [run_target(t, seeds, h, tol) for t in (targets or TARGETS)]
