import numpy as np
import pytest

from grnet import linalg


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["cython", "python"])
def backend(request):
    """Run a test once per kernel backend."""
    if request.param == "cython":
        pytest.importorskip("grnet._kernels")
    previous = linalg.set_backend(request.param)
    yield request.param
    linalg.set_backend(previous)


def orthonormal(rng, *shape):
    """Random orthonormal basis via numpy's QR (independent of grnet.linalg)."""
    q, _ = np.linalg.qr(rng.standard_normal(shape))
    return q


def numeric_grad(f, x, h=1e-6):
    """Plain central differences of scalar f over every entry of x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def numeric_sym_grad(f, x, h=1e-6):
    """Directional derivatives of f along e_ii and e_ij + e_ji for the last two axes."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    d = x.shape[-1]
    for pre in np.ndindex(*x.shape[:-2]):
        for i in range(d):
            for j in range(i, d):
                e = np.zeros_like(x)
                e[pre + (i, j)] = 1.0
                e[pre + (j, i)] = 1.0
                out[pre + (i, j)] = (f(x + h * e) - f(x - h * e)) / (2 * h)
    return out


def sym_directional(g):
    """Analytic counterpart of numeric_sym_grad: G_ij + G_ji off the diagonal, G_ii on it."""
    out = g + np.swapaxes(g, -1, -2)
    idx = np.arange(g.shape[-1])
    out[..., idx, idx] = g[..., idx, idx]
    return np.triu(out)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))
