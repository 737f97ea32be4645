"""Forward and backward passes of the GrNet layers.

A channel batch is an array of shape (N, C, rows, cols): N samples, C
channels per sample. Every ``*_fwd`` returns ``(output, cache)`` and the
matching ``*_bwd`` takes that cache plus the upstream gradient (same shape
as the forward output) and returns the gradient(s) with respect to the
forward inputs. Backward functions never mutate their cache, so a cache
can be replayed.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from grnet import linalg
from grnet.errors import (
    BadGrouping,
    BadLabel,
    BadPatchSize,
    CacheMismatch,
    DegenerateSpectrum,
    RankDeficient,
    ShapeMismatch,
    SingularR,
)
from grnet.linalg import bsym, sym, t

SINGULAR_R_TOL = 1e-14
EIGEN_GAP_TOL = 1e-10
KHAT_CLAMP = 1e-10


def _channels(x, name="input"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeMismatch(f"{name} must be (samples, channels, rows, cols), got {x.shape}")
    return x


def _expect(upstream, shape, layer):
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != tuple(shape):
        raise CacheMismatch(f"{layer}: upstream shape {upstream.shape} does not match forward output {tuple(shape)}")
    return upstream


def _sample_of(err, n_channels):
    if getattr(err, "index", None) is not None:
        err.sample = err.index // n_channels
    return err


# -- FRMap ---------------------------------------------------------------


@dataclass(frozen=True)
class FRMapCache:
    x: np.ndarray
    weights: np.ndarray

    @property
    def out_shape(self):
        n, c, _, q = self.x.shape
        m, d_out, _ = self.weights.shape
        return (n, c * m, d_out, q)


def frmap_fwd(x, weights):
    """Apply every weight to every channel: out[:, i*m + j] = W_j @ x[:, i]."""
    x = _channels(x)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 3 or weights.shape[2] != x.shape[2]:
        raise ShapeMismatch(f"weights {weights.shape} do not act on {x.shape[2]}-dim channels")
    n, c, _, q = x.shape
    m, d_out, _ = weights.shape
    out = (weights[None, None] @ x[:, :, None]).reshape(n, c * m, d_out, q)
    return out, FRMapCache(x, weights)


def frmap_bwd(cache, upstream):
    """Returns ``(grad_x, grad_weights)``; weight gradients sum over samples and channels."""
    upstream = _expect(upstream, cache.out_shape, "frmap")
    n, c, d_in, q = cache.x.shape
    m, d_out, _ = cache.weights.shape
    g = upstream.reshape(n, c, m, d_out, q)
    grad_w = np.einsum("ncjoq,ncdq->jod", g, cache.x)
    grad_x = np.einsum("jod,ncjoq->ncdq", cache.weights, g)
    return grad_x, grad_w


# -- ReOrth --------------------------------------------------------------


@dataclass(frozen=True)
class ReOrthCache:
    q: np.ndarray
    r: np.ndarray


def reorth_fwd(x):
    """Replace every channel by the Q factor of its thin QR decomposition."""
    x = _channels(x)
    try:
        q, r = linalg.thin_qr(x.reshape((-1,) + x.shape[2:]))
    except RankDeficient as err:
        raise _sample_of(err, x.shape[1])
    return q.reshape(x.shape), ReOrthCache(q.reshape(x.shape), r.reshape(x.shape[:2] + r.shape[1:]))


def qr_backward(q, r, grad_q, grad_r=None):
    """Adjoint of X = QR for stacked factors.

    (S^T G_Q + Q (Q^T G_Q)_bsym) R^{-T} + Q (G_R - (G_R R^T)_bsym R^{-T}),
    with S = I - Q Q^T.
    """
    diag = np.abs(np.diagonal(r, axis1=-2, axis2=-1))
    if np.any(diag < SINGULAR_R_TOL):
        raise SingularR(f"R has a diagonal entry below {SINGULAR_R_TOL:g} (min |R_ii| = {diag.min():.3e})")

    def times_r_inv_t(m):
        # m @ R^{-T} == (R^{-1} m^T)^T
        return t(np.linalg.solve(r, t(m)))

    qtg = t(q) @ grad_q
    inner = grad_q - q @ qtg + q @ bsym(qtg)
    out = times_r_inv_t(inner)
    if grad_r is not None:
        out = out + q @ (grad_r - times_r_inv_t(bsym(grad_r @ t(r))))
    return out


def reorth_bwd(cache, upstream, grad_r=None):
    """Gradient through ReOrth. In the network the R output is unused, so
    ``grad_r`` defaults to zero; it is accepted to expose the full QR adjoint."""
    upstream = _expect(upstream, cache.q.shape, "reorth")
    if grad_r is not None:
        grad_r = _expect(grad_r, cache.r.shape, "reorth")
    return qr_backward(cache.q, cache.r, upstream, grad_r)


# -- ProjMap -------------------------------------------------------------


@dataclass(frozen=True)
class ProjMapCache:
    x: np.ndarray


def projmap_fwd(x):
    x = _channels(x)
    return x @ t(x), ProjMapCache(x)


def projmap_bwd(cache, upstream):
    n, c, d, _ = cache.x.shape
    upstream = _expect(upstream, (n, c, d, d), "projmap")
    return (upstream + t(upstream)) @ cache.x


# -- ProjPooling ---------------------------------------------------------


@dataclass(frozen=True)
class PoolCache:
    variant: str
    size: int
    in_shape: tuple

    @property
    def out_shape(self):
        n, c, d, _ = self.in_shape
        if self.variant == "A":
            return (n, c // self.size, d, d)
        s = _patch_side(self.size)
        return (n, c, d // s, d // s)


def _patch_side(n):
    s = int(round(np.sqrt(n)))
    if n < 1 or s * s != n:
        raise BadPatchSize(f"W-ProjPooling needs a perfect-square patch count, got {n}")
    return s


def projpool_a_fwd(p, n):
    """Average consecutive groups of ``n`` channels."""
    p = _channels(p)
    ns, c, d, d2 = p.shape
    if n < 1 or c % n:
        raise BadGrouping(f"{c} channels cannot be split into groups of {n}")
    if d != d2:
        raise ShapeMismatch(f"projection matrices must be square, got {d}x{d2}")
    out = p.reshape(ns, c // n, n, d, d).mean(axis=2)
    return out, PoolCache("A", n, p.shape)


def projpool_w_fwd(p, n):
    """Mean over non-overlapping sqrt(n) x sqrt(n) patches of each channel."""
    p = _channels(p)
    s = _patch_side(n)
    ns, c, d, d2 = p.shape
    if d != d2 or d % s:
        raise BadPatchSize(f"{d}x{d2} channels cannot be tiled by {s}x{s} patches")
    k = d // s
    out = p.reshape(ns, c, k, s, k, s).mean(axis=(3, 5))
    return sym(out), PoolCache("W", n, p.shape)


def projpool_fwd(p, variant, n):
    if variant == "A":
        return projpool_a_fwd(p, n)
    if variant == "W":
        return projpool_w_fwd(p, n)
    raise BadGrouping(f"unknown pooling variant {variant!r}")


def projpool_bwd(cache, upstream):
    """Spread each pooled gradient evenly over its ``n`` contributors."""
    upstream = _expect(upstream, cache.out_shape, "projpool")
    n = cache.size
    if cache.variant == "A":
        ns, c, d, _ = upstream.shape
        spread = np.broadcast_to(upstream[:, :, None] / n, (ns, c, n, d, d))
        return spread.reshape(cache.in_shape).copy()
    s = _patch_side(n)
    g = sym(upstream) / n
    return np.repeat(np.repeat(g, s, axis=-2), s, axis=-1)


# -- OrthMap -------------------------------------------------------------


@dataclass(frozen=True)
class OrthMapCache:
    u: np.ndarray
    sigma: np.ndarray
    order: int


def orthmap_fwd(p, order):
    """Top-``order`` eigenvectors of every symmetric channel."""
    p = _channels(p)
    d = p.shape[-1]
    if not 1 <= order <= d:
        raise ShapeMismatch(f"order {order} is outside [1, {d}]")
    u, sigma = linalg.sym_eig(p)
    if order < d:
        gap = sigma[..., order - 1] - sigma[..., order]
        bad = np.flatnonzero(~(gap.reshape(-1) > EIGEN_GAP_TOL))
        if bad.size:
            k = int(bad[0])
            err = DegenerateSpectrum(
                f"eigen-gap {gap.reshape(-1)[k]:.3e} after eigenvalue {order} is too small",
                gap=float(gap.reshape(-1)[k]),
                index=k,
            )
            raise _sample_of(err, p.shape[1])
    return u[..., :order].copy(), OrthMapCache(u, sigma, order)


def khat(sigma):
    """K_ij = 1 / (sigma_i - sigma_j) off the diagonal, 0 on it.

    Differences are clamped away from zero at ``KHAT_CLAMP``, keeping their sign.
    """
    diff = sigma[..., :, None] - sigma[..., None, :]
    clamped = np.where(np.abs(diff) < KHAT_CLAMP, np.where(diff < 0, -KHAT_CLAMP, KHAT_CLAMP), diff)
    k = 1.0 / clamped
    idx = np.arange(sigma.shape[-1])
    k[..., idx, idx] = 0.0
    return k


def eig_backward(u, sigma, grad_u, grad_sigma=None):
    """Adjoint of X = U diag(sigma) U^T for symmetric X.

    U (K^T o (U^T G_U)) U^T + U diag(G_sigma) U^T, symmetrized.
    """
    inner = t(khat(sigma)) * (t(u) @ grad_u)
    if grad_sigma is not None:
        idx = np.arange(sigma.shape[-1])
        inner[..., idx, idx] += grad_sigma
    return sym(u @ inner @ t(u))


def orthmap_bwd(cache, upstream, grad_sigma=None):
    """Gradient through OrthMap: G_U = [upstream 0]; ``grad_sigma`` defaults to zero."""
    u = cache.u
    upstream = _expect(upstream, u.shape[:-1] + (cache.order,), "orthmap")
    grad_u = np.zeros_like(u)
    grad_u[..., : cache.order] = upstream
    if grad_sigma is not None:
        grad_sigma = _expect(grad_sigma, cache.sigma.shape, "orthmap")
    return eig_backward(u, cache.sigma, grad_u, grad_sigma)


# -- FC + softmax --------------------------------------------------------


@dataclass(frozen=True)
class FCCache:
    vec: np.ndarray
    probs: np.ndarray
    weight: np.ndarray
    in_shape: tuple


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def fc_softmax_fwd(p, weight, bias):
    """Class probabilities from the row-major vectorization of all channels."""
    p = _channels(p)
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    vec = p.reshape(p.shape[0], -1)
    if weight.ndim != 2 or weight.shape[1] != vec.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeMismatch(
            f"FC weight {weight.shape} / bias {bias.shape} do not fit {vec.shape[1]} input features"
        )
    probs = softmax(vec @ weight.T + bias)
    return probs, FCCache(vec, probs, weight, p.shape)


def fc_softmax_bwd(cache, labels, sample_weights: Optional[np.ndarray] = None):
    """Cross-entropy backward. Returns ``(grad_input, grad_weight, grad_bias)``.

    The loss is sum_n w_n * (-log p_n[label_n]); by default w_n = 1/N, the
    batch mean.
    """
    labels = np.asarray(labels)
    n, n_cls = cache.probs.shape
    if labels.shape != (n,):
        raise CacheMismatch(f"{labels.shape[0] if labels.ndim else 1} labels for a forward batch of {n}")
    if np.any(labels < 0) or np.any(labels >= n_cls):
        raise BadLabel(f"labels must lie in [0, {n_cls})")
    if sample_weights is None:
        sample_weights = np.full(n, 1.0 / n)
    dlogits = cache.probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits *= np.asarray(sample_weights, dtype=np.float64)[:, None]
    grad_w = dlogits.T @ cache.vec
    grad_b = dlogits.sum(axis=0)
    grad_in = (dlogits @ cache.weight).reshape(cache.in_shape)
    return grad_in, grad_w, grad_b
