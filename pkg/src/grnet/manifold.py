"""Grassmann points, the projection metric, and the FRMap weight geometry."""
import enum

import numpy as np

from grnet import linalg
from grnet.errors import RankDeficient, ShapeMismatch
from grnet.linalg import t


class RetractionMode(str, enum.Enum):
    PSD_IDENTITY = "psd"
    STIEFEL_QR = "stiefel"


ORTHONORMAL_TOL = 1e-10
JITTER_SCALE = 1e-8
JITTER_TRIES = 3


def orthonormality_error(x):
    """||X^T X - I||_F, per matrix for stacked input."""
    x = np.asarray(x, dtype=np.float64)
    gram = t(x) @ x
    return np.linalg.norm(gram - np.eye(x.shape[-1]), axis=(-2, -1))


def is_orthonormal(x, tol=ORTHONORMAL_TOL):
    return bool(np.all(orthonormality_error(x) < tol))


def random_basis(rng, dim, order):
    """Uniformly distributed point on Gr(order, dim) as a dim x order basis."""
    return linalg.thin_qr(rng.standard_normal((dim, order))).q


def _same_shape(x1, x2):
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape or x1.ndim < 2:
        raise ShapeMismatch(f"bases must share (D, q): {x1.shape} vs {x2.shape}")
    return x1, x2


def projection_metric(x1, x2):
    """2^{-1/2} ||X1 X1^T - X2 X2^T||_F between two orthonormal bases."""
    x1, x2 = _same_shape(x1, x2)
    diff = x1 @ t(x1) - x2 @ t(x2)
    out = np.linalg.norm(diff, axis=(-2, -1)) / np.sqrt(2.0)
    return float(out) if out.ndim == 0 else out


def principal_angles(x1, x2):
    """Principal angles in [0, pi/2], ascending.

    The cosines are the singular values of X1^T X2, obtained as square roots
    of the eigenvalues of (X1^T X2)(X1^T X2)^T.
    """
    x1, x2 = _same_shape(x1, x2)
    m = t(x1) @ x2
    cos2 = linalg.sym_eig(m @ t(m)).sigma
    cosines = np.clip(np.sqrt(np.clip(cos2, 0.0, None)), 0.0, 1.0)
    return np.arccos(cosines)


def riemannian_grad(w, egrad):
    """Remove the normal component: egrad - egrad W^T W."""
    w = np.asarray(w, dtype=np.float64)
    egrad = np.asarray(egrad, dtype=np.float64)
    if w.shape != egrad.shape:
        raise ShapeMismatch(f"gradient shape {egrad.shape} != weight shape {w.shape}")
    return egrad - (egrad @ t(w)) @ w


def check_weight(w):
    """Raise :class:`RankDeficient` unless every weight has full row rank."""
    linalg.thin_qr(t(w))


def retract(w, mode=RetractionMode.PSD_IDENTITY, rng=None):
    """Map an updated weight (or stack of weights) back onto its manifold.

    PSD_IDENTITY keeps ``w`` as is after a full-row-rank check, nudging it
    with small seeded Gaussian jitter if the check fails. STIEFEL_QR returns
    the row-orthonormal factor Q(w^T)^T.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim < 2 or w.shape[-2] >= w.shape[-1]:
        raise ShapeMismatch(f"weights must be d_out x d_in with d_out < d_in, got {w.shape}")
    mode = RetractionMode(mode)
    if mode is RetractionMode.STIEFEL_QR:
        return t(linalg.thin_qr(t(w)).q).copy()

    try:
        check_weight(w)
        return w
    except RankDeficient as err:
        last = err
    if rng is None:
        rng = np.random.default_rng(0)
    scale = JITTER_SCALE * max(np.linalg.norm(w), 1.0)
    for _ in range(JITTER_TRIES):
        candidate = w + scale * rng.standard_normal(w.shape)
        try:
            check_weight(candidate)
            return candidate
        except RankDeficient as err:
            last = err
    raise RankDeficient(
        f"weight stayed rank deficient after {JITTER_TRIES} jitter attempts",
        ratio=last.ratio,
        index=last.index,
    )
