"""Dense matrix primitives: thin QR, symmetric EIG and the triangular masks.

The factorizations accept a single matrix or a stack with arbitrary leading
dimensions. The heavy lifting is done by the compiled kernels in
``grnet._kernels`` when they are importable, otherwise by the numpy
equivalents in ``grnet._fallback``. Set ``GRNET_PURE_PYTHON=1`` to force the
fallback.
"""
import logging
import os
from typing import NamedTuple

import numpy as np

from grnet.errors import NonFinite, NotSquare, NotSymmetric, RankDeficient, ShapeMismatch

log = logging.getLogger(__name__)

if os.environ.get("GRNET_PURE_PYTHON"):
    from grnet import _fallback as _backend

    BACKEND = "python"
else:
    try:
        from grnet import _kernels as _backend

        BACKEND = "cython"
    except ImportError:
        from grnet import _fallback as _backend

        BACKEND = "python"

RANK_TOL = 1e-12
EIG_TOL = 1e-12
EIG_MAX_SWEEPS = 100
SYM_TOL = 1e-10


class QRFactors(NamedTuple):
    q: np.ndarray
    r: np.ndarray


class EigFactors(NamedTuple):
    u: np.ndarray
    sigma: np.ndarray


def set_backend(name):
    """Switch kernels at runtime ("cython" or "python"); returns the previous name."""
    global _backend, BACKEND
    previous = BACKEND
    if name == "cython":
        from grnet import _kernels as mod
    elif name == "python":
        from grnet import _fallback as mod
    else:
        raise ValueError(f"unknown backend {name!r}")
    _backend, BACKEND = mod, name
    return previous


def _as_stack(a, ndim_min=2):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < ndim_min:
        raise ShapeMismatch(f"expected a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFinite("matrix contains NaN or Inf")
    lead = a.shape[:-2]
    return a.reshape((-1,) + a.shape[-2:]), lead


def thin_qr(x, rank_tol=RANK_TOL):
    """Householder thin QR with a strictly positive R diagonal.

    ``x`` is D x q (D >= q) or a stack of such. Raises :class:`RankDeficient`
    when min|R_ii| <= ``rank_tol`` * max|R_ii| for any matrix.
    """
    flat, lead = _as_stack(x)
    m, n = flat.shape[-2:]
    if m < n:
        raise ShapeMismatch(f"thin_qr needs rows >= cols, got {m}x{n}")
    q, r, ratio = _backend.qr_batch(flat)
    bad = np.flatnonzero(~(ratio > rank_tol))
    if bad.size:
        k = int(bad[0])
        raise RankDeficient(
            f"matrix {k} is rank deficient (min/max |R_ii| = {ratio[k]:.3e})",
            ratio=float(ratio[k]),
            index=k if lead else None,
        )
    return QRFactors(q.reshape(lead + (m, n)), r.reshape(lead + (n, n)))


def sym_eig(a, sym_tol=SYM_TOL):
    """Jacobi eigendecomposition of symmetric matrices, eigenvalues descending.

    The input is symmetrized before factoring; an asymmetry larger than
    ``sym_tol * (1 + ||a||_F)`` raises :class:`NotSymmetric`.
    """
    flat, lead = _as_stack(a)
    n = flat.shape[-1]
    if flat.shape[-2] != n:
        raise NotSquare(f"sym_eig needs a square matrix, got {flat.shape[-2:]}")
    skew = np.linalg.norm(flat - np.swapaxes(flat, -1, -2), axis=(-2, -1))
    scale = sym_tol * (1.0 + np.linalg.norm(flat, axis=(-2, -1)))
    bad = np.flatnonzero(skew > scale)
    if bad.size:
        k = int(bad[0])
        raise NotSymmetric(f"matrix {k}: ||a - a^T||_F = {skew[k]:.3e} exceeds {scale[k]:.3e}")
    sym = 0.5 * (flat + np.swapaxes(flat, -1, -2))
    w, v, sweeps = _backend.eigh_batch(sym, EIG_TOL, EIG_MAX_SWEEPS)
    if np.any(sweeps < 0):
        log.warning("Jacobi EIG hit %d sweeps without converging", EIG_MAX_SWEEPS)
    order = np.argsort(-w, axis=-1, kind="stable")
    w = np.take_along_axis(w, order, axis=-1)
    v = np.take_along_axis(v, order[:, None, :], axis=-1)
    return EigFactors(v.reshape(lead + (n, n)), w.reshape(lead + (n,)))


def _square(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise NotSquare(f"expected square matrices, got shape {a.shape}")
    return a


def tril_strict(a):
    """Entries strictly below the main diagonal; zeros elsewhere."""
    return np.tril(_square(a), -1)


def asym(a):
    """tril(a) - tril(a)^T, an antisymmetric matrix."""
    low = tril_strict(a)
    return low - np.swapaxes(low, -1, -2)


def bsym(a):
    """tril(a) - tril(a^T); zero for symmetric input."""
    a = _square(a)
    return np.tril(a, -1) - np.tril(np.swapaxes(a, -1, -2), -1)


def frob_inner(a, b):
    """Frobenius inner product Tr(a^T b), summed over any leading dimensions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"frob_inner shapes differ: {a.shape} vs {b.shape}")
    return float(np.sum(a * b))


def sym(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def t(a):
    """Transpose of the last two axes."""
    return np.swapaxes(a, -1, -2)
