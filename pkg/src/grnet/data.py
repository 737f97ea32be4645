"""Subspace datasets: synthetic generation, feature-to-subspace, GRNB files.

GRNB layout (all little-endian)::

    b"GRNB" | u32 version=1 | u32 N | u32 D | u32 q | u32 C
    N x ( u32 label | D*q float64, row-major )
"""
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from grnet import linalg, manifold
from grnet.errors import (
    BadMagic,
    BadVersion,
    ConfigInvalid,
    DegenerateSpectrum,
    InvariantViolation,
    RankDeficient,
    ShapeMismatch,
    TruncatedFile,
)
from grnet.layers import EIGEN_GAP_TOL

DATA_MAGIC = b"GRNB"
DATA_VERSION = 1
LOAD_ORTHO_TOL = 1e-8
_HEADER = struct.Struct("<4sIIIII")


@dataclass
class SubspaceDataset:
    bases: np.ndarray  # (N, D, q)
    labels: np.ndarray  # (N,)
    n_classes: int
    split: str = "train"
    prototypes: Optional[np.ndarray] = None  # (C, D, q), synthetic data only

    def __post_init__(self):
        self.bases = np.asarray(self.bases, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.bases.ndim != 3 or self.labels.shape != (self.bases.shape[0],):
            raise ShapeMismatch(f"bases {self.bases.shape} and labels {self.labels.shape} disagree")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.bases.shape[1]

    @property
    def order(self):
        return self.bases.shape[2]

    def validate(self, tol=manifold.ORTHONORMAL_TOL):
        err = manifold.orthonormality_error(self.bases) if len(self) else np.zeros(0)
        bad = np.flatnonzero(~(err < tol))
        if bad.size:
            k = int(bad[0])
            raise InvariantViolation(f"sample {k} is not orthonormal (||X^T X - I||_F = {err[k]:.3e})")
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InvariantViolation(f"labels must lie in [0, {self.n_classes})")
        return self

    def __eq__(self, other):
        if not isinstance(other, SubspaceDataset):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and self.bases.shape == other.bases.shape
            and np.array_equal(self.bases, other.bases)
            and np.array_equal(self.labels, other.labels)
        )


def gen_synthetic(n_classes, per_class, dim, order, noise, seed=0):
    """Noisy copies of random class prototypes on Gr(order, dim).

    Each class gets ``2 * per_class`` samples Q(prototype + noise * G); a
    seeded permutation sends half of each class to the training split and
    half to the test split. Returns ``(train, test)``.
    """
    if n_classes < 2 or per_class < 1:
        raise ConfigInvalid("need at least 2 classes and 1 sample per class")
    if not 1 <= order < dim:
        raise ConfigInvalid(f"order must satisfy 1 <= q < D, got q={order}, D={dim}")
    if not noise >= 0:
        raise ConfigInvalid(f"noise must be >= 0, got {noise}")
    rng = np.random.default_rng(seed)
    prototypes = linalg.thin_qr(rng.standard_normal((n_classes, dim, order))).q
    train_idx, test_idx = [], []
    bases, labels = [], []
    for c in range(n_classes):
        raw = prototypes[c] + noise * rng.standard_normal((2 * per_class, dim, order))
        bases.append(linalg.thin_qr(raw).q)
        labels.append(np.full(2 * per_class, c))
        perm = rng.permutation(2 * per_class) + 2 * per_class * c
        train_idx.append(perm[:per_class])
        test_idx.append(perm[per_class:])
    bases = np.concatenate(bases)
    labels = np.concatenate(labels)
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return (
        SubspaceDataset(bases[tr], labels[tr], n_classes, "train", prototypes),
        SubspaceDataset(bases[te], labels[te], n_classes, "test", prototypes),
    )


def nearest_prototype_accuracy(dataset, prototypes):
    """Accuracy of assigning each sample to the prototype nearest in projection metric."""
    dist = np.stack([manifold.projection_metric(dataset.bases, np.broadcast_to(p, dataset.bases.shape))
                     for p in prototypes], axis=1)
    return float(np.mean(dist.argmin(axis=1) == dataset.labels))


def subspace_from_features(features, order):
    """Top-``order`` left singular directions of a D x T feature matrix.

    Computed as the leading eigenvectors of features @ features^T.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeMismatch(f"features must be a D x T matrix, got {features.shape}")
    dim, n_obs = features.shape
    if not 1 <= order <= dim:
        raise ConfigInvalid(f"order {order} is outside [1, {dim}]")
    if n_obs < order:
        raise RankDeficient(f"{n_obs} observations cannot span an order-{order} subspace", ratio=0.0)
    u, sigma = linalg.sym_eig(features @ features.T)
    if not sigma[order - 1] > linalg.RANK_TOL * max(sigma[0], 0.0):
        raise RankDeficient(f"features have rank below {order}", ratio=float(sigma[order - 1] / sigma[0]) if sigma[0] > 0 else 0.0)
    if order < dim and not sigma[order - 1] - sigma[order] > EIGEN_GAP_TOL:
        raise DegenerateSpectrum(f"eigen-gap after eigenvalue {order} is too small", gap=float(sigma[order - 1] - sigma[order]))
    return u[:, :order].copy()


def save(dataset, path):
    n = len(dataset)
    header = _HEADER.pack(DATA_MAGIC, DATA_VERSION, n, dataset.dim, dataset.order, dataset.n_classes)
    rec = np.dtype([("label", "<u4"), ("basis", "<f8", (dataset.dim * dataset.order,))])
    body = np.empty(n, dtype=rec)
    body["label"] = dataset.labels
    body["basis"] = dataset.bases.reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body.tobytes())


def load(path, split="train"):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != DATA_MAGIC:
        raise BadMagic(f"{path}: not a GRNB dataset")
    if len(data) < _HEADER.size:
        raise TruncatedFile(f"{path}: header is truncated")
    _, version, n, dim, order, n_classes = _HEADER.unpack_from(data)
    if version != DATA_VERSION:
        raise BadVersion(f"{path}: unsupported dataset version {version}")
    rec = np.dtype([("label", "<u4"), ("basis", "<f8", (dim * order,))])
    expected = _HEADER.size + n * rec.itemsize
    if len(data) < expected:
        raise TruncatedFile(f"{path}: {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise TruncatedFile(f"{path}: {len(data) - expected} unexpected trailing bytes")
    body = np.frombuffer(data, dtype=rec, count=n, offset=_HEADER.size)
    ds = SubspaceDataset(
        body["basis"].astype(np.float64).reshape(n, dim, order),
        body["label"].astype(np.int64),
        n_classes,
        split,
    )
    return ds.validate(LOAD_ORTHO_TOL)
