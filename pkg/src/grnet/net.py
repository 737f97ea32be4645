"""GrNet assembly: configuration, parameters, forward/backward and the model file.

A network is ``len(blocks)`` Projection+Pooling blocks followed by the Output
block. Each block runs FRMap -> ReOrth -> ProjMap -> ProjPooling -> OrthMap;
the Output block runs ProjMap -> FC -> softmax.
"""
import math
import re
import struct
from dataclasses import dataclass, field
from typing import List

import numpy as np

from grnet import layers, linalg
from grnet.errors import (
    BadMagic,
    BadVersion,
    CacheMismatch,
    ConfigInvalid,
    GrNetError,
    RankDeficient,
    ShapeMismatch,
    TruncatedFile,
)
from grnet.manifold import RetractionMode

MODEL_MAGIC = b"GRNM"
MODEL_VERSION = 1
PROB_FLOOR = 1e-15
INIT_TRIES = 3

BLOCK_GRAMMAR = "d_in:d_out:filters:<A|W><pool size>, e.g. 20:12:4:W4"
_BLOCK_RE = re.compile(r"^(\d+):(\d+):(\d+):([AW])(\d+)$")


@dataclass(frozen=True)
class BlockSpec:
    d_in: int
    d_out: int
    filters: int
    pool: str = "W"
    pool_size: int = 4

    @classmethod
    def parse(cls, text):
        m = _BLOCK_RE.match(text.strip())
        if not m:
            raise ConfigInvalid(f"malformed block spec {text!r}; expected {BLOCK_GRAMMAR}")
        d_in, d_out, filters, pool, size = m.groups()
        return cls(int(d_in), int(d_out), int(filters), pool, int(size))

    def __str__(self):
        return f"{self.d_in}:{self.d_out}:{self.filters}:{self.pool}{self.pool_size}"

    @property
    def out_dim(self):
        if self.pool == "W":
            return self.d_out // math.isqrt(self.pool_size)
        return self.d_out

    def out_channels(self, c_in):
        c = c_in * self.filters
        return c // self.pool_size if self.pool == "A" else c


@dataclass
class NetworkConfig:
    input_dim: int
    order: int
    n_classes: int
    blocks: List[BlockSpec] = field(default_factory=list)
    retraction: str = "psd"
    lr: float = 0.01
    batch_size: int = 30
    epochs: int = 100
    seed: int = 0

    def validate(self):
        if self.order < 1:
            raise ConfigInvalid("order must be >= 1")
        if self.n_classes < 2:
            raise ConfigInvalid("at least two classes are required")
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise ConfigInvalid(f"learning rate must be finite and non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigInvalid("batch size must be >= 1")
        if self.epochs < 0:
            raise ConfigInvalid("epochs must be >= 0")
        if self.seed < 0:
            raise ConfigInvalid("seed must be >= 0")
        try:
            RetractionMode(self.retraction)
        except ValueError:
            raise ConfigInvalid(f"unknown retraction {self.retraction!r} (psd|stiefel)") from None
        if self.input_dim < self.order:
            raise ConfigInvalid(f"input dimension {self.input_dim} is below the order {self.order}")
        dim, channels = self.input_dim, 1
        for i, b in enumerate(self.blocks):
            where = f"block {i} ({b})"
            if b.d_in != dim:
                raise ConfigInvalid(f"{where}: expects d_in={b.d_in} but receives {dim}")
            if not b.d_out < b.d_in:
                raise ConfigInvalid(f"{where}: d_out must be smaller than d_in")
            if b.d_out < self.order:
                raise ConfigInvalid(f"{where}: d_out {b.d_out} is below the order {self.order}")
            if b.filters < 1 or b.pool_size < 1:
                raise ConfigInvalid(f"{where}: filters and pool size must be positive")
            if b.pool == "A":
                if (channels * b.filters) % b.pool_size:
                    raise ConfigInvalid(
                        f"{where}: {channels * b.filters} channels are not divisible by pool size {b.pool_size}"
                    )
            elif b.pool == "W":
                s = math.isqrt(b.pool_size)
                if s * s != b.pool_size:
                    raise ConfigInvalid(f"{where}: W pool size must be a perfect square")
                if b.d_out % s:
                    raise ConfigInvalid(f"{where}: d_out {b.d_out} is not divisible by patch side {s}")
                if b.d_out // s < self.order:
                    raise ConfigInvalid(f"{where}: pooled dimension {b.d_out // s} is below the order {self.order}")
            else:
                raise ConfigInvalid(f"{where}: pooling variant must be A or W")
            dim, channels = b.out_dim, b.out_channels(channels)
        return self

    @property
    def fc_inputs(self):
        dim, channels = self.input_dim, 1
        for b in self.blocks:
            dim, channels = b.out_dim, b.out_channels(channels)
        return channels * dim * dim

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "order": self.order,
            "n_classes": self.n_classes,
            "blocks": [str(b) for b in self.blocks],
            "retraction": self.retraction,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
        }


@dataclass
class Model:
    config: NetworkConfig
    frmaps: List[np.ndarray]  # per block, (filters, d_out, d_in)
    fc_weight: np.ndarray
    fc_bias: np.ndarray

    def parameters(self):
        return [*self.frmaps, self.fc_weight, self.fc_bias]

    def copy(self):
        return Model(self.config, [w.copy() for w in self.frmaps], self.fc_weight.copy(), self.fc_bias.copy())


@dataclass
class ModelGrads:
    frmaps: List[np.ndarray]
    fc_weight: np.ndarray
    fc_bias: np.ndarray

    def arrays(self):
        return [*self.frmaps, self.fc_weight, self.fc_bias]


def build(config, seed=None):
    """Initialize a model: Gaussian FRMap and FC weights scaled by 1/sqrt(fan_in), zero bias.

    The network output does not depend on the scale of an FRMap weight (ReOrth
    discards it), but the PSD update does: with W W^T far from I the term
    g W^T W can outweigh g and turn the step uphill, so weights start near
    row-orthonormal.
    """
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    frmaps = []
    for b in config.blocks:
        for attempt in range(INIT_TRIES):
            w = rng.standard_normal((b.filters, b.d_out, b.d_in)) / math.sqrt(b.d_in)
            try:
                linalg.thin_qr(linalg.t(w))
                break
            except RankDeficient:
                if attempt == INIT_TRIES - 1:
                    raise
        frmaps.append(w)
    fan_in = config.fc_inputs
    fc_weight = rng.standard_normal((config.n_classes, fan_in)) / math.sqrt(fan_in)
    return Model(config, frmaps, fc_weight, np.zeros(config.n_classes))


@dataclass
class Tape:
    """Layer caches of one forward pass, in execution order."""

    n_samples: int
    signature: tuple
    entries: list = field(default_factory=list)


def _signature(model):
    return tuple(p.shape for p in model.parameters())


def _tagged(err, block):
    sample = getattr(err, "sample", None)
    where = f"block {block}" if block is not None else "output block"
    if sample is not None:
        where += f", sample {sample}"
    err.args = (f"{where}: {err.args[0] if err.args else err}",) + err.args[1:]
    err.block = block
    return err


def forward(model, bases):
    """Class probabilities for a batch of (N, D, q) bases, plus the tape for backward."""
    bases = np.asarray(bases, dtype=np.float64)
    cfg = model.config
    if bases.ndim != 3 or bases.shape[1:] != (cfg.input_dim, cfg.order):
        raise ShapeMismatch(f"expected bases of shape (N, {cfg.input_dim}, {cfg.order}), got {bases.shape}")
    tape = Tape(bases.shape[0], _signature(model))
    x = bases[:, None]
    for i, (b, w) in enumerate(zip(cfg.blocks, model.frmaps)):
        try:
            x, c1 = layers.frmap_fwd(x, w)
            x, c2 = layers.reorth_fwd(x)
            x, c3 = layers.projmap_fwd(x)
            x, c4 = layers.projpool_fwd(x, b.pool, b.pool_size)
            x, c5 = layers.orthmap_fwd(x, cfg.order)
        except GrNetError as err:
            raise _tagged(err, i)
        tape.entries.append((c1, c2, c3, c4, c5))
    try:
        p, c_proj = layers.projmap_fwd(x)
        probs, c_fc = layers.fc_softmax_fwd(p, model.fc_weight, model.fc_bias)
    except GrNetError as err:
        raise _tagged(err, None)
    tape.entries.append((c_proj, c_fc))
    return probs, tape


def backward(model, tape, labels, sample_weights=None):
    """Euclidean gradients of sum_n w_n * CE_n (batch mean by default) for every parameter."""
    if tape.signature != _signature(model) or len(tape.entries) != len(model.frmaps) + 1:
        raise CacheMismatch("tape was recorded on a model with a different structure")
    labels = np.asarray(labels)
    if labels.shape != (tape.n_samples,):
        raise ShapeMismatch(f"{labels.size} labels for a batch of {tape.n_samples}")
    c_proj, c_fc = tape.entries[-1]
    g, grad_fc_w, grad_fc_b = layers.fc_softmax_bwd(c_fc, labels, sample_weights)
    g = layers.projmap_bwd(c_proj, g)
    grad_frmaps = [None] * len(model.frmaps)
    for i in range(len(model.frmaps) - 1, -1, -1):
        c1, c2, c3, c4, c5 = tape.entries[i]
        g = layers.orthmap_bwd(c5, g)
        g = layers.projpool_bwd(c4, g)
        g = layers.projmap_bwd(c3, g)
        g = layers.reorth_bwd(c2, g)
        g, grad_frmaps[i] = layers.frmap_bwd(c1, g)
    return ModelGrads(grad_frmaps, grad_fc_w, grad_fc_b)


def loss(probs, labels):
    """Mean cross-entropy with probabilities floored at 1e-15."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeMismatch(f"probabilities {probs.shape} do not match labels {labels.shape}")
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def predict(model, bases, chunk=256):
    """Probabilities for arbitrarily many bases, evaluated in fixed-size chunks."""
    bases = np.asarray(bases, dtype=np.float64)
    out = [forward(model, bases[i : i + chunk])[0] for i in range(0, len(bases), chunk)]
    if not out:
        return np.empty((0, model.config.n_classes))
    return np.concatenate(out)


# -- GRNM model file -----------------------------------------------------

_RETRACTION_CODES = {"psd": 0, "stiefel": 1}
_POOL_CODES = {"A": 0, "W": 1}


def save_model(model, path):
    """Write the GRNM binary: header, config block, then float64 parameters (little-endian)."""
    cfg = model.config
    parts = [
        MODEL_MAGIC,
        struct.pack("<I", MODEL_VERSION),
        struct.pack("<IIII", cfg.input_dim, cfg.order, cfg.n_classes, len(cfg.blocks)),
    ]
    for b in cfg.blocks:
        parts.append(struct.pack("<IIIII", b.d_in, b.d_out, b.filters, _POOL_CODES[b.pool], b.pool_size))
    parts.append(
        struct.pack("<IdIIq", _RETRACTION_CODES[cfg.retraction], cfg.lr, cfg.batch_size, cfg.epochs, cfg.seed)
    )
    for p in model.parameters():
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape):
        count = int(np.prod(shape))
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)


def load_model(path):
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MODEL_MAGIC:
        raise BadMagic(f"{path}: not a GRNM model file")
    (version,) = r.unpack("<I")
    if version != MODEL_VERSION:
        raise BadVersion(f"{path}: unsupported model version {version}")
    input_dim, order, n_classes, n_blocks = r.unpack("<IIII")
    pools = {v: k for k, v in _POOL_CODES.items()}
    retractions = {v: k for k, v in _RETRACTION_CODES.items()}
    blocks = []
    for _ in range(n_blocks):
        d_in, d_out, filters, pool, size = r.unpack("<IIIII")
        if pool not in pools:
            raise BadVersion(f"{path}: unknown pooling code {pool}")
        blocks.append(BlockSpec(d_in, d_out, filters, pools[pool], size))
    retraction, lr, batch_size, epochs, seed = r.unpack("<IdIIq")
    if retraction not in retractions:
        raise BadVersion(f"{path}: unknown retraction code {retraction}")
    cfg = NetworkConfig(input_dim, order, n_classes, blocks, retractions[retraction], lr, batch_size, epochs, seed)
    try:
        cfg.validate()
    except ConfigInvalid as err:
        raise BadVersion(f"{path}: invalid stored config: {err}") from None
    frmaps = [r.floats((b.filters, b.d_out, b.d_in)) for b in blocks]
    fc_weight = r.floats((n_classes, cfg.fc_inputs))
    fc_bias = r.floats((n_classes,))
    if r.pos != len(r.data):
        raise TruncatedFile(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return Model(cfg, frmaps, fc_weight, fc_bias)
