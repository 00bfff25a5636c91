"""Training objectives.

The two bank losses compare l2-normalised pixel embeddings with the bank
entries under cosine similarity.  The bank enters as a constant: no gradient
ever reaches it.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .exceptions import ConfigError, DimensionError, NumericError

IGNORE_LABEL = 255


@dataclass
class LossConfig:
    eta: float = 0.4
    alpha: float = 0.01
    beta: float = 0.05
    tau: float = 0.5
    ignore_label: int = IGNORE_LABEL

    def __post_init__(self):
        for name in ("eta", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")


@dataclass
class LossBreakdown:
    cls: float
    aug: float
    clcl: float
    cgcl: float
    total: float

    def as_dict(self):
        return {"cls": self.cls, "aug": self.aug, "clcl": self.clcl, "cgcl": self.cgcl, "total": self.total}


def _flag_empty(diagnostics, name):
    if diagnostics is not None:
        diagnostics.setdefault("empty_losses", []).append(name)


def _similarities(pixels, entries):
    c, n, z = entries.shape
    if pixels.shape[-1] != z:
        raise DimensionError(f"pixel dim {pixels.shape[-1]} != bank dim {z}")
    bank = Tensor(entries.reshape(c * n, z).T.astype(pixels.dtype))
    return ag.matmul(pixels, bank).reshape(pixels.shape[0], c, n)


def _valid(pixels, labels, ignore_label):
    labels = np.asarray(labels).reshape(-1)
    if pixels.shape[0] != labels.shape[0]:
        raise DimensionError(f"{pixels.shape[0]} pixels but {labels.shape[0]} labels")
    keep = np.flatnonzero(labels != ignore_label)
    return keep, labels[keep].astype(np.int64)


def loss_clcl(pixels, labels, entries, ignore_label=IGNORE_LABEL, diagnostics=None):
    """Cross-entropy over classes scored by each class's nearest distribution.

    ``pixels`` is an (M, Z) tensor of unit-norm embeddings, ``entries`` the
    (C, N, Z) bank.  The per-class distance is ``min_n -<pixel, d_cn>``; only the
    selected entry carries gradient.
    """
    entries = np.asarray(entries)
    keep, y = _valid(pixels, labels, ignore_label)
    if keep.size == 0:
        _flag_empty(diagnostics, "clcl")
        return Tensor(np.zeros((), dtype=pixels.dtype))
    sims = _similarities(pixels[keep], entries)
    dist = ag.reduce_min(-sims, axis=-1)
    logp = ag.log_softmax(-dist, axis=-1)
    return -(logp[np.arange(y.size), y].mean())


def loss_cgcl(pixels, labels, entries, tau=0.5, ignore_label=IGNORE_LABEL, diagnostics=None):
    """Contrastive loss with the N same-class entries as positives.

    ``-log(A / (A + B))`` where A sums ``exp(sim / tau)`` over the positives
    and B over the (C - 1) * N negatives.
    """
    entries = np.asarray(entries)
    keep, y = _valid(pixels, labels, ignore_label)
    if keep.size == 0:
        _flag_empty(diagnostics, "cgcl")
        return Tensor(np.zeros((), dtype=pixels.dtype))
    c, n, _ = entries.shape
    sims = _similarities(pixels[keep], entries) * (1.0 / tau)
    # Sorting within each class makes the floating-point reductions below
    # independent of the order of a class's entries.
    order = np.argsort(sims.data, axis=-1, kind="stable")
    sims = sims[np.arange(y.size)[:, None, None], np.arange(c)[None, :, None], order]
    logp = ag.log_softmax(sims.reshape(y.size, c * n), axis=-1).reshape(y.size, c, n)
    positive = logp[np.arange(y.size), y]
    return -(ag.logsumexp(positive, axis=-1).mean())


def downsample_labels(labels, stride):
    """Nearest-neighbour subsampling of (B, H, W) labels to the feature grid."""
    if stride == 1:
        return labels
    off = stride // 2
    return labels[:, off::stride, off::stride]


def loss_ce(logits, labels, ignore_label=IGNORE_LABEL, diagnostics=None):
    """Mean softmax cross-entropy over positions whose label is not ignored.

    ``logits`` has classes on the last axis; ``labels`` matches its leading shape.
    """
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise DimensionError(f"logits {logits.shape} do not match labels {labels.shape}")
    c = logits.shape[-1]
    flat = logits.reshape(-1, c)
    y = labels.reshape(-1)
    keep = np.flatnonzero(y != ignore_label)
    if keep.size == 0:
        _flag_empty(diagnostics, "ce")
        return Tensor(np.zeros((), dtype=logits.dtype))
    yk = y[keep].astype(np.int64)
    if yk.max() >= c or yk.min() < 0:
        raise DimensionError(f"label values must lie in [0, {c}) or equal {ignore_label}")
    logp = ag.log_softmax(flat[keep], axis=-1)
    return -(logp[np.arange(keep.size), yk].mean())


def combine(cls, aug, clcl, cgcl, config):
    """Weighted total as a tensor (what gets backpropagated)."""
    total = aug
    for weight, part in ((config.eta, cls), (config.alpha, clcl), (config.beta, cgcl)):
        if weight:
            total = total + part * weight
    return total


def total_loss(parts, config=None):
    """``eta*cls + aug + alpha*clcl + beta*cgcl`` as a :class:`LossBreakdown`.

    ``parts`` maps ``cls``, ``aug``, ``clcl``, ``cgcl`` to scalars or tensors.
    """
    config = config or LossConfig()
    vals = {}
    for name in ("cls", "aug", "clcl", "cgcl"):
        v = parts[name]
        v = float(v.data) if isinstance(v, Tensor) else float(v)
        if not math.isfinite(v):
            raise NumericError(f"loss part {name!r} is not finite ({v})")
        vals[name] = v
    total = config.eta * vals["cls"] + vals["aug"] + config.alpha * vals["clcl"] + config.beta * vals["cgcl"]
    return LossBreakdown(total=total, **vals)
