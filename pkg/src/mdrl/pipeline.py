"""Forward computation of the multi-distribution segmentation network.

Feature maps are batched and channels-last, ``(B, H', W', Z)``, so that
per-pixel linear layers are plain matrix products over the trailing axis.
The stages are::

    R      = encode(x)                          pixel embeddings
    weight = softmax(head(R))                   class probabilities
    R_vi   = weight @ D_i          i = 1..N     feature voting
    R_m    = mean_i R_vi
    R_dl   = dsa_refine(R, R_m)                 attention refinement
    R_il   = ssa(R)                             optional global context
    R_aug  = fuse_transform(R, R_il, R_dl)
    O      = upsample(cls(R_aug))
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .exceptions import ConfigError, DimensionError


@dataclass
class ModelConfig:
    in_dim: int
    num_classes: int
    embed_dim: int = 16
    hidden_dim: int = 32
    key_dim: int = None
    value_dim: int = None
    stride: int = 1
    use_ssa: bool = False

    def __post_init__(self):
        if self.key_dim is None:
            self.key_dim = max(1, self.embed_dim // 2)
        if self.value_dim is None:
            self.value_dim = self.embed_dim
        for name in ("in_dim", "embed_dim", "hidden_dim", "key_dim", "value_dim", "stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")


def _glorot(rng, fan_in, fan_out, dtype):
    scale = math.sqrt(2.0 / (fan_in + fan_out))
    return (rng.standard_normal((fan_in, fan_out)) * scale).astype(dtype)


def init_params(cfg, seed=0, dtype=np.float64):
    """Trainable parameters, keyed by name, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    z, h, c = cfg.embed_dim, cfg.hidden_dim, cfg.num_classes
    zero = lambda *s: np.zeros(s, dtype=dtype)  # noqa: E731
    shapes = {
        # encoder: per-pixel 2-layer map plus mixing of the 3x3 neighbourhood mean
        "enc.w1": _glorot(rng, cfg.in_dim, h, dtype),
        "enc.b1": zero(h),
        "enc.w2": _glorot(rng, h, z, dtype),
        "enc.w_mix": _glorot(rng, h, z, dtype),
        "enc.b2": zero(z),
        # class-weight head; its logits also feed the basic classification loss
        "head.w": _glorot(rng, z, c, dtype),
        "head.b": zero(c),
        # attention projections
        "dsa.a": _glorot(rng, z, cfg.key_dim, dtype),
        "dsa.b": _glorot(rng, z, cfg.key_dim, dtype),
        "dsa.f": _glorot(rng, z, cfg.value_dim, dtype),
        "dsa.c": _glorot(rng, cfg.value_dim, z, dtype),
    }
    if cfg.use_ssa:
        shapes["ssa.w"] = _glorot(rng, z, z, dtype)
        shapes["ssa.b"] = zero(z)
    width = z * (3 if cfg.use_ssa else 2)
    shapes["fuse.w"] = _glorot(rng, width, z, dtype)
    shapes["fuse.b"] = zero(z)
    shapes["cls.w"] = _glorot(rng, z, c, dtype)
    shapes["cls.b"] = zero(c)
    return {name: Tensor(value, requires_grad=True, name=name) for name, value in shapes.items()}


def encode(x, params, stride=1):
    """Pixel embeddings R from an input grid ``x`` of shape (B, H, W, D_in)."""
    x = ag.as_tensor(x)
    w1 = params["enc.w1"]
    if x.ndim != 4 or x.shape[-1] != w1.shape[0]:
        raise ConfigError(f"encoder expects (B, H, W, {w1.shape[0]}) input, got {x.shape}")
    x = ag.avg_pool(x, stride)
    hidden = ag.tanh(ag.linear(x, w1, params["enc.b1"]))
    local = ag.box_mean3(hidden)
    return ag.linear(hidden, params["enc.w2"]) + ag.linear(local, params["enc.w_mix"], params["enc.b2"])


def class_weights(r, params):
    """Return ``(weight, logits)``: per-pixel class softmax and its pre-softmax scores."""
    logits = ag.linear(r, params["head.w"], params["head.b"])
    return ag.softmax(logits, axis=-1), logits


def feature_vote(weight, group):
    """Blend the C distribution features of one bank group by the class weights.

    ``group`` is the (C, Z) slice ``D_i``; the result has shape (B, H', W', Z).
    The bank is a constant here.
    """
    group = np.asarray(group)
    if weight.shape[-1] != group.shape[0]:
        raise DimensionError(f"weights {weight.shape} do not match bank group {group.shape}")
    return ag.matmul(weight, Tensor(group.astype(weight.dtype)))


def fuse_votes(votes):
    if not votes:
        raise DimensionError("fuse_votes needs at least one map")
    shape = votes[0].shape
    for v in votes[1:]:
        if v.shape != shape:
            raise DimensionError(f"vote maps differ in shape: {shape} vs {v.shape}")
    if len(votes) == 1:
        return votes[0]
    total = votes[0]
    for v in votes[1:]:
        total = total + v
    return total * (1.0 / len(votes))


def dsa_refine(r, r_m, params, return_attention=False):
    """Refine the voted map by attention between R (queries) and R_m (keys).

    Attention runs over the H'*W' positions of each image separately and is
    scaled by ``sqrt(key_dim)``.
    """
    if r.shape != r_m.shape:
        raise DimensionError(f"R {r.shape} and R_m {r_m.shape} differ")
    b, h, w, z = r.shape
    flat_r = r.reshape(b, h * w, z)
    flat_m = r_m.reshape(b, h * w, z)
    key_dim = params["dsa.a"].shape[1]
    # scaling the (P, key_dim) queries is cheaper than scaling the (P, P) scores
    query = ag.matmul(flat_r, params["dsa.a"]) * (1.0 / math.sqrt(key_dim))
    key = ag.matmul(flat_m, params["dsa.b"])
    scores = ag.matmul(query, key.swapaxes(-1, -2))
    attn = ag.softmax(scores, axis=-1)
    value = ag.matmul(flat_m, params["dsa.f"])
    out = ag.matmul(ag.matmul(attn, value), params["dsa.c"]).reshape(b, h, w, z)
    return (out, attn) if return_attention else out


def ssa(r, params):
    """Global-average context passed through a Z->Z projection, broadcast to every position."""
    ctx = r.mean(axis=(1, 2), keepdims=True)
    proj = ag.linear(ctx, params["ssa.w"], params["ssa.b"])
    return proj + Tensor(np.zeros(r.shape, dtype=r.dtype))


def fuse_transform(r, r_il, r_dl, params):
    maps = [r] if r_il is None else [r, r_il]
    maps.append(r_dl)
    for m in maps[1:]:
        if m.shape != r.shape:
            raise DimensionError(f"cannot fuse maps of shape {r.shape} and {m.shape}")
    stacked = ag.concat(maps, axis=-1)
    if stacked.shape[-1] != params["fuse.w"].shape[0]:
        raise DimensionError(
            f"fusion input width {stacked.shape[-1]} != projection width {params['fuse.w'].shape[0]}"
        )
    return ag.linear(stacked, params["fuse.w"], params["fuse.b"])


def classify_upsample(r_aug, params, stride=1):
    """Return ``(scores, logits)``: full-resolution class scores and the stride-level logits."""
    logits = ag.linear(r_aug, params["cls.w"], params["cls.b"])
    return ag.upsample_nearest(logits, stride), logits


@dataclass
class ForwardResult:
    r: Tensor
    logits_r: Tensor
    weight: Tensor
    votes: list
    r_m: Tensor
    r_dl: Tensor
    r_il: Tensor
    r_aug: Tensor
    logits_aug: Tensor
    scores: Tensor


def forward(params, x, bank, cfg, use_bank=True):
    """Full pass over a batch ``x`` of shape (B, H, W, D_in).

    With ``use_bank=False`` the refined map R_dl is replaced by zeros (used
    during bank warm-up).
    """
    r = encode(x, params, cfg.stride)
    weight, logits_r = class_weights(r, params)
    entries = bank.entries if hasattr(bank, "entries") else np.asarray(bank)
    votes = [feature_vote(weight, entries[:, i, :]) for i in range(entries.shape[1])]
    r_m = fuse_votes(votes)
    if use_bank:
        r_dl = dsa_refine(r, r_m, params)
    else:
        r_dl = Tensor(np.zeros(r.shape, dtype=r.dtype))
    r_il = ssa(r, params) if cfg.use_ssa else None
    r_aug = fuse_transform(r, r_il, r_dl, params)
    scores, logits_aug = classify_upsample(r_aug, params, cfg.stride)
    return ForwardResult(r, logits_r, weight, votes, r_m, r_dl, r_il, r_aug, logits_aug, scores)
