"""Randomised central-difference checks for every differentiable component."""

import numpy as np

from . import autograd as ag
from . import losses, pipeline
from .autograd import Tensor, grad_check
from .bank import init_bank

TOLERANCE = 1e-4

# Small end-to-end configuration: 4x4 image, 3 classes, 2 distributions, Z = 8.
E2E = dict(height=4, width=4, in_dim=3, num_classes=3, n_dist=2, embed_dim=8, hidden_dim=6)


def _unit(rng, *shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _labels(rng, shape, num_classes, ignore_frac=0.1):
    y = rng.integers(num_classes, size=shape)
    y[rng.random(shape) < ignore_frac] = losses.IGNORE_LABEL
    return y


def _param_check(build, params, seed, probes):
    """Grad-check a scalar built from a dict of named parameter arrays."""
    names = list(params)

    def f(*leaves):
        return build(dict(zip(names, leaves)))

    return grad_check(f, [params[n] for n in names], tol=TOLERANCE, probes=probes, seed=seed)


def check_matmul(seed):
    rng = np.random.default_rng(seed)
    return grad_check(lambda a, b: ag.matmul(a, b).sum(), [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))], tol=TOLERANCE)


def check_softmax(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(4)
    return grad_check(lambda x: (ag.softmax(x) * w).sum(), rng.standard_normal(4), tol=TOLERANCE)


def check_normalize(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(5)
    return grad_check(lambda x: (ag.l2_normalize(x) * w).sum(), rng.standard_normal(5), tol=TOLERANCE)


def _small_model(rng, use_ssa=False):
    cfg = pipeline.ModelConfig(E2E["in_dim"], E2E["num_classes"], E2E["embed_dim"], E2E["hidden_dim"], use_ssa=use_ssa)
    params = pipeline.init_params(cfg, seed=int(rng.integers(2**31)))
    arrays = {k: v.data + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
    x = rng.standard_normal((2, E2E["height"], E2E["width"], E2E["in_dim"]))
    return cfg, arrays, x


def check_encoder(seed, probes=8):
    rng = np.random.default_rng(seed)
    _, arrays, x = _small_model(rng)
    enc = {k: v for k, v in arrays.items() if k.startswith("enc.")}
    w = rng.standard_normal((E2E["embed_dim"],))

    def build(p):
        return (pipeline.encode(Tensor(x), p) * w).sum()

    return _param_check(build, enc, seed, probes)


def check_class_weights(seed, probes=8):
    rng = np.random.default_rng(seed)
    r = rng.standard_normal((2, 3, 3, E2E["embed_dim"]))
    head = {"head.w": rng.standard_normal((E2E["embed_dim"], 3)), "head.b": rng.standard_normal(3)}
    w = rng.standard_normal(3)

    def build(p):
        weight, _ = pipeline.class_weights(Tensor(r), p)
        return (weight * w).sum()

    return _param_check(build, head, seed, probes)


def check_dsa(seed, probes=8):
    rng = np.random.default_rng(seed)
    z, k = E2E["embed_dim"], E2E["embed_dim"] // 2
    arrays = {
        "r": rng.standard_normal((2, 3, 3, z)),
        "r_m": rng.standard_normal((2, 3, 3, z)),
        "dsa.a": rng.standard_normal((z, k)) * 0.5,
        "dsa.b": rng.standard_normal((z, k)) * 0.5,
        "dsa.f": rng.standard_normal((z, z)) * 0.5,
        "dsa.c": rng.standard_normal((z, z)) * 0.5,
    }
    w = rng.standard_normal(z)

    def build(p):
        return (pipeline.dsa_refine(p["r"], p["r_m"], p) * w).sum()

    return _param_check(build, arrays, seed, probes)


def check_ssa(seed, probes=8):
    rng = np.random.default_rng(seed)
    z = E2E["embed_dim"]
    arrays = {"r": rng.standard_normal((2, 3, 3, z)), "ssa.w": rng.standard_normal((z, z)), "ssa.b": rng.standard_normal(z)}
    w = rng.standard_normal((3, 3, z))
    return _param_check(lambda p: (pipeline.ssa(p["r"], p) * w).sum(), arrays, seed, probes)


def check_fuse_transform(seed, probes=8):
    rng = np.random.default_rng(seed)
    z = E2E["embed_dim"]
    arrays = {
        "r": rng.standard_normal((1, 3, 3, z)),
        "r_il": rng.standard_normal((1, 3, 3, z)),
        "r_dl": rng.standard_normal((1, 3, 3, z)),
        "fuse.w": rng.standard_normal((3 * z, z)),
        "fuse.b": rng.standard_normal(z),
    }
    w = rng.standard_normal(z)
    return _param_check(lambda p: (pipeline.fuse_transform(p["r"], p["r_il"], p["r_dl"], p) * w).sum(), arrays, seed, probes)


def _bank_case(rng, m=12):
    c, n, z = E2E["num_classes"], E2E["n_dist"], E2E["embed_dim"]
    bank = init_bank(c, n, z, seed=int(rng.integers(2**31))).entries
    feats = rng.standard_normal((m, z))
    labels = _labels(rng, (m,), c)
    return bank, feats, labels


def check_clcl(seed):
    rng = np.random.default_rng(seed)
    bank, feats, labels = _bank_case(rng)
    return grad_check(lambda x: losses.loss_clcl(ag.l2_normalize(x), labels, bank), feats, tol=TOLERANCE)


def check_cgcl(seed):
    rng = np.random.default_rng(seed)
    bank, feats, labels = _bank_case(rng)
    return grad_check(lambda x: losses.loss_cgcl(ag.l2_normalize(x), labels, bank, tau=0.5), feats, tol=TOLERANCE)


def check_ce(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((2, 3, 3, 4))
    labels = _labels(rng, (2, 3, 3), 4)
    return grad_check(lambda x: losses.loss_ce(x, labels), logits, tol=TOLERANCE)


def check_total(seed, probes=6, use_ssa=False):
    """The weighted objective of the whole forward graph, w.r.t. every parameter."""
    rng = np.random.default_rng(seed)
    cfg, arrays, x = _small_model(rng, use_ssa=use_ssa)
    bank = init_bank(cfg.num_classes, E2E["n_dist"], cfg.embed_dim, seed=int(rng.integers(2**31)))
    y = _labels(rng, x.shape[:3], cfg.num_classes)
    lcfg = losses.LossConfig()

    def build(p):
        fw = pipeline.forward(p, Tensor(x), bank, cfg)
        emb = ag.l2_normalize(fw.r.reshape(-1, cfg.embed_dim))
        flat = y.reshape(-1)
        return losses.combine(
            losses.loss_ce(fw.logits_r, y),
            losses.loss_ce(fw.logits_aug, y),
            losses.loss_clcl(emb, flat, bank.entries),
            losses.loss_cgcl(emb, flat, bank.entries, lcfg.tau),
            lcfg,
        )

    return _param_check(build, arrays, seed, probes)


COMPONENTS = {
    "matmul": check_matmul,
    "softmax": check_softmax,
    "l2_normalize": check_normalize,
    "encoder": check_encoder,
    "class_weights": check_class_weights,
    "dsa": check_dsa,
    "ssa": check_ssa,
    "fuse_transform": check_fuse_transform,
    "loss_clcl": check_clcl,
    "loss_cgcl": check_cgcl,
    "loss_ce": check_ce,
    "total": check_total,
}


def run_suite(seed=0, trials=100, components=None):
    """``{component: max relative error over trials}``; trial t uses seed ``seed + t``."""
    results = {}
    for name in components or COMPONENTS:
        fn = COMPONENTS[name]
        results[name] = max(fn(seed + t).max_rel_error for t in range(trials))
    return results
