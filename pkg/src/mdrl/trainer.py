"""Training loop, evaluation, checkpoints and ablation sweeps."""

import io
import json
import logging
import math
import statistics
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .bank import (
    DistributionBank,
    assignment_counts,
    cluster_batch,
    group_by_class,
    init_bank,
    update_bank,
)
from .config import TrainConfig, coerce, override, resolve_param, with_seed
from .data import ConfusionMatrix, accumulate, generate_splits, miou, stack
from .exceptions import ConfigError, FormatError, NumericError
from .losses import combine, downsample_labels, loss_ce, loss_cgcl, loss_clcl, total_loss
from .pipeline import forward, init_params

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MDCK"
CKPT_VERSION = 1
VELOCITY_PREFIX = "velocity:"


@dataclass
class TrainState:
    config: TrainConfig
    params: dict
    bank: DistributionBank
    step: int = 0
    max_steps: int = 0
    update_counts: np.ndarray = None
    velocity: dict = field(default_factory=dict)

    @property
    def np_dtype(self):
        return np.dtype(self.config.dtype)

    @property
    def model_config(self):
        first = self.params["enc.w1"]
        return self.config.model_config(first.shape[0], self.params["head.w"].shape[1])


def init_state(config, in_dim=None, num_classes=None):
    mcfg = config.model_config(in_dim, num_classes)
    dtype = np.dtype(config.dtype)
    params = init_params(mcfg, seed=config.model_seed, dtype=dtype)
    bank = init_bank(mcfg.num_classes, config.n_dist, mcfg.embed_dim, seed=config.bank.init_seed, dtype=dtype)
    counts = np.zeros((mcfg.num_classes, config.n_dist), dtype=np.int64)
    return TrainState(config, params, bank, update_counts=counts)


def poly_lr(base_lr, step, max_steps, power=0.9):
    """``base_lr * (1 - step / max_steps) ** power``; zero once ``step >= max_steps``."""
    if max_steps <= 0 or step >= max_steps:
        return 0.0
    return base_lr * (1.0 - step / max_steps) ** power


def _to_channels_last(x, dtype):
    return Tensor(np.ascontiguousarray(np.asarray(x).transpose(0, 2, 3, 1), dtype=dtype))


def compute_losses(state, x, y, diagnostics=None):
    """Forward pass plus the four loss terms as tensors.

    Returns ``(forward_result, parts, total, pixel_embeddings, stride_labels)``.
    """
    cfg = state.config
    mcfg = state.model_config
    use_bank = state.step >= cfg.bank.warmup_steps
    fw = forward(state.params, _to_channels_last(x, state.np_dtype), state.bank, mcfg, use_bank=use_bank)
    y_s = downsample_labels(np.asarray(y), mcfg.stride)
    ign = cfg.loss.ignore_label
    emb = ag.l2_normalize(fw.r.reshape(-1, mcfg.embed_dim), axis=-1)
    flat_labels = y_s.reshape(-1)
    parts = {
        "cls": loss_ce(fw.logits_r, y_s, ign, diagnostics),
        "aug": loss_ce(fw.logits_aug, y_s, ign, diagnostics),
        "clcl": loss_clcl(emb, flat_labels, state.bank.entries, ign, diagnostics),
        "cgcl": loss_cgcl(emb, flat_labels, state.bank.entries, cfg.loss.tau, ign, diagnostics),
    }
    total = combine(parts["cls"], parts["aug"], parts["clcl"], parts["cgcl"], cfg.loss)
    return fw, parts, total, emb, flat_labels


def train_step(state, x, y):
    """One optimisation step on batch ``x`` (B, D_in, H, W), ``y`` (B, H, W).

    Gradient descent on the total loss with the poly-decayed learning rate,
    then a momentum update of the bank from this step's (pre-update,
    detached) embeddings.  Mutates ``state``; returns ``(breakdown, diagnostics)``.
    """
    cfg = state.config
    diag = {}
    for p in state.params.values():
        p.grad = None
    _, parts, total, emb, labels = compute_losses(state, x, y, diag)
    try:
        breakdown = total_loss(parts, cfg.loss)
    except NumericError as exc:
        raise NumericError(f"step {state.step}: {exc}") from exc
    total.backward()

    lr = poly_lr(cfg.optim.learning_rate, state.step, state.max_steps, cfg.optim.poly_power)
    wd, mom = cfg.optim.weight_decay, cfg.optim.momentum
    for name, p in state.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if wd:
            g = g + wd * p.data
        if mom:
            v = state.velocity.get(name)
            v = g if v is None else mom * v + g
            state.velocity[name] = v
            g = v
        p.data = p.data - lr * g
    ag.assert_finite(*state.params.values(), where=f"parameter after step {state.step}")

    grouped = group_by_class(emb.data, labels, state.bank.num_classes, cfg.loss.ignore_label)
    assignments = cluster_batch(grouped, state.bank, cfg.sinkhorn, diag)
    state.bank = update_bank(state.bank, grouped, assignments, cfg.bank)
    state.update_counts = state.update_counts + assignment_counts(state.bank, assignments)
    state.step += 1
    diag["lr"] = lr
    return breakdown, diag


def predict_scores(state, x):
    """Full-resolution class scores (B, H, W, C) for a batch in (B, D_in, H, W)."""
    use_bank = state.step >= state.config.bank.warmup_steps
    fw = forward(state.params, _to_channels_last(x, state.np_dtype), state.bank, state.model_config, use_bank)
    return fw.scores.data


def predict(state, x, batch_size=1):
    x = np.asarray(x)
    out = [np.argmax(predict_scores(state, x[i:i + batch_size]), axis=-1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out).astype(np.uint8)


def evaluate(state, samples, batch_size=1):
    """Return ``(report, confusion)`` over ``samples`` (images one at a time by default)."""
    c = state.bank.num_classes
    if samples and samples[0].features.shape[0] != state.params["enc.w1"].shape[0]:
        raise ConfigError(
            f"checkpoint expects {state.params['enc.w1'].shape[0]} input channels, "
            f"data has {samples[0].features.shape[0]}"
        )
    if samples and samples[0].num_classes != c:
        raise ConfigError(f"checkpoint has {c} classes, data has {samples[0].num_classes}")
    conf = ConfusionMatrix(c)
    for i in range(0, len(samples), batch_size):
        x, y = stack(samples[i:i + batch_size])
        conf = accumulate(conf, predict(state, x, batch_size), y, state.config.loss.ignore_label)
    ious, mean = miou(conf)
    report = {
        "miou": mean,
        "per_class_iou": [None if np.isnan(v) else float(v) for v in ious],
        "confusion": conf.counts.tolist(),
    }
    return report, conf


@dataclass
class MetricsRecord:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    wall_clock: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def deterministic_view(self):
        """Everything except wall-clock time."""
        return {"steps": self.steps, "epochs": self.epochs, "diagnostics": self.diagnostics}

    def to_dict(self):
        d = self.deterministic_view()
        d["wall_clock"] = self.wall_clock
        return d


def _jsonable(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            v = {str(kk): vv for kk, vv in v.items()}
        out[k] = v
    return out


def steps_per_epoch(n_samples, batch_size):
    return math.ceil(n_samples / batch_size)


def fit(config, train, eval_samples=None, state=None, eval_every=1, on_step=None):
    """Train on ``train`` samples.  Resumes from ``state.step`` when a state is given."""
    if not train:
        raise ConfigError("empty training set")
    if state is None:
        state = init_state(config, train[0].features.shape[0], train[0].num_classes)
    spe = steps_per_epoch(len(train), config.optim.batch_size)
    state.max_steps = config.optim.epochs * spe
    record = MetricsRecord()
    started = time.perf_counter()
    bs = config.optim.batch_size
    perm, perm_epoch = None, -1
    while state.step < state.max_steps:
        epoch, k = divmod(state.step, spe)
        if epoch != perm_epoch:
            perm = np.random.default_rng([config.shuffle_seed, epoch]).permutation(len(train))
            perm_epoch = epoch
        idx = perm[k * bs:(k + 1) * bs]
        x, y = stack([train[i] for i in idx])
        breakdown, diag = train_step(state, x, y)
        entry = {"step": state.step, "epoch": epoch, **breakdown.as_dict(), **_jsonable(diag)}
        record.steps.append(entry)
        if on_step is not None:
            on_step(entry)
        if log.isEnabledFor(logging.DEBUG):
            log.debug("step %d total %.5f", state.step, breakdown.total)
        end_of_epoch = state.step % spe == 0 or state.step == state.max_steps
        if end_of_epoch and eval_samples and eval_every and (epoch + 1) % eval_every == 0:
            report, _ = evaluate(state, eval_samples)
            record.epochs.append({"epoch": epoch, "miou": report["miou"], "per_class_iou": report["per_class_iou"]})
            log.info("epoch %d eval mIoU %.4f", epoch, report["miou"])
    record.wall_clock = time.perf_counter() - started
    record.diagnostics["update_counts"] = state.update_counts.tolist()
    record.diagnostics["dead_prototypes"] = int((state.update_counts == 0).sum())
    return state, record


# checkpoints ------------------------------------------------------------------


def _write_tensor(buf, name, arr):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    for n in arr.shape:
        buf.write(struct.pack("<I", n))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def encode_checkpoint(state):
    meta = {
        "config": state.config.to_dict(),
        "step": state.step,
        "max_steps": state.max_steps,
        "update_counts": state.update_counts.tolist(),
    }
    text = json.dumps(meta, sort_keys=True, indent=2).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(state.params) + len(state.velocity) + 1))
    for name, p in state.params.items():
        _write_tensor(buf, name, p.data)
    for name, v in state.velocity.items():
        _write_tensor(buf, VELOCITY_PREFIX + name, v)
    _write_tensor(buf, "bank", state.bank.entries)
    return buf.getvalue()


def save_checkpoint(path, state):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(state))


class _Reader:
    def __init__(self, blob):
        self.blob, self.pos = blob, 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def decode_checkpoint(blob):
    r = _Reader(blob)
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}", offset=0)
    (version,) = r.unpack("<H", "version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (text_len,) = r.unpack("<I", "config length")
    meta = json.loads(r.take(text_len, "config text").decode("utf-8"))
    config = TrainConfig.from_dict(meta["config"])
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack("<" + "I" * rank, f"extents of {name}") if rank else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * size, f"data of {name}"), dtype="<f4").reshape(shape)
        tensors[name] = data
    if r.pos != len(blob):
        raise FormatError("trailing bytes after checkpoint", offset=r.pos)
    if "bank" not in tensors:
        raise FormatError("checkpoint has no bank tensor", offset=r.pos)
    dtype = np.dtype(config.dtype)
    bank = DistributionBank(tensors.pop("bank").astype(dtype))
    if bank.distributions_per_class != config.n_dist:
        raise FormatError(
            f"bank has {bank.distributions_per_class} distributions per class, config says {config.n_dist}"
        )
    velocity = {
        name[len(VELOCITY_PREFIX):]: tensors.pop(name).astype(dtype)
        for name in list(tensors)
        if name.startswith(VELOCITY_PREFIX)
    }
    params = {name: Tensor(arr.astype(dtype), requires_grad=True, name=name) for name, arr in tensors.items()}
    counts = np.asarray(meta.get("update_counts"), dtype=np.int64).reshape(bank.entries.shape[:2])
    return TrainState(config, params, bank, meta["step"], meta["max_steps"], counts, velocity)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


# ablation -----------------------------------------------------------------------


def _run_one(args):
    config, train, eval_samples = args
    state, record = fit(config, train, None, eval_every=0)
    report, _ = evaluate(state, eval_samples)
    return report["miou"], record.steps[-1]["total"] if record.steps else None


def ablate(config, param, values, seeds=(0, 1, 2), train=None, eval_samples=None, jobs=1):
    """Train one model per (value, seed) and tabulate eval mIoU.

    A run that raises is recorded as failed and the sweep continues.
    """
    path = resolve_param(param)
    if train is None or eval_samples is None:
        train, eval_samples = generate_splits(config.data)
    jobs_list = []
    for value in values:
        for seed in seeds:
            cfg = with_seed(override(config, path, coerce(path, value)), seed)
            jobs_list.append((value, seed, cfg))

    def run(item):
        value, seed, cfg = item
        try:
            return _run_one((cfg, train, eval_samples))[0]
        except (NumericError, FloatingPointError, ValueError) as exc:
            log.warning("ablation run %s=%s seed %s failed: %s", param, value, seed, exc)
            return None

    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_one, (cfg, train, eval_samples)) for _, _, cfg in jobs_list]
            results = []
            for f in futures:
                try:
                    results.append(f.result()[0])
                except Exception as exc:  # worker failure marks the row failed
                    log.warning("ablation run failed: %s", exc)
                    results.append(None)
    else:
        results = [run(item) for item in jobs_list]

    rows = []
    per = len(seeds)
    for i, value in enumerate(values):
        scores = results[i * per:(i + 1) * per]
        ok = [s for s in scores if s is not None]
        rows.append(
            {
                "param": param,
                "value": coerce(path, value),
                "seeds": list(seeds),
                "miou": scores,
                "mean": statistics.fmean(ok) if ok else None,
                "stdev": statistics.stdev(ok) if len(ok) > 1 else 0.0 if ok else None,
                "failed": len(ok) != len(scores),
            }
        )
    return rows
