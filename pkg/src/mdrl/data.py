"""Synthetic multi-modal segmentation tasks, sample files and mIoU.

Every class owns several feature-space modes.  An image is a background blob
overpainted with random rectangular blobs; each blob picks a class and one of
that class's modes, and its pixels are the mode centre plus Gaussian noise.
A single prototype per class is therefore a poor description of a class.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DimensionError, FormatError
from .losses import IGNORE_LABEL

MAGIC = b"MDRS"
VERSION = 1
_HEADER = struct.Struct("<4sHHHHH")


@dataclass
class SynthSpec:
    num_classes: int = 4
    modes_per_class: int = 3
    input_dim: int = 8
    height: int = 32
    width: int = 32
    blob_count: tuple = (4, 10)
    blob_size: tuple = (6, 16)
    separation: float = 4.0
    noise: float = 0.7
    seed: int = 0
    n_train: int = 200
    n_eval: int = 50
    ignore_edges: bool = False

    def __post_init__(self):
        self.blob_count = tuple(self.blob_count)
        self.blob_size = tuple(self.blob_size)
        if self.num_classes < 2 or self.num_classes > 255:
            raise ConfigError("num_classes must lie in [2, 255]")
        if self.modes_per_class < 1:
            raise ConfigError("modes_per_class must be >= 1")
        if not self.separation > 0:
            raise ConfigError("separation must be > 0")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        lo, hi = self.blob_size
        if lo < 1 or hi < lo:
            raise ConfigError(f"invalid blob_size range {self.blob_size}")
        if hi > min(self.height, self.width):
            raise ConfigError(
                f"blobs up to {hi} pixels do not fit a {self.height}x{self.width} image"
            )
        if self.blob_count[0] < 0 or self.blob_count[1] < self.blob_count[0]:
            raise ConfigError(f"invalid blob_count range {self.blob_count}")


@dataclass
class Sample:
    features: np.ndarray  # (D_in, H, W) float32
    labels: np.ndarray  # (H, W) uint8, IGNORE_LABEL = ignored
    num_classes: int

    def __eq__(self, other):
        return (
            isinstance(other, Sample)
            and self.num_classes == other.num_classes
            and self.features.dtype == other.features.dtype
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


def mode_centers(spec):
    """(C, K, D_in) centres with every pair at least ``separation`` apart.

    Centres are drawn from N(0, separation^2 I) by rejection, so the closest
    pairs sit near the minimum separation instead of far beyond it.
    """
    rng = np.random.default_rng([spec.seed, 0])
    total = spec.num_classes * spec.modes_per_class
    centers = []
    attempts = 0
    while len(centers) < total:
        attempts += 1
        if attempts > 100000:
            raise ConfigError("could not place mode centres at the requested separation")
        cand = rng.standard_normal(spec.input_dim) * spec.separation
        if all(np.linalg.norm(cand - c) >= spec.separation for c in centers):
            centers.append(cand)
    return np.array(centers).reshape(spec.num_classes, spec.modes_per_class, spec.input_dim)


def _paint(rng, spec):
    """Class and mode maps plus the class drawn for each blob (background first)."""
    h, w = spec.height, spec.width
    drawn = [int(rng.integers(spec.num_classes))]
    cls = np.full((h, w), drawn[0], dtype=np.int64)
    mode = np.full((h, w), rng.integers(spec.modes_per_class), dtype=np.int64)
    lo, hi = spec.blob_size
    for _ in range(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1)):
        bh, bw = rng.integers(lo, hi + 1, size=2)
        y0 = rng.integers(0, h - bh + 1)
        x0 = rng.integers(0, w - bw + 1)
        drawn.append(int(rng.integers(spec.num_classes)))
        cls[y0:y0 + bh, x0:x0 + bw] = drawn[-1]
        mode[y0:y0 + bh, x0:x0 + bw] = rng.integers(spec.modes_per_class)
    return cls, mode, drawn


def _edges(cls):
    edge = np.zeros(cls.shape, dtype=bool)
    edge[:-1] |= cls[:-1] != cls[1:]
    edge[1:] |= cls[:-1] != cls[1:]
    edge[:, :-1] |= cls[:, :-1] != cls[:, 1:]
    edge[:, 1:] |= cls[:, :-1] != cls[:, 1:]
    return edge


def generate(spec, count, split=0, blob_classes=None):
    """``count`` samples; ``split`` selects an independent image stream.

    When ``blob_classes`` is a list, the class drawn for every blob of every
    image (background included) is appended to it.
    """
    centers = mode_centers(spec)
    rng = np.random.default_rng([spec.seed, 1, split])
    out = []
    for _ in range(count):
        cls, mode, drawn = _paint(rng, spec)
        if blob_classes is not None:
            blob_classes.extend(drawn)
        feats = centers[cls, mode] + rng.standard_normal(cls.shape + (spec.input_dim,)) * spec.noise
        labels = cls.astype(np.uint8)
        if spec.ignore_edges:
            labels[_edges(cls)] = IGNORE_LABEL
        out.append(
            Sample(np.ascontiguousarray(feats.transpose(2, 0, 1), dtype=np.float32), labels, spec.num_classes)
        )
    return out


def generate_splits(spec):
    """Return ``(train, eval)`` lists sized by ``spec.n_train`` and ``spec.n_eval``."""
    return generate(spec, spec.n_train, split=0), generate(spec, spec.n_eval, split=1)


def stack(samples):
    """Batch samples as ``(x, y)`` with x in (B, D_in, H, W) and y in (B, H, W)."""
    if not samples:
        raise DimensionError("no samples to stack")
    return np.stack([s.features for s in samples]), np.stack([s.labels for s in samples])


# sample files ---------------------------------------------------------------


def write_sample(path, sample):
    d, h, w = sample.features.shape
    if sample.labels.shape != (h, w):
        raise DimensionError(f"labels {sample.labels.shape} do not match features {sample.features.shape}")
    header = _HEADER.pack(MAGIC, VERSION, d, h, w, sample.num_classes)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(sample.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(sample.labels, dtype=np.uint8).tobytes())


def read_sample(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_sample(blob)


def decode_sample(blob):
    if len(blob) < 4:
        raise FormatError(f"truncated header: expected magic {MAGIC!r}", offset=len(blob))
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header", offset=len(blob))
    _, version, d, h, w, c = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", offset=4)
    n_feat = d * h * w * 4
    need = _HEADER.size + n_feat + h * w
    if len(blob) < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(blob)}", offset=len(blob))
    if len(blob) > need:
        raise FormatError(f"{len(blob) - need} trailing bytes", offset=need)
    feats = np.frombuffer(blob, dtype="<f4", count=d * h * w, offset=_HEADER.size)
    labels = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=_HEADER.size + n_feat)
    bad = (labels >= c) & (labels != IGNORE_LABEL)
    if bad.any():
        pos = int(np.flatnonzero(bad)[0])
        raise FormatError(f"label {labels[pos]} out of range for {c} classes", offset=_HEADER.size + n_feat + pos)
    return Sample(
        feats.reshape(d, h, w).astype(np.float32), labels.reshape(h, w).copy(), int(c)
    )


# evaluation -----------------------------------------------------------------


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)

    def copy(self):
        return ConfusionMatrix(self.num_classes, self.counts.copy())

    def __add__(self, other):
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def accumulate(conf, pred, gt, ignore_label=IGNORE_LABEL):
    """Return a new matrix with ``counts[gt, pred]`` incremented per valid pixel."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    c = conf.num_classes
    keep = gt != ignore_label
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.max() >= c or p.max() >= c or p.min() < 0 or g.min() < 0):
        raise DimensionError(f"labels outside [0, {c})")
    counts = np.bincount(g * c + p, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(c, conf.counts + counts)


def miou(conf):
    """Per-class IoU (NaN where TP + FP + FN = 0) and their mean over the rest."""
    counts = conf.counts.astype(np.float64)
    tp = np.diag(counts)
    denom = counts.sum(axis=0) + counts.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    present = ~np.isnan(iou)
    mean = float(iou[present].mean()) if present.any() else float("nan")
    return iou, mean
