"""Minimal reverse-mode differentiation over numpy arrays.

Every operation records its parents and a closure that pushes the output
gradient back to them.  ``Tensor.backward`` replays the tape in reverse
topological order.  Only the operations the segmentation pipeline needs are
provided; broadcasting is limited to what ``numpy`` does for elementwise ops
and batched ``matmul``.
"""

import os
from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, NumericError

# When set, every op output is checked for NaN/Inf as soon as it is produced.
DEBUG = os.environ.get("MDRL_DEBUG", "") not in ("", "0")

NORM_EPS = 1e-12


class Tensor:
    """A value on the tape.  ``grad`` is filled by :meth:`backward`."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable tensor's ``grad``.

        Gradients of every node in the graph are reset first, so calling
        ``backward`` twice does not double-count.
        """
        topo = _toposort(self)
        for node in topo:
            node.grad = None
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}"
                )
            self.grad = np.ones_like(self.data)
        else:
            self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape).copy()
        for node in reversed(topo):
            if node.grad is None:
                # unreachable from the root along differentiable paths
                node.grad = np.zeros_like(node.data)
            elif node._backward is not None:
                node._backward(node.grad)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, like=self)))

    def __rsub__(self, other):
        return add(as_tensor(other, like=self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward, opname):
    if DEBUG and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from {opname}")
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        # take ownership of freshly computed arrays, copy views
        if g.base is not None or not g.flags.writeable or g.dtype != t.data.dtype:
            g = np.array(g, dtype=t.data.dtype)
        t.grad = g
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def assert_finite(*tensors, where="value"):
    for t in tensors:
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))[0]
            raise NumericError(f"non-finite {where} at index {tuple(int(i) for i in bad)}")


# elementwise --------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        for t in (a, b):
            if t.requires_grad:
                gt = _unbroadcast(g, t.shape)
                _accum(t, gt.copy() if gt is g else gt)

    return _result(data, (a, b), backward, "add")


def scale(a, k):
    """Multiply by a Python scalar."""
    k = float(k)

    def backward(g):
        _accum(a, g * k)

    return _result(a.data * k, (a,), backward, "scale")


def mul(a, b):
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, b)
    a, b = as_tensor(a), as_tensor(b, like=a)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward, "mul")


def neg(a):
    def backward(g):
        _accum(a, -g)

    return _result(-a.data, (a,), backward, "neg")


def reciprocal(a):
    data = 1.0 / a.data

    def backward(g):
        _accum(a, -g * data * data)

    return _result(data, (a,), backward, "reciprocal")


def exp(a):
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _result(data, (a,), backward, "exp")


def log(a):
    data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _result(data, (a,), backward, "log")


def tanh(a):
    data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - data * data))

    return _result(data, (a,), backward, "tanh")


def relu(a):
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _result(a.data * mask, (a,), backward, "relu")


# shape ---------------------------------------------------------------------


def reshape(a, shape):
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _result(data, (a,), backward, "reshape")


def swapaxes(a, ax1, ax2):
    def backward(g):
        _accum(a, np.swapaxes(g, ax1, ax2))

    return _result(np.swapaxes(a.data, ax1, ax2), (a,), backward, "swapaxes")


def index(a, key):
    """``a[key]`` with scatter-add backward (handles repeated fancy indices)."""
    data = a.data[key]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            _accum(a, full)

    return _result(np.array(data, copy=True), (a,), backward, "index")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"cannot concatenate shapes {shapes} along axis {axis}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            _accum(t, piece)

    return _result(data, tensors, backward, "concat")


# reductions ----------------------------------------------------------------


def reduce_sum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _result(np.asarray(data), (a,), backward, "sum")


def reduce_mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


def reduce_min(a, axis=-1):
    """Minimum along ``axis``; the lowest index wins ties and gets the gradient."""
    idx = np.argmin(a.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    data = np.take_along_axis(a.data, idx_k, axis=axis).squeeze(axis)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.put_along_axis(full, idx_k, np.expand_dims(g, axis), axis=axis)
            _accum(a, full)

    return _result(data, (a,), backward, "min")


# linear algebra ------------------------------------------------------------


def matmul(a, b):
    """Batched matrix product ``a @ b`` over the last two axes.

    ``b`` may be a plain 2-D matrix shared across the batch.
    """
    a, b = as_tensor(a), as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                _accum(b, a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(data, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """Per-position affine map over the trailing (channel) axis."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# normalization / probabilities ----------------------------------------------


def softmax(a, axis=-1):
    data = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(data, out=data)
    data /= data.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        out = g - inner
        out *= data
        _accum(a, out)

    return _result(data, (a,), backward, "softmax")


def log_softmax(a, axis=-1):
    m = a.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    data = a.data - lse

    def backward(g):
        _accum(a, g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _result(data, (a,), backward, "log_softmax")


def logsumexp(a, axis=-1):
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = (m + np.log(s)).squeeze(axis)

    def backward(g):
        _accum(a, np.expand_dims(g, axis) * (e / s))

    return _result(data, (a,), backward, "logsumexp")


def l2_normalize(a, axis=-1, eps=NORM_EPS):
    """Scale slices along ``axis`` to unit Euclidean norm.

    Slices whose norm is below ``eps`` pass through unchanged (identity
    gradient), so zero vectors stay zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    keep = norm < eps
    safe = np.where(keep, 1.0, norm)
    data = a.data / safe

    def backward(g):
        proj = g - data * (g * data).sum(axis=axis, keepdims=True)
        _accum(a, np.where(keep, g, proj / safe))

    return _result(data, (a,), backward, "l2_normalize")


# spatial (channels-last: batch, height, width, channels) ---------------------


def _box_sum3(x):
    p = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    h, w = x.shape[1], x.shape[2]
    out = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            out += p[:, dy:dy + h, dx:dx + w]
    return out


def box_mean3(a):
    """Mean over each position's 3x3 neighbourhood, clipped at the border."""
    if a.ndim != 4:
        raise DimensionError(f"box_mean3 expects (B, H, W, C), got {a.shape}")
    ones = np.ones((1, a.shape[1], a.shape[2], 1), dtype=a.dtype)
    count = _box_sum3(ones)
    data = _box_sum3(a.data) / count

    def backward(g):
        # the neighbourhood relation is symmetric, so the adjoint is box_sum(g / count)
        _accum(a, _box_sum3(g / count))

    return _result(data, (a,), backward, "box_mean3")


def avg_pool(a, s):
    """Non-overlapping s x s mean pooling; H and W must be divisible by s."""
    if s == 1:
        return a
    b, h, w, c = a.shape
    if h % s or w % s:
        raise DimensionError(f"spatial size {(h, w)} not divisible by stride {s}")
    data = a.data.reshape(b, h // s, s, w // s, s, c).mean(axis=(2, 4))

    def backward(g):
        up = np.repeat(np.repeat(g, s, axis=1), s, axis=2) / (s * s)
        _accum(a, up)

    return _result(data, (a,), backward, "avg_pool")


def upsample_nearest(a, s):
    """Block-replicate every position into an s x s patch."""
    if s == 1:
        return a
    data = np.repeat(np.repeat(a.data, s, axis=1), s, axis=2)
    b, h, w, c = a.shape

    def backward(g):
        _accum(a, g.reshape(b, h, s, w, s, c).sum(axis=(2, 4)))

    return _result(data, (a,), backward, "upsample_nearest")


# gradient checking ---------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst: tuple
    probes: int
    tol: float

    @property
    def passed(self):
        return self.max_rel_error < self.tol


def grad_check(f, inputs, step=1e-6, tol=1e-6, probes=None, seed=0):
    """Compare the tape gradient of scalar ``f(*inputs)`` with central differences.

    ``inputs`` is an array or a sequence of arrays (float64).  With ``probes``
    set, only that many randomly chosen coordinates per input are perturbed.
    The reported error is ``max|analytic - numeric| / max(|analytic|, |numeric|)``
    taken over all probed coordinates, so coordinates with negligible gradient
    do not dominate.
    """
    single = isinstance(inputs, (np.ndarray, Tensor))
    arrays = [inputs] if single else list(inputs)
    arrays = [np.array(a.data if isinstance(a, Tensor) else a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(*leaves)
    if out.data.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    rng = np.random.default_rng(seed)

    worst_abs, scale, worst = 0.0, 0.0, None
    count = 0
    for k, (arr, leaf) in enumerate(zip(arrays, leaves)):
        analytic = leaf.grad
        flat_idx = np.arange(arr.size)
        if probes is not None and probes < arr.size:
            flat_idx = rng.choice(arr.size, size=probes, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape)
            orig = arr[idx]
            vals = []
            for delta in (step, -step):
                arr[idx] = orig + delta
                v = f(*[Tensor(a) for a in arrays]).data
                if not np.all(np.isfinite(v)):
                    arr[idx] = orig
                    raise NumericError(f"non-finite value probing input {k} at index {idx}")
                vals.append(float(v))
            arr[idx] = orig
            numeric = (vals[0] - vals[1]) / (2 * step)
            err = abs(analytic[idx] - numeric)
            scale = max(scale, abs(analytic[idx]), abs(numeric))
            if err >= worst_abs:
                worst_abs, worst = err, (k,) + tuple(int(i) for i in idx)
            count += 1
    rel = worst_abs / scale if scale > 0 else worst_abs
    return GradCheckReport(float(rel), float(worst_abs), worst, count, tol)
