"""Class-level multi-distribution memory bank.

The bank holds ``N`` unit-norm distribution features for each of ``C``
classes.  Each training step, the pixels of every class are spread over that
class's distributions by an equipartitioned entropic transport plan
(Sinkhorn-Knopp) and the bank entries move towards the mean of their pixels
with an exponential moving average.  The bank is never trained by
backpropagation.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DimensionError, NumericError


@dataclass
class SinkhornParams:
    """Entropic smoothing ``lam`` and the number of row/column rescaling rounds.

    With ``tol`` set, iteration stops early once every row sum is within
    ``tol`` of its target; ``iterations`` is then an upper bound.
    """

    lam: float = 0.05
    iterations: int = 3
    tol: float = None

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError(f"sinkhorn lambda must be > 0, got {self.lam}")
        if int(self.iterations) < 1:
            raise ConfigError(f"sinkhorn iterations must be >= 1, got {self.iterations}")


@dataclass
class BankConfig:
    momentum: float = 0.999
    init_seed: int = 0
    warmup_steps: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError(f"momentum must lie in [0, 1], got {self.momentum}")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")


class DistributionBank:
    """``entries[c, n]`` is the n-th distribution feature of class c."""

    def __init__(self, entries):
        entries = np.asarray(entries)
        if entries.ndim != 3:
            raise DimensionError(f"bank entries must be (C, N, Z), got shape {entries.shape}")
        c, n, z = entries.shape
        if c < 2 or n < 1 or z < 2:
            raise ConfigError(f"bank needs C >= 2, N >= 1, Z >= 2; got C={c}, N={n}, Z={z}")
        self.entries = entries

    @property
    def num_classes(self):
        return self.entries.shape[0]

    @property
    def distributions_per_class(self):
        return self.entries.shape[1]

    @property
    def embed_dim(self):
        return self.entries.shape[2]

    def group(self, i):
        """The (C, Z) slice holding distribution ``i`` of every class."""
        return self.entries[:, i, :]

    def flat(self):
        return self.entries.reshape(-1, self.embed_dim)

    def copy(self):
        return DistributionBank(self.entries.copy())

    def norms(self):
        return np.linalg.norm(self.entries, axis=-1)

    def __repr__(self):
        c, n, z = self.entries.shape
        return f"DistributionBank(C={c}, N={n}, Z={z})"


def _normalize_rows(x, eps=1e-12):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(norm < eps, x, x / np.where(norm < eps, 1.0, norm))


def init_bank(num_classes, distributions_per_class, embed_dim, seed=0, dtype=np.float64):
    """Isotropic Gaussian draws projected onto the unit sphere."""
    for name, value, low in (
        ("num_classes", num_classes, 2),
        ("distributions_per_class", distributions_per_class, 1),
        ("embed_dim", embed_dim, 2),
    ):
        if int(value) != value or value < low:
            raise ConfigError(f"{name} must be an integer >= {low}, got {value}")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((num_classes, distributions_per_class, embed_dim))
    return DistributionBank(_normalize_rows(raw).astype(dtype))


@dataclass
class AssignmentMatrix:
    """Soft pixel-to-distribution plan ``values`` of shape (N, M).

    Columns sum to one (every pixel fully assigned) and rows approach M/N
    (equipartition).  ``dual_trace`` holds the Sinkhorn dual objective after
    every half-step when requested.
    """

    values: np.ndarray
    iterations_run: int = 0
    dual_trace: list = field(default=None, repr=False)

    @property
    def pixel_count(self):
        return self.values.shape[1]

    def hard(self):
        """Distribution index per pixel (argmax of each column, lowest index on ties)."""
        return np.argmax(self.values, axis=0)

    def row_residual(self):
        n, m = self.values.shape
        return float(np.abs(self.values.sum(axis=1) - m / n).max())

    def col_residual(self):
        return float(np.abs(self.values.sum(axis=0) - 1.0).max())


def sinkhorn_assign(scores, params=None, trace=False):
    """Balanced assignment of M pixels to N distributions.

    ``scores`` is the (N, M) similarity matrix between distributions and
    pixels.  Returns ``diag(u) exp(scores / lam) diag(v)`` after alternating
    row (target M/N) and column (target 1) rescalings; the last step is a
    column rescaling, so columns sum to one exactly.
    """
    params = params or SinkhornParams()
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] < 1:
        raise DimensionError(f"scores must be (N, M) with M >= 1, got {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise NumericError("sinkhorn scores contain non-finite values")
    n, m = scores.shape
    lam = float(params.lam)
    # Subtracting each column's max is absorbed by v and keeps exp() <= 1.
    col_shift = scores.max(axis=0, keepdims=True)
    kernel = np.exp((scores - col_shift) / lam)
    row_target = m / n

    u = np.ones(n)
    v = np.ones(m)
    dual = [] if trace else None

    def dual_value():
        # lam * (sum_i r_i log u_i + sum_j log v_j - sum_ij u_i K_ij v_j) for the
        # unshifted kernel exp(scores / lam); the shift moves into v.
        with np.errstate(divide="ignore"):
            return lam * (
                row_target * np.log(u).sum()
                + (np.log(v) - col_shift[0] / lam).sum()
                - (u[:, None] * kernel * v[None, :]).sum()
            )

    done = 0
    for _ in range(int(params.iterations)):
        row = kernel @ v
        if np.any(row <= 0) or not np.all(np.isfinite(row)):
            raise NumericError(
                f"sinkhorn row mass vanished or overflowed at lambda={lam}; use a larger lambda"
            )
        u = row_target / row
        if trace:
            dual.append(dual_value())
        col = u @ kernel
        if np.any(col <= 0):
            raise NumericError(f"sinkhorn column mass vanished at lambda={lam}; use a larger lambda")
        v = 1.0 / col
        if trace:
            dual.append(dual_value())
        done += 1
        if params.tol is not None:
            rows = u * (kernel @ v)
            if np.abs(rows - row_target).max() < params.tol:
                break

    plan = u[:, None] * kernel * v[None, :]
    return AssignmentMatrix(plan, done, dual)


def transport_objective(plan, scores, lam):
    """Primal entropic objective Tr(L^T S) + lam * H(L)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(plan > 0, plan * np.log(plan), 0.0).sum()
    return float((plan * scores).sum() + lam * ent)


def group_by_class(embeddings, labels, num_classes, ignore_label=255):
    """Split (M, Z) pixel embeddings into ``{class: (M_c, Z)}`` by label."""
    embeddings = np.asarray(embeddings)
    labels = np.asarray(labels).reshape(-1)
    if embeddings.shape[0] != labels.shape[0]:
        raise DimensionError(
            f"{embeddings.shape[0]} embeddings but {labels.shape[0]} labels"
        )
    groups = {}
    for c in range(num_classes):
        mask = labels == c
        if mask.any():
            groups[c] = embeddings[mask]
    return groups


def cluster_batch(grouped, bank, params=None, diagnostics=None):
    """Assign each class's pixels over that class's N distributions.

    Classes with fewer than N pixels are skipped; their ids are appended to
    ``diagnostics["skipped_classes"]`` when a dict is given.
    """
    params = params or SinkhornParams()
    n = bank.distributions_per_class
    out = {}
    for c in sorted(grouped):
        pix = grouped[c]
        if pix.shape[0] < n:
            if diagnostics is not None:
                diagnostics.setdefault("skipped_classes", []).append(int(c))
            continue
        scores = bank.entries[c].astype(np.float64) @ pix.astype(np.float64).T
        out[c] = sinkhorn_assign(scores, params)
        if diagnostics is not None:
            diagnostics.setdefault("sinkhorn_row_residual", {})[int(c)] = out[c].row_residual()
    return out


def update_bank(bank, grouped, assignments, config=None):
    """Momentum update of every (c, n) that received at least one pixel.

    The target for (c, n) is the l2-normalised mean of the pixels whose hard
    assignment is n.  The blended entry is renormalised to unit length.
    Returns a new bank; the input is not modified.
    """
    config = config or BankConfig()
    mu = config.momentum
    entries = bank.entries.copy()
    n_dist = bank.distributions_per_class
    for c, plan in assignments.items():
        pix = grouped[c]
        hard = plan.hard()
        for n in range(n_dist):
            members = pix[hard == n]
            if members.shape[0] == 0:
                continue
            target = _normalize_rows(members.mean(axis=0, dtype=np.float64))
            if mu == 1.0:
                continue
            blended = mu * entries[c, n].astype(np.float64) + (1.0 - mu) * target
            entries[c, n] = _normalize_rows(blended)
    return DistributionBank(entries)


def assignment_counts(bank, assignments):
    """(C, N) number of pixels hard-assigned to each entry in one step."""
    counts = np.zeros(bank.entries.shape[:2], dtype=np.int64)
    for c, plan in assignments.items():
        counts[c] += np.bincount(plan.hard(), minlength=bank.distributions_per_class)
    return counts


def nearest_distribution(bank, pixel):
    """Closest entry under negative cosine distance.

    Returns ``(class, index, distance)`` with ``distance = -pixel . d``; the
    lowest (class, index) pair wins ties.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    if pixel.shape != (bank.embed_dim,):
        raise DimensionError(f"pixel must have shape ({bank.embed_dim},), got {pixel.shape}")
    sims = bank.flat().astype(np.float64) @ pixel
    k = int(np.argmax(sims))
    c, n = divmod(k, bank.distributions_per_class)
    return c, n, float(-sims[k])
