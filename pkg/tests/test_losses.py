import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdrl import autograd as ag
from mdrl import gradcheck
from mdrl.autograd import Tensor, grad_check
from mdrl.bank import init_bank
from mdrl.exceptions import ConfigError, DimensionError, NumericError
from mdrl.losses import (
    LossConfig,
    combine,
    downsample_labels,
    loss_ce,
    loss_cgcl,
    loss_clcl,
    total_loss,
)


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _case(seed, m=10, c=4, n=3, z=6):
    rng = np.random.default_rng(seed)
    bank = init_bank(c, n, z, seed=seed).entries
    pix = _unit(rng.standard_normal((m, z)))
    labels = rng.integers(c, size=m)
    return rng, bank, pix, labels


def _clcl_brute(pix, labels, bank):
    c, n, _ = bank.shape
    total = 0.0
    for p, y in zip(pix, labels):
        dist = np.array([min(-(p @ bank[k, j]) for j in range(n)) for k in range(c)])
        total += -(-dist[y] - math.log(sum(math.exp(-d) for d in dist)))
    return total / len(labels)


def _cgcl_brute(pix, labels, bank, tau):
    c, n, _ = bank.shape
    total = 0.0
    for p, y in zip(pix, labels):
        pos = sum(math.exp(p @ bank[y, j] / tau) for j in range(n))
        neg = sum(math.exp(p @ bank[k, j] / tau) for k in range(c) if k != y for j in range(n))
        total += -math.log(pos / (pos + neg))
    return total / len(labels)


# class local consistency ---------------------------------------------------


def test_clcl_antipodal_closed_form():
    bank = np.array([[[1.0, 0.0]], [[-1.0, 0.0]]])
    loss = loss_clcl(Tensor(np.array([[1.0, 0.0]])), np.array([0]), bank).item()
    assert loss == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-6)
    assert loss == pytest.approx(0.12693, abs=1e-5)


def test_clcl_equal_minima_is_log_c():
    bank = np.zeros((5, 2, 3))
    bank[:, 0] = [0.0, 0.0, 1.0]
    bank[:, 1] = [0.0, 1.0, 0.0]
    pix = Tensor(np.array([[1.0, 0.0, 0.0]]))
    assert loss_clcl(pix, np.array([2]), bank).item() == pytest.approx(math.log(5), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_clcl_matches_brute_force(seed):
    _, bank, pix, labels = _case(seed)
    assert loss_clcl(Tensor(pix), labels, bank).item() == pytest.approx(_clcl_brute(pix, labels, bank), abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16), c=st.integers(2, 6))
def test_clcl_lower_bound_on_unit_vectors(seed, c):
    _, bank, pix, labels = _case(seed, c=c)
    bound = math.log(1 + (c - 1) * math.exp(-2))
    assert loss_clcl(Tensor(pix), labels, bank).item() >= bound - 1e-12


# class global consistency --------------------------------------------------


def test_cgcl_uniform_is_log_c():
    bank = np.zeros((4, 3, 2))
    bank[..., 0] = 1.0
    pix = Tensor(np.array([[0.6, 0.8], [1.0, 0.0]]))
    assert loss_cgcl(pix, np.array([1, 3]), bank).item() == pytest.approx(math.log(4), abs=1e-6)


@pytest.mark.parametrize("tau", [0.1, 0.5, 2.0])
def test_cgcl_single_distribution_is_softmax_ce(tau):
    _, bank, pix, labels = _case(3, n=1)
    logits = pix @ bank[:, 0].T / tau
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    expect = -logp[np.arange(len(labels)), labels].mean()
    assert loss_cgcl(Tensor(pix), labels, bank, tau=tau).item() == pytest.approx(expect, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_cgcl_matches_brute_force(seed):
    _, bank, pix, labels = _case(seed)
    got = loss_cgcl(Tensor(pix), labels, bank, tau=0.5).item()
    assert got == pytest.approx(_cgcl_brute(pix, labels, bank, 0.5), abs=1e-6)


# shared invariants ---------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_bank_losses_permutation_invariant(seed):
    rng, bank, pix, labels = _case(seed)
    perm = np.stack([rng.permutation(bank.shape[1]) for _ in range(bank.shape[0])])
    shuffled = np.take_along_axis(bank, perm[..., None], axis=1)
    assert loss_clcl(Tensor(pix), labels, bank).item() == loss_clcl(Tensor(pix), labels, shuffled).item()
    assert loss_cgcl(Tensor(pix), labels, bank).item() == loss_cgcl(Tensor(pix), labels, shuffled).item()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16), k=st.floats(1e-3, 1e3))
def test_bank_losses_scale_invariant(seed, k):
    rng, bank, _, labels = _case(seed)
    raw = rng.standard_normal((10, bank.shape[-1]))
    for fn in (loss_clcl, loss_cgcl):
        a = fn(ag.l2_normalize(Tensor(raw)), labels, bank).item()
        b = fn(ag.l2_normalize(Tensor(raw * k)), labels, bank).item()
        assert abs(a - b) < 1e-6


def test_bank_losses_leave_bank_untouched():
    _, bank, pix, labels = _case(0)
    before = bank.copy()
    x = Tensor(pix, requires_grad=True)
    (loss_clcl(x, labels, bank) + loss_cgcl(x, labels, bank)).backward()
    assert np.array_equal(bank, before)
    assert x.grad is not None


@pytest.mark.parametrize("seed", range(5))
def test_bank_loss_gradients(seed):
    assert gradcheck.check_clcl(seed).max_rel_error < 1e-4
    assert gradcheck.check_cgcl(seed).max_rel_error < 1e-4


def test_bank_losses_ignore_label_and_empty():
    _, bank, pix, labels = _case(0)
    labels = labels.copy()
    labels[:5] = 255
    full = loss_clcl(Tensor(pix[5:]), labels[5:], bank).item()
    assert loss_clcl(Tensor(pix), labels, bank).item() == pytest.approx(full)
    diag = {}
    empty = loss_cgcl(Tensor(pix), np.full(10, 255), bank, diagnostics=diag)
    assert empty.item() == 0.0
    assert diag["empty_losses"] == ["cgcl"]


def test_bank_loss_dimension_errors():
    _, bank, pix, labels = _case(0)
    with pytest.raises(DimensionError):
        loss_clcl(Tensor(pix[:, :3]), labels, bank)
    with pytest.raises(DimensionError):
        loss_cgcl(Tensor(pix), labels[:4], bank)


# cross entropy --------------------------------------------------------------


def test_ce_saturated():
    labels = np.array([[0, 2], [1, 1]])
    logits = np.zeros((2, 2, 3))
    np.put_along_axis(logits, labels[..., None], 50.0, axis=-1)
    assert loss_ce(Tensor(logits), labels).item() < 1e-3


def test_ce_uniform_is_log4():
    assert loss_ce(Tensor(np.zeros((1, 3, 3, 4))), np.zeros((1, 3, 3), dtype=int)).item() == pytest.approx(
        math.log(4), abs=1e-6
    )


def test_ce_gradient():
    assert gradcheck.check_ce(0).max_rel_error < 1e-5


def test_ce_ignores_and_flags_empty():
    logits = np.random.default_rng(0).standard_normal((1, 2, 2, 3))
    labels = np.array([[[0, 255], [255, 2]]])
    expect = loss_ce(Tensor(logits[0][[0, 1], [0, 1]]), np.array([0, 2])).item()
    assert loss_ce(Tensor(logits), labels).item() == pytest.approx(expect)
    diag = {}
    assert loss_ce(Tensor(logits), np.full((1, 2, 2), 255), diagnostics=diag).item() == 0.0
    assert diag["empty_losses"] == ["ce"]


def test_ce_label_out_of_range():
    with pytest.raises(DimensionError):
        loss_ce(Tensor(np.zeros((1, 1, 2, 3))), np.array([[[0, 3]]]))


def test_downsample_labels():
    labels = np.arange(16).reshape(1, 4, 4)
    assert np.array_equal(downsample_labels(labels, 1), labels)
    assert np.array_equal(downsample_labels(labels, 2), [[[5, 7], [13, 15]]])


# combination ---------------------------------------------------------------


def test_total_zero_weights_is_aug():
    cfg = LossConfig(eta=0.0, alpha=0.0, beta=0.0)
    assert total_loss({"cls": 3.0, "aug": 1.25, "clcl": 7.0, "cgcl": 9.0}, cfg).total == 1.25


def test_total_default_weights():
    out = total_loss({"cls": 1.0, "aug": 1.0, "clcl": 1.0, "cgcl": 1.0})
    assert out.total == pytest.approx(1.46, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=4, max_size=4), st.lists(st.floats(0, 2), min_size=3, max_size=3))
def test_total_breakdown_and_tensor_agree(parts, weights):
    cfg = LossConfig(eta=weights[0], alpha=weights[1], beta=weights[2])
    named = dict(zip(("cls", "aug", "clcl", "cgcl"), parts))
    bd = total_loss(named, cfg)
    independent = cfg.eta * parts[0] + parts[1] + cfg.alpha * parts[2] + cfg.beta * parts[3]
    assert bd.total == pytest.approx(independent, abs=1e-9)
    tensor = combine(*(Tensor(np.array(p)) for p in parts), cfg).item()
    assert tensor == pytest.approx(bd.total, abs=1e-9)


def test_total_rejects_non_finite():
    with pytest.raises(NumericError, match="clcl"):
        total_loss({"cls": 1.0, "aug": 1.0, "clcl": float("nan"), "cgcl": 1.0})


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(tau=0.0)
    with pytest.raises(ConfigError):
        LossConfig(alpha=-1.0)


def test_total_end_to_end_gradient():
    assert gradcheck.check_total(1, probes=10).max_rel_error < 1e-4


def test_grad_check_on_total_via_public_api():
    rng = np.random.default_rng(0)
    bank = init_bank(3, 2, 4, seed=0).entries
    labels = rng.integers(3, size=6)
    cfg = LossConfig()

    def f(emb, logits):
        e = ag.l2_normalize(emb)
        return combine(loss_ce(logits, labels), loss_ce(logits * 2.0, labels), loss_clcl(e, labels, bank),
                       loss_cgcl(e, labels, bank, cfg.tau), cfg)

    rep = grad_check(f, [rng.standard_normal((6, 4)), rng.standard_normal((6, 3))])
    assert rep.max_rel_error < 1e-6
