"""Acceptance criteria, one test per criterion.

Each test prints a PASS/FAIL line (also collected in the terminal summary).
Run only this module with ``pytest tests/test_acceptance.py -v``.
"""

import dataclasses
import math
import statistics
import time

import numpy as np
import pytest

from mdrl import autograd as ag
from mdrl import gradcheck, trainer
from mdrl.autograd import Tensor
from mdrl.bank import SinkhornParams, init_bank, nearest_distribution, sinkhorn_assign
from mdrl.config import TrainConfig, override, with_seed
from mdrl.data import decode_sample, generate, generate_splits, read_sample, write_sample
from mdrl.losses import loss_cgcl, loss_clcl

SEEDS = (0, 1, 2, 3, 4)
# Training budget for the comparative criteria.  Twenty runs of the full
# 30-epoch default schedule would take about 45 minutes on one core.
COMPARATIVE_EPOCHS = 5


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _cosine_scores(rng, n, m, z=16):
    """Bank-to-pixel similarities as the clustering step sees them: cosines of unit vectors."""
    return _unit(rng.standard_normal((n, z))) @ _unit(rng.standard_normal((m, z))).T


# 1 -------------------------------------------------------------------------


def test_1_sinkhorn_marginals(report_criterion):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst_col = worst_row = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 17))
        m = int(rng.integers(n, 513))
        lam = float(rng.choice([0.01, 0.05, 0.25]))
        plan = sinkhorn_assign(_cosine_scores(rng, n, m), SinkhornParams(lam, 100000, tol=1e-6))
        worst_col = max(worst_col, plan.col_residual())
        worst_row = max(worst_row, plan.row_residual())
    worst_uniform = 0.0
    for n in range(2, 17):
        for m in (n, 37, 512):
            m = max(m, n)
            plan = sinkhorn_assign(np.full((n, m), 0.3), SinkhornParams(0.05, 3)).values
            worst_uniform = max(worst_uniform, float(np.abs(plan - 1.0 / n).max()))
    elapsed = time.perf_counter() - start
    ok = worst_col < 1e-5 and worst_row < 1e-4 and worst_uniform < 1e-6 and elapsed < 10
    report_criterion(
        "1 sinkhorn marginals",
        ok,
        f"max |col-1|={worst_col:.1e} (<1e-5), max |row-M/N|={worst_row:.1e} (<1e-4), "
        f"uniform plan err={worst_uniform:.1e} (<1e-6), {elapsed:.1f}s (<10s)",
    )
    assert ok


# 2 -------------------------------------------------------------------------


def _few_step_error(scores_fn, instances=50, lam=0.25, seed=0):
    rng = np.random.default_rng(seed)
    worst_gap = worst_marg = 0.0
    for _ in range(instances):
        scores = scores_fn(rng)
        short = sinkhorn_assign(scores, SinkhornParams(lam, 3)).values
        fixed = sinkhorn_assign(scores, SinkhornParams(lam, 1000))
        worst_gap = max(worst_gap, float(np.abs(short - fixed.values).max()))
        worst_marg = max(worst_marg, fixed.row_residual(), fixed.col_residual())
    return worst_gap, worst_marg


def test_2_entropic_ot_few_step_convergence(report_criterion):
    gap, marg = _few_step_error(lambda rng: _cosine_scores(rng, 3, 6))
    # report-only: how the 3-step gap depends on the spread of the scores
    sweep = {z: _few_step_error(lambda rng, z=z: _cosine_scores(rng, 3, 6, z))[0] for z in (2, 8, 64, 512)}
    sweep["U[-1,1]"] = _few_step_error(lambda rng: rng.uniform(-1, 1, (3, 6)))[0]
    detail = ", ".join(f"{k}: {v:.1e}" for k, v in sweep.items())
    ok = gap < 1e-3 and marg < 1e-8
    report_criterion(
        "2 entropic-OT 3-step vs 1000-step",
        ok,
        f"max elementwise gap={gap:.2e} (<1e-3), fixed-point marginals={marg:.1e} (<1e-8); "
        f"gap by score source [{detail}]",
    )
    assert marg < 1e-8
    assert gap < 1e-3


# 3 -------------------------------------------------------------------------


def test_3_gradient_suite(report_criterion):
    start = time.perf_counter()
    errors = gradcheck.run_suite(seed=0, trials=100)
    elapsed = time.perf_counter() - start
    required = {"softmax", "l2_normalize", "encoder", "dsa", "loss_clcl", "loss_cgcl", "loss_ce", "total"}
    worst = max(errors.values())
    ok = required <= set(errors) and worst < 1e-4 and elapsed < 60
    report_criterion(
        "3 gradient suite",
        ok,
        f"{len(errors)} components x 100 seeds, worst rel err={worst:.1e} (<1e-4), {elapsed:.1f}s (<60s)",
    )
    assert ok


# 4 -------------------------------------------------------------------------


def test_4_loss_closed_forms(report_criterion):
    errs = []
    for c in (2, 3, 5, 19):
        bank = np.zeros((c, 3, 4))
        bank[..., 0] = 1.0
        pix = Tensor(np.array([[0.6, 0.8, 0.0, 0.0]]))
        errs.append(abs(loss_clcl(pix, np.array([1]), bank).item() - math.log(c)))
        errs.append(abs(loss_cgcl(pix, np.array([1]), bank).item() - math.log(c)))
    anti = np.array([[[1.0, 0.0]], [[-1.0, 0.0]]])
    anti_err = abs(loss_clcl(Tensor(np.array([[1.0, 0.0]])), np.array([0]), anti).item() - math.log(1 + math.exp(-2)))
    ok = max(errs) < 1e-6 and anti_err < 1e-6
    report_criterion(
        "4 loss closed forms",
        ok,
        f"uniform log C err={max(errs):.1e}, antipodal log(1+e^-2) err={anti_err:.1e} (<1e-6)",
    )
    assert ok


# 5, 6 ----------------------------------------------------------------------


def _comparative_config(**paths):
    cfg = TrainConfig()
    cfg = dataclasses.replace(cfg, optim=dataclasses.replace(cfg.optim, epochs=COMPARATIVE_EPOCHS))
    for path, value in paths.items():
        cfg = override(cfg, path, value)
    return cfg


def _mean_miou(cfg, splits):
    train, evals = splits
    scores = []
    for seed in SEEDS:
        state, _ = trainer.fit(with_seed(cfg, seed), train, None, eval_every=0)
        scores.append(trainer.evaluate(state, evals)[0]["miou"])
    return statistics.fmean(scores), scores


@pytest.fixture(scope="module")
def splits():
    return generate_splits(TrainConfig().data)


def test_5_multi_distribution_benefit(report_criterion, splits):
    start = time.perf_counter()
    mean3, runs3 = _mean_miou(_comparative_config(n_dist=3), splits)
    mean1, runs1 = _mean_miou(_comparative_config(n_dist=1), splits)
    elapsed = time.perf_counter() - start
    margin = mean3 - mean1
    ok = margin >= 0.02 and elapsed < 15 * 60
    report_criterion(
        "5 N=3 beats N=1 by 0.02 mIoU",
        ok,
        f"N=3 {mean3:.6f} {[round(s, 4) for s in runs3]}, N=1 {mean1:.6f} {[round(s, 4) for s in runs1]}, "
        f"margin={margin:+.6f} (>=0.02), {elapsed:.0f}s (<900s)",
    )
    assert elapsed < 15 * 60
    assert margin >= 0.02


def test_6_loss_ablation_structure(report_criterion, splits):
    both, runs_both = _mean_miou(_comparative_config(), splits)
    none, runs_none = _mean_miou(_comparative_config(**{"loss.alpha": 0.0, "loss.beta": 0.0}), splits)
    alpha_only, _ = _mean_miou(_comparative_config(**{"loss.beta": 0.0}), splits)
    beta_only, _ = _mean_miou(_comparative_config(**{"loss.alpha": 0.0}), splits)
    ok = both >= none
    report_criterion(
        "6 bank losses do not hurt",
        ok,
        f"(a=0.01,b=0.05) {both:.6f} >= (0,0) {none:.6f}; report-only: a only {alpha_only:.6f}, "
        f"b only {beta_only:.6f}; orderings a-only>=none: {alpha_only >= none}, b-only>=none: {beta_only >= none}",
    )
    assert ok


# 7 -------------------------------------------------------------------------


def test_7_determinism_and_persistence(report_criterion, splits, tmp_path):
    train, evals = splits
    cfg = _comparative_config()
    cfg64 = dataclasses.replace(override(cfg, "optim.epochs", 1), dtype="float64")
    a = trainer.fit(cfg64, train[:40], evals[:5])[1]
    b = trainer.fit(cfg64, train[:40], evals[:5])[1]
    same_metrics = a.deterministic_view() == b.deterministic_view()

    state, _ = trainer.fit(override(cfg, "optim.epochs", 1), train, None, eval_every=0)
    before = trainer.evaluate(state, evals)
    trainer.save_checkpoint(tmp_path / "m.mdck", state)
    after = trainer.evaluate(trainer.load_checkpoint(tmp_path / "m.mdck"), evals)
    same_eval = before[0] == after[0] and before[1] == after[1]

    lossless = True
    for i, s in enumerate(generate(TrainConfig().data, 20)):
        path = tmp_path / f"s{i}.mdrs"
        write_sample(path, s)
        back = read_sample(path)
        lossless &= back == s and back.features.tobytes() == s.features.tobytes()
        lossless &= decode_sample(path.read_bytes()) == s
    ok = same_metrics and same_eval and lossless
    report_criterion(
        "7 determinism and persistence",
        ok,
        f"float64 metrics identical={same_metrics}, checkpoint eval identical={same_eval} "
        f"(mIoU {before[0]['miou']:.4f}), sample round-trip bitwise={lossless}",
    )
    assert ok


# 8 -------------------------------------------------------------------------


def test_8_invariance_suite(report_criterion):
    rng = np.random.default_rng(8)
    perm_exact = True
    scale_err = 0.0
    for trial in range(50):
        c, n, z = int(rng.integers(2, 6)), int(rng.integers(1, 6)), int(rng.integers(2, 12))
        bank = init_bank(c, n, z, seed=trial).entries
        raw = rng.standard_normal((20, z))
        labels = rng.integers(c, size=20)
        labels[rng.random(20) < 0.1] = 255
        pix = ag.l2_normalize(Tensor(raw))
        perm = np.stack([rng.permutation(n) for _ in range(c)])
        shuffled = np.take_along_axis(bank, perm[..., None], axis=1)
        for fn in (loss_clcl, loss_cgcl):
            perm_exact &= fn(pix, labels, bank).item() == fn(pix, labels, shuffled).item()
            k = float(np.exp(rng.uniform(-5, 5)))
            scaled = fn(ag.l2_normalize(Tensor(raw * k)), labels, bank).item()
            scale_err = max(scale_err, abs(scaled - fn(pix, labels, bank).item()))
    bank = init_bank(6, 5, 12, seed=1)
    flat = bank.flat()
    mismatches = 0
    for _ in range(1000):
        q = rng.standard_normal(12)
        sims = [float(np.dot(flat[k], q)) for k in range(flat.shape[0])]
        k = int(np.argmax(sims))
        c, n, dist = nearest_distribution(bank, q)
        mismatches += (c, n) != divmod(k, 5) or abs(dist + sims[k]) > 1e-12
    ok = perm_exact and scale_err < 1e-6 and mismatches == 0
    report_criterion(
        "8 invariance suite",
        ok,
        f"permutation exact={perm_exact}, scaling err={scale_err:.1e} (<1e-6), "
        f"nearest vs scan mismatches={mismatches}/1000",
    )
    assert ok
