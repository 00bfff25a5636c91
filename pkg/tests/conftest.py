import dataclasses

import pytest

from mdrl import trainer
from mdrl.config import TrainConfig, with_seed
from mdrl.data import generate_splits

# 20 epochs of the default 200-image training set = 500 steps at batch size 8.
REFERENCE_EPOCHS = 20


@pytest.fixture(scope="session")
def default_splits():
    return generate_splits(TrainConfig().data)


@pytest.fixture(scope="session")
def reference_runs(default_splits):
    """Default-config training runs for seeds 0, 1, 2: ``{seed: (state, record)}``."""
    train, _ = default_splits
    runs = {}
    for seed in (0, 1, 2):
        cfg = with_seed(TrainConfig(), seed)
        cfg = dataclasses.replace(cfg, optim=dataclasses.replace(cfg.optim, epochs=REFERENCE_EPOCHS))
        runs[seed] = trainer.fit(cfg, train, None, eval_every=0)
    return runs


ACCEPTANCE_LINES = []


@pytest.fixture
def report_criterion():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def report(name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
