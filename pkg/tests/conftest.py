import sys

import numpy as np
import pytest

from mctueg.config import RunConfig
from mctueg.tasksuite import ImageDims, make_suite


@pytest.fixture(scope="session")
def small_suite():
    tasks, split = make_suite(seed=3, num_seen=6, num_unseen=4, dims=ImageDims(), n_train=48, n_test=24)
    return split


@pytest.fixture(scope="session")
def tiny_config():
    return RunConfig(
        num_seen=3, num_unseen=1, n_train=32, n_test=16, cycles=2, gen_epochs_per_cycle=1,
        alpha=1.0, beta=1.0, eta=1.0, surr_lr=0.1, batch_size=16, gen_hidden=8,
        surr_hidden=8, surr_channels=4, target_hidden=8, target_channels=4, target_epochs=1,
        eval_seeds=(0,), lanczos_steps=4, lanczos_probes=2, power_iters=5, spectrum_batch=8,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
