import os

import numpy as np
import pytest

from nimap.codec import Codec

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def random_codec():
    return Codec.initialize(seed=7)


@pytest.fixture(scope="session")
def training_run():
    """The default trainer, run once per session (a few minutes on one core)."""
    from nimap.training import TrainerConfig, train_codec
    return train_codec(TrainerConfig())


@pytest.fixture(scope="session")
def trained_codec(request):
    # NIMAP_CODEC points at saved weights and skips the training run
    path = os.environ.get("NIMAP_CODEC")
    if path:
        from nimap.weights_io import load_codec
        return load_codec(path)
    return request.getfixturevalue("training_run").codec


@pytest.fixture(scope="session")
def room_sequence():
    from nimap.synthetic import make_sequence
    return make_sequence(20, seed=2)


@pytest.fixture
def criterion(capsys):
    """Record and print one pass/fail line for an acceptance criterion."""
    def record(label, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
