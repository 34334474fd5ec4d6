import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from adarec import data  # noqa: E402
from adarec.teacher import TeacherConfig, train_teacher  # noqa: E402


def chain_scene(n_users=50, n_items=30, length=12, seed=0, order=1):
    """Deterministic chain: every next item is a function of the previous ``order`` items."""
    log = data.markov_scene(n_users=n_users, n_items=n_items, length=length, order=order, noise=0.0, seed=seed)
    seqs, vocab = data.build_sequences(log, length)
    return seqs.items, len(vocab)


def small_teacher(train, n_items, epochs=40, seed=0, d=32):
    cfg = TeacherConfig(flavor="nextitnet", d=d, repeats=1, epochs=epochs, batch_size=16, seed=seed)
    return train_teacher(train, cfg, n_items)


@pytest.fixture(scope="session")
def chain():
    return chain_scene()


@pytest.fixture(scope="session")
def chain_teacher(chain):
    train, n_items = chain
    model, _ = small_teacher(train, n_items)
    return model


@pytest.fixture(scope="session")
def chain2():
    """Order-2 chain: a single embedding cannot predict the next item, convolutions can."""
    return chain_scene(n_users=60, order=2)


@pytest.fixture(scope="session")
def chain2_teacher(chain2):
    model, _ = small_teacher(*chain2)
    return model


ACCEPTANCE_LINES: list = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} [{number:>2}] {title}: {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
