from pathlib import Path

import numpy as np
import pytest

from deskllm.data import PackedDataset, pack

FIXTURES = Path(__file__).parent / "fixtures"


def successor_cycle(period: int, vocab: int, seed: int = 0, reserved: int = 4) -> np.ndarray:
    """``period`` distinct token ids in a fixed random order; each id has exactly one successor."""
    rng = np.random.default_rng(seed)
    return rng.permutation(np.arange(reserved, vocab))[:period]


def cycle_dataset(n_sequences: int, sequence_length: int, period: int, vocab: int, seed: int = 0) -> PackedDataset:
    cycle = successor_cycle(period, vocab, seed)
    reps = -(-n_sequences * sequence_length // period)
    return pack(np.tile(cycle, reps), sequence_length)


@pytest.fixture
def fake_clock():
    """A clock that advances one second per reading."""
    state = {"t": 0.0}

    def clock():
        state["t"] += 1.0
        return state["t"]

    return clock


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


# -- acceptance summary --

_criteria: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.failed:
        _criteria[report.nodeid] = "FAIL"
    elif report.when == "call" and report.passed:
        _criteria.setdefault(report.nodeid, "PASS")
    elif report.skipped:
        _criteria.setdefault(report.nodeid, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_criteria):
        name = nodeid.split("::test_criterion_", 1)[1]
        number, _, label = name.partition("_")
        terminalreporter.write_line(f"criterion {int(number):>2} {label.replace('_', ' ')}: {_criteria[nodeid]}")
