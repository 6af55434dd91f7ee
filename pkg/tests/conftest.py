import numpy as np
import pytest

from uaretain import data


def prepared(config: data.SynthConfig, split_seed: int = 1) -> data.Dataset:
    """Generated, split and standardized dataset, ready for training."""
    raw = data.gen_synthetic(config)
    sp = data.split(raw, split_seed)
    ds = data.preprocess(raw, sp.train)
    ds.split = sp
    return ds


@pytest.fixture
def small_dataset():
    return prepared(data.SynthConfig(n_records=60, T=4, F=3, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance(capsys):
    """Record and echo one verdict line per acceptance criterion."""

    def report(number: int, status: str, detail: str) -> None:
        line = f"criterion {number:2d}: {status:<7} {detail}"
        ACCEPTANCE_LINES[number] = line
        with capsys.disabled():
            print(f"\n[acceptance] {line}")

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
