import time
from types import SimpleNamespace

import numpy as np
import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def record_criterion():
    def record(number: int, title: str, passed: bool, detail: str = ""):
        line = f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {title}"
        _ACCEPTANCE.append(line + (f" :: {detail}" if detail else ""))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """Full desk-scale training through the CLI: 500 samples, 20 epochs, scale 4."""
    from ncup.cli import main

    out = tmp_path_factory.mktemp("trained")
    start = time.perf_counter()
    assert main(["train", "--out", str(out), "--seed", "0"]) == 0
    return SimpleNamespace(out=out, seconds=time.perf_counter() - start)
