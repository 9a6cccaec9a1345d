import numpy as np
import pytest

from memetector import autograd as ag


def central_difference(f, array: np.ndarray, index, step: float = 1e-5) -> float:
    """d f / d array[index] by central differences; ``array`` is perturbed in place and restored."""
    original = array[index]
    array[index] = original + step
    up = f()
    array[index] = original - step
    down = f()
    array[index] = original
    return (up - down) / (2 * step)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


@pytest.fixture
def f64():
    with ag.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
