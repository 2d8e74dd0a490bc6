import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to array ``x`` (modified in place, then restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Elementwise relative error; components far below the gradient's scale are compared to that scale."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    floor = 1e-3 * max(np.max(np.abs(numeric)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one line each at the end of the run
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def report():
    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = f"AC{number:<2d} {'PASS' if passed else 'FAIL'}  {detail}"
        print(ACCEPTANCE[number])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
