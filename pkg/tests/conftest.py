import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from panelnn.panel_data import PanelDataset

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile("default")


def make_panel(n_units=6, n_times=12, p_x=1, p_z=2, seed=0, unbalanced=False) -> PanelDataset:
    """Small random panel with a smooth nonlinear signal and unit intercepts."""
    rng = np.random.default_rng(seed)
    rows = [(i, t) for i in range(1, n_units + 1) for t in range(1, n_times + 1)]
    if unbalanced:
        rows = [r for r in rows if rng.random() > 0.2 or r[1] <= 2]
    unit = np.array([r[0] for r in rows])
    time = np.array([r[1] for r in rows])
    n = len(rows)
    X = rng.normal(size=(n, p_x)) + 0.3 * unit[:, None]
    Z = rng.normal(size=(n, p_z))
    alpha = 2.0 * unit
    y = alpha + X @ np.ones(p_x) + np.sin(Z).sum(axis=1) + 0.1 * rng.normal(size=n)
    return PanelDataset(unit, time, y, X, Z)


@pytest.fixture
def panel():
    return make_panel()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> bool:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
