from __future__ import annotations

import numpy as np
import pytest

from sympacool import BathSpec, InitialState, ModelSpec, RunSpec


def ising_run(n: int = 3, *, j: float = 5.0, g: float = 1.0, g_sb: float = 1.15, gamma: float = 1.9,
              t_max: float = 20.0, n_grid: int = 81, **kwargs) -> RunSpec:
    model = ModelSpec("ising", n, j=j, g=g)
    bath = BathSpec.for_model(model, g_sb=g_sb * g, gamma=gamma * g)
    return RunSpec(model=model, bath=bath, t_max=t_max, n_grid=n_grid, **kwargs)


def heisenberg_run(n: int = 4, *, g_sb: float = 0.2, gamma: float = 0.6, t_max: float = 100.0,
                   n_grid: int = 101, **kwargs) -> RunSpec:
    model = ModelSpec("heisenberg", n, j=1.0)
    bath = BathSpec.for_model(model, g_sb=g_sb, gamma=gamma)
    kwargs.setdefault("initial_state", InitialState.neel())
    return RunSpec(model=model, bath=bath, t_max=t_max, n_grid=n_grid, **kwargs)


@pytest.fixture
def small_ising() -> RunSpec:
    return ising_run()


def random_density(dim: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    rho = a @ a.conj().T
    return rho / np.trace(rho).real


# --- acceptance report ------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line, flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
