import numpy as np
import pytest

from fbmsmp.fbm import TimeGrid, sample_paths
from fbmsmp.forward import simulate_zeta
from fbmsmp.girsanov import girsanov_factors
from fbmsmp.problem import builtin_problem

ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line, print it, then assert."""

    def check(number, name, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


class Setup:
    """Problem, grid, paths, Girsanov factors and a base trajectory."""

    def __init__(self, name, policy, n_steps, m_paths, seed, **params):
        self.problem = builtin_problem(name, **params)
        self.grid = TimeGrid(self.problem.horizon, n_steps)
        self.ens = sample_paths(self.problem.hurst, self.grid, m_paths, seed)
        self.fac = girsanov_factors(self.ens, self.problem.sigma)
        self.policy = self.problem.policy(policy)
        self.traj = simulate_zeta(self.problem, self.policy, self.ens, self.fac)


@pytest.fixture(scope="session")
def make_setup():
    cache = {}

    def build(name, policy, n_steps=32, m_paths=4000, seed=1, **params):
        key = (name, str(policy), n_steps, m_paths, seed, tuple(sorted(params.items())))
        if key not in cache:
            cache[key] = Setup(name, policy, n_steps, m_paths, seed, **params)
        return cache[key]

    return build


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
