import numpy as np
import pytest

from fbmsmp.fbm import TimeGrid, sample_paths
from fbmsmp.forward import (SimulationError, classical_direct, cost_per_path, evaluate_cost, moments, reconstruct_x,
                            simulate_variations, simulate_zeta)
from fbmsmp.girsanov import girsanov_factors
from fbmsmp.problem import SpikePerturbation, builtin_problem, constant_policy, spike


def test_moments_helper():
    m = moments(np.array([1.0, 3.0]))
    assert m["mean"] == 2.0 and m["second"] == 5.0 and m["m_paths"] == 2


@pytest.mark.parametrize("sigma,u", [(0.0, -1.0), (0.5, -1.0), (0.5, 0.4)])
def test_lq_cost_matches_closed_form(make_setup, sigma, u):
    # Phi linear and f = u^2/2: J = lam (x0 + u T) + u^2 T / 2 for every sigma
    s = make_setup("lq_basic", u, n_steps=32, m_paths=20000, seed=3, sigma=sigma)
    est = evaluate_cost(s.problem, s.traj, s.fac)
    exact = 1.0 * (1.0 + u) + 0.5 * u**2
    print(f"sigma={sigma} u={u} J={est.mean:.4f} +- {est.se:.4f} exact={exact:.4f}")
    assert abs(est.mean - exact) <= 3 * est.se + 1e-12


def test_optimal_control_is_cheapest_on_common_paths(make_setup):
    s = make_setup("lq_basic", "optimal", m_paths=20000, seed=3)
    base = cost_per_path(s.problem, s.traj, s.fac)
    for u in (-2.0, -0.5, 0.0):
        other = simulate_zeta(s.problem, s.problem.policy(u), s.ens, s.fac)
        d = cost_per_path(s.problem, other, s.fac) - base
        assert d.mean() > 3 * d.std() / np.sqrt(d.size)


def test_overflow_is_flagged():
    pr = builtin_problem("geometric", a=1e12, sigma=0.0)
    g = TimeGrid(1.0, 32)
    ens = sample_paths(0.5, g, 100, 1)
    with pytest.raises(SimulationError):
        simulate_zeta(pr, pr.policy("optimal"), ens, girsanov_factors(ens, 0.0))


def test_linear_problem_variation_is_exact(make_setup):
    # b = a x + u, beta constant, sigma = 0: zeta^eps - zeta = y1 and y2 = 0 exactly
    s = make_setup("linear_gaussian", 0.0, m_paths=500, seed=2)
    pert = SpikePerturbation(0.5, 0.1, constant_policy(1.0, s.problem.control_set))
    var = simulate_variations(s.problem, s.policy, spike(s.policy, pert, 1.0), s.ens, s.fac, s.traj)
    gap = np.abs(var.zeta_eps - var.zeta - var.y1).max()
    print(f"linear problem max |dzeta - y1| = {gap:.2e}")
    assert gap < 1e-12 and np.all(var.y2 == 0)
    assert np.all(var.y1[:, :13] == 0)


def test_variations_vanish_off_spike_and_without_change(make_setup):
    s = make_setup("quadratic_phi", 0.0, seed=4, delta=0.3, sigma=0.3)
    same = spike(s.policy, SpikePerturbation(0.5, 0.1, s.policy), 1.0)
    var = simulate_variations(s.problem, s.policy, same, s.ens, s.fac, s.traj)
    assert np.all(var.y1 == 0) and np.all(var.y2 == 0)
    assert np.array_equal(var.zeta_eps, s.traj.zeta)


def test_classical_direct_requires_half():
    pr = builtin_problem("geometric")
    ens = sample_paths(0.3, TimeGrid(1.0, 8), 10, 1)
    with pytest.raises(ValueError):
        classical_direct(pr, pr.policy("optimal"), ens)


def test_reconstruction_is_zeta_times_kappa(make_setup):
    s = make_setup("geometric", "optimal", m_paths=1000, seed=5, h=0.3)
    rec = reconstruct_x(s.traj, s.fac)
    assert np.allclose(rec["x"], s.traj.zeta * s.fac.kappa)
    assert rec["terminal"]["m_paths"] == 1000


def test_simulation_is_deterministic(make_setup):
    s = make_setup("lq_basic", 0.0, m_paths=300, seed=6)
    again = simulate_zeta(s.problem, s.policy, s.ens, s.fac)
    assert np.array_equal(again.zeta, s.traj.zeta)
