import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbmsmp.bsde import solve_first_adjoint, solve_second_adjoint
from fbmsmp.fbm import TimeGrid
from fbmsmp.forward import simulate_variations
from fbmsmp.problem import SpikePerturbation, builtin_problem, constant_policy, spike
from fbmsmp.verify import (check_variational_inequality, classical_reduction_check, duality_check, fit_slope,
                           scaling_experiment, theta_pathwise)


@pytest.fixture(scope="module")
def lq_zero(make_setup):
    s = make_setup("lq_basic", 0.0, n_steps=32, m_paths=5000, seed=9)
    first = solve_first_adjoint(s.problem, s.traj, s.fac, s.ens)
    second = solve_second_adjoint(s.problem, s.traj, s.fac, s.ens, first)
    return s, first, second


@settings(max_examples=30, deadline=None)
@given(slope=st.floats(-3, 3), c=st.floats(0.1, 10))
def test_fit_slope_recovers_power_laws(slope, c):
    eps = np.array([0.2, 0.1, 0.05, 0.025])
    assert fit_slope(eps, c * eps**slope) == pytest.approx(slope, abs=1e-9)


def test_theta_vanishes_at_current_control():
    pr = builtin_problem("quadratic_phi", delta=0.3)
    z = np.linspace(-1, 1, 5)
    th = theta_pathwise(pr, 3, 0.3, z, np.full(5, 0.2), 0.2, np.ones(5), 0.7, -0.4, 1.3)
    assert np.all(th == 0.0)


def test_theta_by_hand():
    # quadratic_phi: H = u^2/2 + p u + K (beta0 + gamma u + delta sin x), k = 1
    pr = builtin_problem("quadratic_phi", delta=0.0)
    p, K, P, v, vc = 0.5, 0.2, 1.0, 0.0, 1.0
    th = theta_pathwise(pr, 0, 0.0, np.zeros(1), np.full(1, v), vc, np.ones(1), p, K, P)[0]
    expected = (0.5 * vc**2 + p * vc + K * 0.5 * vc) + 0.5 * (0.5 * vc) ** 2 * P
    assert th == pytest.approx(expected)


def test_vi_input_errors(lq_zero):
    s, first, second = lq_zero
    with pytest.raises(ValueError):
        check_variational_inequality(s.problem, s.traj, s.fac, s.ens, first, second, [])
    with pytest.raises(ValueError):
        check_variational_inequality(s.problem, s.traj, s.fac, s.ens, first, second, [10.0])
    with pytest.raises(ValueError):
        check_variational_inequality(s.problem, s.traj, s.fac, s.ens, first, second, [0.0], tau_indices=[0])


def test_vi_rejects_non_optimal_control(lq_zero):
    s, first, second = lq_zero
    rep = check_variational_inequality(s.problem, s.traj, s.fac, s.ens, first, second,
                                       s.problem.control_set.candidate_grid(13))
    print(rep.to_dict())
    assert not rep.passed and rep.significant_negative(-1.0)
    assert rep.theta_current_max == 0.0
    rows = rep.rows()
    assert set(rows[0]) == {"tau", "candidate", "theta", "se"} and len(rows) == rep.theta.size


def test_duality_on_zero_problem_is_trivial(make_setup):
    s = make_setup("zero", "optimal", n_steps=16, m_paths=200, seed=1)
    first = solve_first_adjoint(s.problem, s.traj, s.fac, s.ens)
    second = solve_second_adjoint(s.problem, s.traj, s.fac, s.ens, first)
    pert = SpikePerturbation(0.5, 0.1, s.policy)
    var = simulate_variations(s.problem, s.policy, spike(s.policy, pert, 1.0), s.ens, s.fac, s.traj)
    d = duality_check(s.problem, var, s.fac, s.ens, first, second)
    assert d["pass"] and all(d[k]["lhs"] == 0 and d[k]["rhs"] == 0 for k in ("r1", "r2", "L"))


def test_scaling_input_errors(make_setup):
    s = make_setup("lq_basic", "optimal", n_steps=32, m_paths=100, seed=1)
    alt = constant_policy(-0.5, s.problem.control_set)
    with pytest.raises(ValueError):
        scaling_experiment(s.problem, s.policy, alt, 0.5, [0.2, 0.1, 0.05], s.ens, s.fac)
    with pytest.raises(ValueError):
        scaling_experiment(s.problem, s.policy, alt, 0.5, [0.2, 0.1, 0.1, 0.05], s.ens, s.fac)


def test_scaling_degenerate_when_spike_changes_nothing(make_setup):
    s = make_setup("lq_basic", "optimal", n_steps=32, m_paths=200, seed=1)
    rep = scaling_experiment(s.problem, s.policy, s.policy, 0.5, [0.2, 0.1, 0.05, 0.025], s.ens, s.fac, n_boot=10)
    assert rep.degenerate and not rep.passed


def test_classical_reduction_input_errors():
    pr = builtin_problem("lq_basic")
    with pytest.raises(ValueError):
        classical_reduction_check(pr, pr.policy(0.0), TimeGrid(1.0, 8), 100, 1)
    half = builtin_problem("classical_h_half")
    with pytest.raises(ValueError):
        classical_reduction_check(half, half.policy(0.0), TimeGrid(1.0, 8), 100, 1, replicates=0)


def test_classical_reduction_identity_without_fbm_noise():
    # sigma = 0: the two routes solve the same equation, so p0 and the energies coincide
    pr = builtin_problem("classical_h_half", sigma=0.0)
    r = classical_reduction_check(pr, pr.policy(0.5), TimeGrid(1.0, 16), 4000, 2)
    print({k: r[k] for k in ("p0_transformed", "p0_classical", "energy_residual", "energy_k1")})
    assert r["pass"]
    assert r["p0_transformed"] == pytest.approx(r["p0_classical"], rel=1e-6)
