import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbmsmp.bsde import (RegressionBasis, RegressionError, _Projector, orthogonality_diagnostics,
                         solve_first_adjoint, solve_second_adjoint, solve_two_driver_adjoint, tower_check)
from fbmsmp.fbm import TimeGrid, sample_paths
from fbmsmp.forward import classical_direct


def test_basis_feature_count():
    b = RegressionBasis(degree=2)
    z = np.linspace(0, 1, 7)
    assert b.raw_features(0.1, z, z, z, bh_pred=z).shape == (7, 9)
    assert RegressionBasis(degree=3, variables=("zeta",)).raw_features(0.1, z, z, z).shape == (7, 3)
    assert RegressionBasis(degree=0).raw_features(0.1, z, z, z, z).shape == (7, 0)
    with pytest.raises(ValueError):
        b.raw_features(0.1, z, z, z)
    extra = RegressionBasis(degree=1, variables=("zeta",), extra=lambda t, z, b, k: np.sin(z))
    assert extra.raw_features(0.1, z, z, z).shape == (7, 2)


@settings(max_examples=25, deadline=None)
@given(c=st.lists(st.floats(-3, 3), min_size=3, max_size=3), seed=st.integers(0, 1000))
def test_projector_reproduces_quadratics(c, seed):
    x = np.random.default_rng(seed).normal(size=400)
    raw = RegressionBasis(degree=2, variables=("zeta",)).raw_features(0, x, x, x)
    y = c[0] + c[1] * x + c[2] * x**2
    fitted, _ = _Projector(raw, 1e-12).fit(y)
    assert np.abs(fitted - y).max() < 1e-6 * (1 + np.abs(y).max())


def test_projector_handles_constant_columns():
    x = np.ones((50, 2))
    fitted, r2 = _Projector(x, 1e-8).fit(np.full(50, 3.0))
    assert np.all(fitted == 3.0) and r2 == 1.0


def test_projector_flags_non_finite():
    x = np.random.default_rng(0).normal(size=(20, 1))
    with pytest.raises(RegressionError):
        _Projector(x, 1e-8).fit(np.full(20, np.nan))


def test_constant_terminal_is_exact(make_setup):
    s = make_setup("constant_terminal", 0.0, m_paths=5000, seed=2)
    sol = solve_first_adjoint(s.problem, s.traj, s.fac, s.ens)
    print(f"max|p-1|={np.abs(sol.p - 1).max():.1e} max|K|={np.abs(sol.K).max():.1e} max|n|={np.abs(sol.n).max():.1e}")
    assert np.abs(sol.p - 1.0).max() < 1e-10
    assert np.abs(sol.K).max() < 1e-10 and np.abs(sol.n).max() < 1e-10


def test_second_order_lq_and_quadratic(make_setup):
    lq = make_setup("lq_basic", "optimal", m_paths=5000, seed=2)
    first = solve_first_adjoint(lq.problem, lq.traj, lq.fac, lq.ens)
    second = solve_second_adjoint(lq.problem, lq.traj, lq.fac, lq.ens, first)
    assert np.abs(second.P).max() < 1e-10
    qp = make_setup("quadratic_phi", 0.0, m_paths=5000, seed=2)
    first = solve_first_adjoint(qp.problem, qp.traj, qp.fac, qp.ens)
    second = solve_second_adjoint(qp.problem, qp.traj, qp.fac, qp.ens, first)
    assert np.abs(second.P - 1.0).max() < 1e-8
    # first order: p = zeta(T) (sigma = 0), a martingale with K = beta
    assert tower_check(first)["pass"]


def test_second_order_rejects_mismatched_paths(make_setup):
    a = make_setup("quadratic_phi", 0.0, m_paths=300, seed=2)
    b = make_setup("quadratic_phi", 0.0, m_paths=200, seed=2)
    first = solve_first_adjoint(b.problem, b.traj, b.fac, b.ens)
    with pytest.raises(ValueError):
        solve_second_adjoint(a.problem, a.traj, a.fac, a.ens, first)


def test_residual_is_orthogonal_to_brownian_increments(make_setup):
    s = make_setup("quadratic_phi", 0.0, n_steps=32, m_paths=20000, seed=5, delta=0.3, sigma=0.3)
    sol = solve_first_adjoint(s.problem, s.traj, s.fac, s.ens)
    d = orthogonality_diagnostics(sol, s.traj, s.fac, s.ens)
    print(f"max corr {d['max_abs_corr']:.4f} bound {d['corr_bound']:.4f} drift {d['martingale_drift']:.2e}")
    assert d["pass"] and d["martingale_pass"]
    # the joint K fit leaves only driver and ridge effects in the correlation
    assert d["max_abs_corr"] < 0.1 * d["corr_bound"]
    t = tower_check(sol)
    print(t)
    assert t["pass"]


def test_summary_and_aliases(make_setup):
    s = make_setup("lq_basic", 0.0, m_paths=500, seed=2)
    sol = solve_first_adjoint(s.problem, s.traj, s.fac, s.ens)
    assert sol.p is sol.value and sol.K is sol.z and sol.n is sol.residual
    summ = sol.summary()
    assert summ["order"] == 1 and len(summ["r2"]) == s.grid.n_steps


def test_two_driver_needs_classical_case(make_setup):
    s = make_setup("lq_basic", 0.0, m_paths=200, seed=2)
    with pytest.raises(ValueError):
        solve_two_driver_adjoint(s.problem, {}, s.ens)


def test_two_driver_matches_closed_form_on_geometric():
    # b = a x, beta = c x, Phi = x: p_T = 1 and a linear driver give a deterministic
    # p = (1 + a dt)^(steps left) on the grid, with K = K1 = 0
    from fbmsmp.problem import builtin_problem
    pr = builtin_problem("geometric")
    g = TimeGrid(1.0, 32)
    ens = sample_paths(0.5, g, 20000, 4)
    direct = classical_direct(pr, pr.policy("optimal"), ens)
    sol = solve_two_driver_adjoint(pr, direct, ens, RegressionBasis(2, variables=("x",)))
    exact = (1 + 0.1 * g.dt) ** (g.n_steps - np.arange(g.n_steps + 1))
    err = np.abs(sol.p.mean(axis=0) - exact).max()
    print(f"two-driver geometric max err {err:.2e}")
    assert err < 5e-3
    assert np.abs(sol.K).max() < 1e-10 and np.abs(sol.meta["K1"]).max() < 1e-10
