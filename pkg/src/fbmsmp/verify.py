"""Checks of the maximum principle: variational inequality, duality, spike scaling, H = 1/2 reduction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bsde import (AdjointSolution, RegressionBasis, solve_first_adjoint, solve_second_adjoint,
                   solve_two_driver_adjoint, tower_check)
from .fbm import PathEnsemble, TimeGrid, sample_paths
from .forward import TrajectorySet, classical_direct, simulate_variations, simulate_zeta
from .girsanov import GirsanovFactors, girsanov_factors
from .problem import ControlPolicy, ControlProblem, SpikePerturbation, spike

__all__ = [
    "VariationalReport",
    "ScalingReport",
    "theta_pathwise",
    "check_variational_inequality",
    "duality_check",
    "scaling_experiment",
    "classical_reduction_check",
    "fit_slope",
]


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, float)
    if x.size < 2:
        return float(x.mean()) if x.size else 0.0, 0.0
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))


def _adjoint_rows(sol: AdjointSolution, valid: np.ndarray) -> np.ndarray:
    # rows of an adjoint solution that are still valid under ``valid``
    if not np.all(valid <= sol.valid):
        raise ValueError("trajectory has valid paths the adjoint solution does not cover")
    return valid[sol.valid]


# ---------------------------------------------------------------------------
# Variational inequality
# ---------------------------------------------------------------------------

@dataclass
class VariationalReport:
    """Mean Theta per (node, candidate), with standard errors.

    ``theta_current`` is Theta evaluated at the control in use, which is zero
    by construction; its largest absolute value is kept as a sanity number.
    """

    taus: np.ndarray
    candidates: np.ndarray
    theta: np.ndarray
    se: np.ndarray
    tol: np.ndarray
    theta_current_max: float
    n_se: float
    tol_abs: float

    @property
    def min_theta(self) -> float:
        return float(self.theta.min())

    @property
    def argmin(self) -> tuple[float, float]:
        i, j = np.unravel_index(np.argmin(self.theta), self.theta.shape)
        return float(self.taus[i]), float(self.candidates[j])

    @property
    def violations(self) -> np.ndarray:
        """Boolean (node, candidate) mask of Theta < -tol."""
        return self.theta < -self.tol

    @property
    def passed(self) -> bool:
        return bool(not self.violations.any() and self.theta_current_max == 0.0)

    def significant_negative(self, candidate: float) -> bool:
        """Theta(candidate) < 0 beyond n_se standard errors at some node."""
        j = int(np.argmin(np.abs(self.candidates - candidate)))
        return bool(np.any(self.theta[:, j] + self.n_se * self.se[:, j] < 0))

    def rows(self) -> list[dict]:
        return [{"tau": float(t), "candidate": float(c), "theta": float(self.theta[i, j]),
                 "se": float(self.se[i, j])}
                for i, t in enumerate(self.taus) for j, c in enumerate(self.candidates)]

    def to_dict(self) -> dict:
        tau, cand = self.argmin
        return {
            "min_theta": self.min_theta,
            "argmin": {"tau": tau, "candidate": cand},
            "theta_current_max": self.theta_current_max,
            "n_violations": int(self.violations.sum()),
            "n_se": self.n_se,
            "tol_abs": self.tol_abs,
            "pass": self.passed,
        }


def theta_pathwise(problem: ControlProblem, i: int, t: float, zeta, v, vc, ks, p, K, P) -> np.ndarray:
    """H(t, y, v_c, p, K) - H(t, y, v, p, K) + (beta(v_c) - beta(v))^2 P / (2 k^2), k = kappa_t(T_t)."""
    c = problem.coeffs
    xk = zeta * ks
    vc = np.broadcast_to(np.asarray(vc, float), np.shape(zeta))

    def ham(u):
        return c.f(t, xk, u) + p * c.b(t, xk, u) + K * c.beta(t, xk, u)

    dbeta = c.beta(t, xk, vc) - c.beta(t, xk, v)
    return (ham(vc) - ham(v)) / ks + 0.5 * dbeta**2 * P / ks**2


def check_variational_inequality(problem: ControlProblem, traj: TrajectorySet, fac: GirsanovFactors,
                                 ens: PathEnsemble, first: AdjointSolution, second: AdjointSolution,
                                 candidates, tau_indices=None, n_se: float = 3.0,
                                 tol_abs: float = 1e-3) -> VariationalReport:
    """Average Theta over paths at each interior node and candidate; pass iff Theta >= -(n_se SE + tol_abs)."""
    cands = np.asarray(candidates, float).ravel()
    if cands.size == 0:
        raise ValueError("candidate list is empty")
    if not problem.control_set.contains(cands):
        raise ValueError("candidates must lie in the control set")
    n = ens.grid.n_steps
    idx = np.arange(1, n) if tau_indices is None else np.asarray(tau_indices, int)
    if np.any(idx < 1) or np.any(idx > n - 1):
        raise ValueError("tau must be an interior grid node")
    rows = _adjoint_rows(first, traj.valid)
    v = traj.valid
    zeta, ctrl, ks = traj.zeta[v], traj.controls[v], fac.kappa_shifted[v]
    p, K, P = first.p[rows], first.K[rows], second.P[rows]
    t = ens.grid.nodes
    theta = np.empty((idx.size, cands.size))
    se = np.empty_like(theta)
    current = 0.0
    for a, i in enumerate(idx):
        args = (zeta[:, i], ctrl[:, i])
        for b, vc in enumerate(cands):
            th = theta_pathwise(problem, i, t[i], *args, vc, ks[:, i], p[:, i], K[:, i], P[:, i])
            theta[a, b], se[a, b] = _mean_se(th)
        th0 = theta_pathwise(problem, i, t[i], *args, ctrl[:, i], ks[:, i], p[:, i], K[:, i], P[:, i])
        current = max(current, float(np.max(np.abs(th0))))
    return VariationalReport(t[idx], cands, theta, se, n_se * se + tol_abs, current, n_se, tol_abs)


# ---------------------------------------------------------------------------
# Duality identities
# ---------------------------------------------------------------------------

def _identity(lhs, rhs, n_se) -> dict:
    l, se_l = _mean_se(lhs)
    r, se_r = _mean_se(rhs)
    _, se_d = _mean_se(lhs - rhs)
    gap = l - r
    return {"lhs": l, "rhs": r, "gap": gap, "se_lhs": se_l, "se_rhs": se_r, "se": se_d,
            "pass": bool(abs(gap) <= n_se * se_d + 1e-12 * max(1.0, abs(l)))}


def duality_check(problem: ControlProblem, var: TrajectorySet, fac: GirsanovFactors, ens: PathEnsemble,
                  first: AdjointSolution, second: AdjointSolution, n_se: float = 3.0) -> dict:
    """Both sides of the first- and second-order duality relations on common paths.

    ``r1``: E[sum f_x y1 dt + Phi_x y1(T)] = E[sum (p phi + K psi) dt].
    ``r2``: the same functional of y2 against the b_xx, beta_xx and
    (b_x(v^eps) - b_x(v)) y1 source terms of the y2 equation.
    ``L``: E[sum H_xx Y dt + Phi_xx kappa Y(T)] = E[sum (P Xi + Q Psi) dt] for Y = y1^2.
    The Xi used for the pass flag carries the Euler term (drift of y1)^2 dt,
    which vanishes as dt -> 0; ``rhs_continuum`` is the value without it.

    p and P enter at the right end of each step, where the discrete
    identities are exact; K and Q are step values.
    """
    c = problem.coeffs
    rows = _adjoint_rows(first, var.valid)
    v = var.valid
    dt, t = ens.grid.dt, ens.grid.nodes
    n = ens.grid.n_steps
    zeta, u, ue = var.zeta[v], var.controls[v], var.controls_eps[v]
    y1, y2 = var.y1[v], var.y2[v]
    ks = fac.kappa_shifted[v]
    dw = ens.dw[v]
    p, K, P, Q = first.p[rows], first.K[rows], second.P[rows], second.Q[rows]
    m = zeta.shape[0]
    x = zeta * ks

    l1 = c.phi_x(x[:, -1]) * y1[:, -1]
    l2 = c.phi_x(x[:, -1]) * y2[:, -1]
    lL = c.phi_xx(x[:, -1]) * ks[:, -1] * y1[:, -1] ** 2
    r1, r2, rL, rL_cont = (np.zeros(m) for _ in range(4))
    for i in range(n):
        ti, xi, vi, vei, k = t[i], x[:, i], u[:, i], ue[:, i], ks[:, i]
        a1, a2 = y1[:, i], y2[:, i]
        bx, betax = c.b_x(ti, xi, vi), c.beta_x(ti, xi, vi)
        fx = c.f_x(ti, xi, vi)
        phi = (c.b(ti, xi, vei) - c.b(ti, xi, vi)) / k
        psi = (c.beta(ti, xi, vei) - c.beta(ti, xi, vi)) / k
        hxx = (c.f_xx(ti, xi, vi) + p[:, i] * c.b_xx(ti, xi, vi) + K[:, i] * c.beta_xx(ti, xi, vi)) * k
        l1 += fx * a1 * dt
        l2 += fx * a2 * dt
        lL += hxx * a1**2 * dt
        r1 += (p[:, i + 1] * phi + K[:, i] * psi) * dt
        s2 = 0.5 * k * c.b_xx(ti, xi, vei) * a1**2 + (c.b_x(ti, xi, vei) - bx) * a1
        q2 = 0.5 * k * c.beta_xx(ti, xi, vei) * a1**2 + (c.beta_x(ti, xi, vei) - betax) * a1
        r2 += (p[:, i + 1] * s2 + K[:, i] * q2) * dt
        xi_eps = 2 * a1 * (phi + betax * psi) + psi**2
        psi_eps = 2 * a1 * psi
        euler = (bx * a1 + phi) ** 2 * dt
        rL_cont += (P[:, i + 1] * xi_eps + Q[:, i] * psi_eps) * dt
        rL += (P[:, i + 1] * (xi_eps + euler) + Q[:, i] * psi_eps) * dt
    out = {"r1": _identity(l1, r1, n_se), "r2": _identity(l2, r2, n_se), "L": _identity(lL, rL, n_se)}
    out["L"]["rhs_continuum"] = float(rL_cont.mean())
    out["pass"] = bool(out["r1"]["pass"] and out["r2"]["pass"] and out["L"]["pass"])
    return out


# ---------------------------------------------------------------------------
# Spike scaling
# ---------------------------------------------------------------------------

def fit_slope(eps, values) -> float:
    """Least-squares slope of log(values) against log(eps)."""
    return float(np.polyfit(np.log(eps), np.log(values), 1)[0])


@dataclass
class ScalingReport:
    epsilons: np.ndarray
    p_moment: float
    moments: dict
    slopes: dict
    slope_ci: dict
    remainder_ratio: np.ndarray
    remainder_decreasing: bool
    degenerate: bool
    ranges: dict = field(default_factory=dict)

    @property
    def slope_pass(self) -> dict:
        out = {}
        for k, (lo, hi) in self.ranges.items():
            s = self.slopes.get(k, np.nan)
            out[k] = bool(np.isfinite(s) and lo <= s <= hi)
        return out

    @property
    def passed(self) -> bool:
        return bool(not self.degenerate and all(self.slope_pass.values()) and self.remainder_decreasing)

    def rows(self) -> list[dict]:
        out = []
        for name, vals in self.moments.items():
            s = self.slopes.get(name, np.nan)
            if np.isfinite(s):
                logc = np.mean(np.log(vals)) - s * np.mean(np.log(self.epsilons))
                fitted = np.exp(logc) * self.epsilons**s
            else:
                fitted = np.full_like(vals, np.nan)
            out.extend({"epsilon": float(e), "moment": name, "value": float(vv), "fitted": float(f)}
                       for e, vv, f in zip(self.epsilons, vals, fitted))
        return out

    def to_dict(self) -> dict:
        return {
            "epsilons": self.epsilons.tolist(),
            "p_moment": self.p_moment,
            "moments": {k: np.asarray(v).tolist() for k, v in self.moments.items()},
            "slopes": {k: float(v) for k, v in self.slopes.items()},
            "slope_ci": {k: [float(a), float(b)] for k, (a, b) in self.slope_ci.items()},
            "remainder_ratio": self.remainder_ratio.tolist(),
            "remainder_decreasing": self.remainder_decreasing,
            "degenerate": self.degenerate,
            "slope_pass": self.slope_pass,
            "pass": self.passed,
        }


def scaling_experiment(problem: ControlProblem, policy: ControlPolicy, alt: ControlPolicy, tau: float,
                       ladder, ens: PathEnsemble, fac: GirsanovFactors, p_moment: float = 2.0,
                       n_boot: int = 200, seed: int = 0,
                       ranges: dict | None = None) -> ScalingReport:
    """Moments of y1, y2 and of the remainder y^eps - y - y3 along a decreasing epsilon ladder.

    All rungs reuse ``ens`` (common random numbers). Slopes are OLS fits on the
    log-log points; confidence intervals are 95% percentile intervals from a
    path bootstrap that resamples all rungs jointly.
    """
    eps = np.asarray(ladder, float)
    if eps.size < 4:
        raise ValueError("scaling fits need at least 4 ladder points")
    if np.any(np.diff(eps) >= 0):
        raise ValueError("epsilon ladder must be strictly decreasing")
    ranges = {"y1": (0.8, 1.4), "y2": (1.7, 2.6)} if ranges is None else ranges
    base = simulate_zeta(problem, policy, ens, fac)
    cols = {"y1": [], "y2": [], "remainder": []}
    valid = base.valid.copy()
    for e in eps:
        pert = SpikePerturbation(tau, float(e), alt)
        var = simulate_variations(problem, policy, spike(policy, pert, problem.horizon), ens, fac, base)
        valid &= var.valid
        rem = var.zeta_eps - var.zeta - var.y3
        cols["y1"].append(np.max(np.abs(var.y1), axis=1) ** p_moment)
        cols["y2"].append(np.max(np.abs(var.y2), axis=1) ** p_moment)
        cols["remainder"].append(np.max(np.abs(rem), axis=1) ** p_moment)
    per_path = {k: np.column_stack(v)[valid] for k, v in cols.items()}
    moments = {k: a.mean(axis=0) for k, a in per_path.items()}
    ratio = moments["remainder"] / eps**p_moment
    degenerate = bool(np.all(moments["y1"] == 0))
    slopes, ci = {}, {}
    rng = np.random.default_rng(seed)
    m = per_path["y1"].shape[0]
    boot_idx = [rng.integers(0, m, m) for _ in range(n_boot)]
    for k in ("y1", "y2"):
        if np.any(moments[k] <= 0):
            slopes[k], ci[k] = np.nan, (np.nan, np.nan)
            continue
        slopes[k] = fit_slope(eps, moments[k])
        bs = [fit_slope(eps, per_path[k][ix].mean(axis=0)) for ix in boot_idx]
        ci[k] = tuple(np.percentile(bs, [2.5, 97.5]))
    decreasing = bool(not degenerate and np.all(np.diff(ratio) < 0))
    return ScalingReport(eps, p_moment, moments, slopes, ci, ratio, decreasing, degenerate, dict(ranges))


# ---------------------------------------------------------------------------
# H = 1/2 reduction
# ---------------------------------------------------------------------------

def _reduction_at(problem, policy, grid, m_paths, seed, degree, first_path=0):
    ens = sample_paths(problem.hurst, grid, m_paths, seed, first_path)
    fac = girsanov_factors(ens, problem.sigma)
    traj = simulate_zeta(problem, policy, ens, fac)
    sol_a = solve_first_adjoint(problem, traj, fac, ens, RegressionBasis(degree, ("zeta", "bh", "x")))
    direct = classical_direct(problem, policy, ens)
    sol_b = solve_two_driver_adjoint(problem, direct, ens, RegressionBasis(degree, ("zeta", "bh")))
    both = traj.valid & direct["valid"]
    ea = (sol_a.n[both[traj.valid]] ** 2).sum(axis=1)
    rb = both[direct["valid"]]
    k1 = sol_b.meta["K1"][rb]
    kap = fac.kappa[both][:, :-1]
    # K_1 energy plus route (b)'s own regression residual, which route (a) also carries
    ek1 = (k1**2 * kap).sum(axis=1) * grid.dt
    eb = ek1 + (sol_b.n[rb] ** 2 * kap).sum(axis=1)
    ta, tb = tower_check(sol_a), tower_check(sol_b)
    e_a, se_ea = _mean_se(ea)
    e_b, se_eb = _mean_se(eb)
    _, se_gap = _mean_se(ea - eb)
    return {
        "n_steps": grid.n_steps,
        "p0_transformed": ta["value0"], "se_transformed": ta["se"],
        "p0_classical": tb["value0"], "se_classical": tb["se"],
        "energy_residual": e_a, "se_energy_residual": se_ea,
        "energy_k1": e_b, "se_energy_k1": se_eb, "energy_k1_dt": float(ek1.mean()),
        "energy_gap": e_a - e_b, "se_energy_gap": se_gap,
        "max_abs_p_diff": float(np.max(np.abs(sol_a.p[both[traj.valid]] - sol_b.p[both[direct["valid"]]]))),
    }


def classical_reduction_check(problem: ControlProblem, policy: ControlPolicy, grid: TimeGrid,
                              m_paths: int, seed: int, degree: int = 2, n_se: float = 3.0,
                              replicates: int = 1) -> dict:
    """Compare the transformed adjoint with the two-driver adjoint at H = 1/2.

    p(0) is compared at ``grid``. The residual energy E[sum n^2] of the
    transformed route is compared with E[sum (K_1^2 dt + n_b^2) kappa] of the
    direct route. The kappa weight moves K_1(s, T_s)^2 back to K_1(s)^2; n_b
    is route (b)'s regression residual, which is pure regression noise and
    makes the two energies coincide exactly when sigma = 0. Both energies
    carry O(dt) Euler bias of different size, so the energy gap is also
    computed on a grid with twice the steps and extrapolated to dt = 0
    (2 gap(dt/2) - gap(dt)); the pass flag uses the extrapolated gap.

    Per-path standard errors miss the error of the fitted regression
    coefficients, which all paths share. With ``replicates`` >= 2 the whole
    pipeline is rerun on disjoint blocks of ``m_paths`` path ids and the
    standard errors come from the spread of the replicate statistics. The
    p(0) tolerance combines the standard errors of the two estimates; the
    paired standard error of their difference, which is much smaller because
    both routes share paths, is reported as ``p0_paired_se``.
    """
    if not problem.hurst.is_classical:
        raise ValueError("classical reduction needs H = 1/2")
    if problem.sigma.kind != "constant":
        raise ValueError("classical reduction needs constant sigma")
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    fine_grid = TimeGrid(grid.horizon, 2 * grid.n_steps)
    has_fbm = problem.sigma.value != 0.0
    coarse, fine = [], []
    for r in range(replicates):
        first = r * m_paths
        coarse.append(_reduction_at(problem, policy, grid, m_paths, seed, degree, first))
        if has_fbm:
            fine.append(_reduction_at(problem, policy, fine_grid, m_paths, seed, degree, first))
    pa = np.array([c["p0_transformed"] for c in coarse])
    pb = np.array([c["p0_classical"] for c in coarse])
    pdiff = pa - pb
    if has_fbm:
        gaps = np.array([2 * f["energy_gap"] - c["energy_gap"] for c, f in zip(coarse, fine)])
    else:
        gaps = np.array([c["energy_gap"] for c in coarse])
    if replicates >= 2:
        root = np.sqrt(replicates)
        p_se = float(np.hypot(pa.std(ddof=1), pb.std(ddof=1)) / root)
        paired_se = float(pdiff.std(ddof=1) / root)
        g_se = float(gaps.std(ddof=1) / root)
        method = "replicates"
    else:
        c = coarse[0]
        p_se = float(np.hypot(c["se_transformed"], c["se_classical"]))
        paired_se = float("nan")
        g_se = float(np.hypot(2 * fine[0]["se_energy_gap"], c["se_energy_gap"])) if has_fbm else c["se_energy_gap"]
        method = "per-path"
    diff, gap = float(pdiff.mean()), float(gaps.mean())
    scale = max(1.0, abs(coarse[0]["p0_classical"]))
    out = {
        "coarse": coarse, "fine": fine, "se_method": method, "replicates": replicates,
        "p0_transformed": float(np.mean([c["p0_transformed"] for c in coarse])),
        "p0_classical": float(np.mean([c["p0_classical"] for c in coarse])),
        "p0_diff": diff, "p0_se": p_se, "p0_paired_se": paired_se,
        # sigma = 0: same regressions on the same paths, separated only by ridge-level shrinkage
        "p0_pass": bool(abs(diff) <= n_se * p_se + 1e-6 * scale),
        "energy_residual": float(np.mean([c["energy_residual"] for c in coarse])),
        "energy_k1": float(np.mean([c["energy_k1"] for c in coarse])),
        "energy_gap_coarse": float(np.mean([c["energy_gap"] for c in coarse])),
        "energy_gap_extrapolated": gap, "energy_se": g_se,
    }
    if has_fbm:
        out["energy_gap_fine"] = float(np.mean([f["energy_gap"] for f in fine]))
        out["energy_pass"] = bool(abs(gap) <= n_se * g_se)
    else:
        # identical regressions on identical paths: only rounding separates the routes
        out["energy_pass"] = bool(abs(gap) <= 1e-6 * max(1.0, out["energy_residual"]))
    out["pass"] = bool(out["p0_pass"] and out["energy_pass"])
    return out
