"""Euler schemes for the transformed state equation, its variations and the cost.

The transformed state solves

    d zeta = k^{-1} [ b(t, zeta k, v) dt + beta(t, zeta k, v) dW ],   k = kappa_t(T_t),

driven by W alone. Coefficients are evaluated at the left endpoint of each
step. Paths that overflow are flagged and dropped; more than
``MAX_FLAGGED_FRACTION`` of them aborts the run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fbm import PathEnsemble
from .girsanov import GirsanovFactors
from .problem import ControlPolicy, ControlProblem

__all__ = [
    "SimulationError",
    "TrajectorySet",
    "CostEstimate",
    "simulate_zeta",
    "reconstruct_x",
    "classical_direct",
    "simulate_variations",
    "evaluate_cost",
    "cost_per_path",
    "moments",
]

MAX_FLAGGED_FRACTION = 1e-3


class SimulationError(RuntimeError):
    pass


@dataclass
class TrajectorySet:
    """Per path and node. ``controls[:, i]`` is the control used on step i."""

    zeta: np.ndarray
    controls: np.ndarray
    valid: np.ndarray
    y1: np.ndarray | None = None
    y2: np.ndarray | None = None
    zeta_eps: np.ndarray | None = None
    controls_eps: np.ndarray | None = None
    x_reconstructed: np.ndarray | None = None

    @property
    def n_flagged(self) -> int:
        return int(np.count_nonzero(~self.valid))

    @property
    def y3(self) -> np.ndarray:
        return self.y1 + self.y2


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    se: float
    m_paths: int


def _flag(*arrays) -> np.ndarray:
    ok = np.ones(arrays[0].shape[0], bool)
    for a in arrays:
        ok &= np.all(np.isfinite(a), axis=1)
    m = ok.size
    if m and (m - ok.sum()) / m > MAX_FLAGGED_FRACTION:
        raise SimulationError(f"{m - ok.sum()} of {m} paths overflowed (budget {MAX_FLAGGED_FRACTION:.1%})")
    return ok


def _euler_zeta(problem: ControlProblem, policy, ens: PathEnsemble,
                fac: GirsanovFactors, x0: float):
    # policy: a ControlPolicy evaluated along the new path, or an (m, n) array
    # of open-loop control values
    c = problem.coeffs
    grid = ens.grid
    dt, dw = grid.dt, ens.dw
    t = grid.nodes
    m, n = ens.m_paths, grid.n_steps
    zeta = np.empty((m, n + 1))
    ctrl = np.empty((m, n))
    zeta[:, 0] = x0
    ks, kinv = fac.kappa_shifted, fac.kappa_shifted_inv
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n):
            z = zeta[:, i]
            if isinstance(policy, np.ndarray):
                v = policy[:, i]
            else:
                v = policy(t[i], z, ens.bh[:, i], fac.bh_shifted[:, i])
            xk = z * ks[:, i]
            zeta[:, i + 1] = z + kinv[:, i] * (c.b(t[i], xk, v) * dt + c.beta(t[i], xk, v) * dw[:, i])
            ctrl[:, i] = v
    return zeta, ctrl


def simulate_zeta(problem: ControlProblem, policy: ControlPolicy, ens: PathEnsemble,
                  fac: GirsanovFactors) -> TrajectorySet:
    zeta, ctrl = _euler_zeta(problem, policy, ens, fac, problem.x0)
    return TrajectorySet(zeta=zeta, controls=ctrl, valid=_flag(zeta))


def moments(x: np.ndarray) -> dict:
    """Mean and second moment of a sample, each with its standard error."""
    x = np.asarray(x, float)
    m = x.size

    def se(a):
        return float(a.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0

    return {
        "mean": float(x.mean()), "mean_se": se(x),
        "second": float((x**2).mean()), "second_se": se(x**2),
        "m_paths": int(m),
    }


def reconstruct_x(traj: TrajectorySet, fac: GirsanovFactors) -> dict:
    """Surrogate X~(t_i) = zeta(t_i) kappa_{t_i}, computed pathwise.

    The exact reconstruction composes zeta with the random shift A_t; X~ has
    the same law as X in the cases tested here, not the same paths.
    """
    x = traj.zeta * fac.kappa
    traj.x_reconstructed = x
    return {"x": x, "terminal": moments(x[traj.valid, -1])}


def classical_direct(problem: ControlProblem, policy: ControlPolicy, ens: PathEnsemble) -> dict:
    """Euler scheme with B^{1/2} as a second Brownian driver: dX = b dt + beta dW + sigma X dB."""
    if not ens.h.is_classical or not problem.hurst.is_classical:
        raise ValueError("classical_direct needs H = 1/2")
    c = problem.coeffs
    grid = ens.grid
    dt, dw, db = grid.dt, ens.dw, np.diff(ens.bh, axis=1)
    t = grid.nodes
    sig = problem.sigma
    m, n = ens.m_paths, grid.n_steps
    x = np.empty((m, n + 1))
    ctrl = np.empty((m, n))
    x[:, 0] = problem.x0
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n):
            xi = x[:, i]
            v = policy(t[i], xi, ens.bh[:, i], ens.bh[:, i])
            s_i = sig.value if sig.kind == "constant" else float(sig.sigma_fn(t[i]))
            x[:, i + 1] = xi + (c.b(t[i], xi, v) * dt + c.beta(t[i], xi, v) * dw[:, i]) + s_i * xi * db[:, i]
            ctrl[:, i] = v
    valid = _flag(x)
    return {"x": x, "controls": ctrl, "valid": valid, "terminal": moments(x[valid, -1])}


def simulate_variations(problem: ControlProblem, policy: ControlPolicy, policy_eps: ControlPolicy,
                        ens: PathEnsemble, fac: GirsanovFactors,
                        base: TrajectorySet | None = None) -> TrajectorySet:
    """First and second variations y1, y2 around the v-trajectory, plus the v^eps trajectory.

    All three share the Brownian increments of ``ens``. ``policy_eps`` is
    evaluated along the v-trajectory, so v^eps is the same control process as
    v off the spike. The v^eps state is returned as ``zeta_eps`` so that
    y^eps - y - y3 can be formed.
    """
    c = problem.coeffs
    grid = ens.grid
    dt, dw = grid.dt, ens.dw
    t = grid.nodes
    m, n = ens.m_paths, grid.n_steps
    if base is None:
        base = simulate_zeta(problem, policy, ens, fac)
    y = base.zeta
    ctrl_eps = np.empty_like(base.controls)
    for i in range(n):
        ctrl_eps[:, i] = policy_eps(t[i], y[:, i], ens.bh[:, i], fac.bh_shifted[:, i])
    zeta_eps, _ = _euler_zeta(problem, ctrl_eps, ens, fac, problem.x0)
    y1 = np.zeros((m, n + 1))
    y2 = np.zeros((m, n + 1))
    ks, kinv = fac.kappa_shifted, fac.kappa_shifted_inv
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n):
            k, ki = ks[:, i], kinv[:, i]
            xk = y[:, i] * k
            v = base.controls[:, i]
            ve = ctrl_eps[:, i]
            bx, betax = c.b_x(t[i], xk, v), c.beta_x(t[i], xk, v)
            bx_e, betax_e = c.b_x(t[i], xk, ve), c.beta_x(t[i], xk, ve)
            phi1 = ki * (c.b(t[i], xk, ve) - c.b(t[i], xk, v))
            psi1 = ki * (c.beta(t[i], xk, ve) - c.beta(t[i], xk, v))
            a1, a2 = y1[:, i], y2[:, i]
            y1[:, i + 1] = a1 + (bx * a1 + phi1) * dt + (betax * a1 + psi1) * dw[:, i]
            drift2 = bx * a2 + 0.5 * k * c.b_xx(t[i], xk, ve) * a1**2 + (bx_e - bx) * a1
            diff2 = betax * a2 + 0.5 * k * c.beta_xx(t[i], xk, ve) * a1**2 + (betax_e - betax) * a1
            y2[:, i + 1] = a2 + drift2 * dt + diff2 * dw[:, i]
    valid = base.valid & _flag(zeta_eps, y1, y2)
    return TrajectorySet(zeta=y, controls=base.controls, valid=valid, y1=y1, y2=y2,
                         zeta_eps=zeta_eps, controls_eps=ctrl_eps)


def cost_per_path(problem: ControlProblem, traj: TrajectorySet, fac: GirsanovFactors) -> np.ndarray:
    """Phi(zeta_T k_T)/k_T + sum_i f(t_i, zeta_i k_i, v_i)/k_i dt, with k = kappa(T)."""
    c = problem.coeffs
    n = traj.controls.shape[1]
    dt = problem.horizon / n
    t = np.arange(n + 1) * dt
    ks, kinv = fac.kappa_shifted, fac.kappa_shifted_inv
    xk = traj.zeta * ks
    running = np.zeros(traj.zeta.shape[0])
    for i in range(n):
        running += c.f(t[i], xk[:, i], traj.controls[:, i]) * kinv[:, i]
    return c.phi(xk[:, -1]) * kinv[:, -1] + running * dt


def evaluate_cost(problem: ControlProblem, traj: TrajectorySet, fac: GirsanovFactors) -> CostEstimate:
    vals = cost_per_path(problem, traj, fac)[traj.valid]
    m = vals.size
    se = float(vals.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    return CostEstimate(float(vals.mean()), se, m)
