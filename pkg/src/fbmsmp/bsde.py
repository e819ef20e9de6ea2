"""Least-squares Monte Carlo for the first and second order adjoint equations.

Backward recursion on the grid, one regression per time slice:

    K_i = argmin E[(p_{i+1} - E[p_{i+1} | F_i] - K(features_i) dW_i)^2]
    p_i = E[p_{i+1} + g_i dt | F_i]
    n_i = p_{i+1} + g_i dt - p_i - K_i dW_i

where g_i is the driver evaluated with p_{i+1} and K_i. Conditional
expectations are projections on polynomial features of (zeta, B^H) (plus
optional user features). The residual n_i is the increment of the martingale
orthogonal to W; it is never modelled, only measured.

In the continuum K_i is E[dp dW_i | F_i] / dt. Fitting it jointly against
features * dW_i instead of regressing dp dW_i / dt makes the residual
orthogonal to dW_i in sample as well, so the sampling error of the dW_i^2
average does not leak a dW-collinear piece into n_i. Centering makes K_i
vanish identically when p_{i+1} is in the span of the features.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fbm import PathEnsemble, predict_terminal
from .forward import TrajectorySet
from .girsanov import GirsanovFactors
from .problem import ControlProblem

__all__ = [
    "RegressionBasis",
    "AdjointSolution",
    "RegressionError",
    "solve_first_adjoint",
    "solve_second_adjoint",
    "orthogonality_diagnostics",
    "tower_check",
    "solve_two_driver_adjoint",
]


class RegressionError(RuntimeError):
    pass


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial features of total degree <= ``degree`` in the state variables.

    ``variables`` picks from ``zeta``, ``bh``, ``x`` (= zeta * kappa(T), the
    state in original coordinates) and ``bh_pred`` (= E[B^H(T) | past], the
    Gaussian predictor of the terminal fBm value). For H < 1/2 the pair
    (zeta, B^H(t)) is not Markov, and terminal data that depend on B^H(T)
    need ``bh_pred`` to be representable. ``extra`` maps
    ``(t, zeta, bh, kappa_shifted)`` to an ``(m, k)`` array of additional
    features.
    """

    degree: int = 2
    variables: tuple = ("zeta", "bh", "bh_pred")
    extra: Callable | None = None
    ridge: float = 1e-8

    def raw_features(self, t, zeta, bh, ks, bh_pred=None) -> np.ndarray:
        src = {"zeta": zeta, "bh": bh, "x": zeta * ks, "bh_pred": bh_pred}
        if "bh_pred" in self.variables and bh_pred is None:
            raise ValueError("basis uses bh_pred but no predictor values were supplied")
        cols = [src[v] for v in self.variables]
        feats = []
        for deg in range(1, self.degree + 1):
            for combo in itertools.combinations_with_replacement(range(len(cols)), deg):
                feats.append(np.prod([cols[j] for j in combo], axis=0))
        if self.extra is not None:
            ex = np.asarray(self.extra(t, zeta, bh, ks), float)
            feats.extend(ex.reshape(ex.shape[0], -1).T)
        if not feats:
            return np.empty((np.shape(zeta)[0], 0))
        return np.column_stack(feats)


class _Projector:
    """Least-squares projection onto span{1, standardized features} for one slice.

    The intercept is not penalized (features are centered), so constants are
    reproduced exactly; the ridge acts on the standardized slopes and
    lstsq gives the minimal-norm solution when columns are collinear.
    """

    def __init__(self, raw: np.ndarray, ridge: float):
        m = raw.shape[0]
        mu = raw.mean(axis=0) if raw.size else np.zeros(0)
        sd = raw.std(axis=0) if raw.size else np.zeros(0)
        scale = np.maximum(1.0, np.abs(mu))
        keep = sd > 1e-10 * scale
        self.x = (raw[:, keep] - mu[keep]) / sd[keep]
        self.m = m
        k = self.x.shape[1]
        if k:
            gram = self.x.T @ self.x / m
            self.cond = float(np.linalg.cond(gram))
            self._sys = gram + ridge * np.eye(k)
        else:
            self.cond = 1.0
            self._sys = None

    def fit(self, y: np.ndarray) -> tuple[np.ndarray, float]:
        mean = y.mean()
        fitted = np.full(y.shape, mean)
        if self._sys is not None:
            rhs = self.x.T @ (y - mean) / self.m
            coef, *_ = np.linalg.lstsq(self._sys, rhs, rcond=None)
            if not np.all(np.isfinite(coef)):
                raise RegressionError("regression produced non-finite coefficients")
            fitted = fitted + self.x @ coef
        ss = np.sum((y - mean) ** 2)
        r2 = 1.0 - np.sum((y - fitted) ** 2) / ss if ss > 0 else 1.0
        return fitted, float(r2)

    def fit_against(self, y: np.ndarray, increments, dt: float, ridge: float):
        """Least squares of y on [1, features] * dB for each increment dB.

        Returns one fitted coefficient process per increment (a single array
        when ``increments`` is a single array).
        """
        single = isinstance(increments, np.ndarray)
        incs = [increments] if single else list(increments)
        base = np.column_stack([np.ones(self.m), self.x])
        z = np.hstack([base * d[:, None] for d in incs])
        k = z.shape[1]
        gram = z.T @ z / self.m + ridge * dt * np.eye(k)
        coef, *_ = np.linalg.lstsq(gram, z.T @ y / self.m, rcond=None)
        if not np.all(np.isfinite(coef)):
            raise RegressionError("regression produced non-finite coefficients")
        w = base.shape[1]
        out = [base @ coef[j * w:(j + 1) * w] for j in range(len(incs))]
        return out[0] if single else out

    def coefficients(self, y: np.ndarray) -> np.ndarray:
        if self._sys is None:
            return np.zeros(0)
        rhs = self.x.T @ (y - y.mean()) / self.m
        return np.linalg.lstsq(self._sys, rhs, rcond=None)[0]


@dataclass
class AdjointSolution:
    """Regression solution on valid paths.

    ``value[:, i]`` is p (or P) at node i, ``z[:, i]`` is K (or Q) on step i,
    ``residual[:, i]`` the orthogonal martingale increment n_i (or m_i).
    ``cond_next[:, i]`` is the projection E[value_{i+1} | F_i] and ``driver``
    the driver g_i per path.
    """

    order: int
    value: np.ndarray
    z: np.ndarray
    residual: np.ndarray
    cond_next: np.ndarray
    driver: np.ndarray
    valid: np.ndarray
    dt: float
    r2: np.ndarray
    cond_numbers: np.ndarray
    meta: dict = field(default_factory=dict)

    # first-order names
    @property
    def p(self):
        return self.value

    @property
    def K(self):
        return self.z

    @property
    def n(self):
        return self.residual

    # second-order names
    @property
    def P(self):
        return self.value

    @property
    def Q(self):
        return self.z

    @property
    def M(self):
        return self.residual

    def summary(self) -> dict:
        return {
            "order": self.order,
            "value0": float(self.value[:, 0].mean()),
            "mean_value": self.value.mean(axis=0).tolist(),
            "mean_z": self.z.mean(axis=0).tolist(),
            "residual_energy": (self.residual**2).mean(axis=0).tolist(),
            "r2": self.r2.tolist(),
            "max_cond": float(np.max(self.cond_numbers)),
        }


def _slices(traj: TrajectorySet, fac: GirsanovFactors, ens: PathEnsemble):
    v = traj.valid
    return (traj.zeta[v], traj.controls[v], fac.kappa_shifted[v], ens.bh[v], ens.dw[v])


def _predictor(basis: RegressionBasis, ens: PathEnsemble, valid: np.ndarray):
    if "bh_pred" not in basis.variables:
        return None
    return predict_terminal(ens)[valid]


def _features(basis, t, i, zeta, bh, ks, pred):
    return basis.raw_features(t[i], zeta[:, i], bh[:, i], ks[:, i], None if pred is None else pred[:, i])


def _backward(terminal, driver_fn, basis: RegressionBasis, zeta, bh, ks, dw, dt, t, pred):
    m, n = dw.shape
    value = np.empty((m, n + 1))
    z = np.empty((m, n))
    res = np.empty((m, n))
    cond_next = np.empty((m, n))
    driver = np.empty((m, n))
    r2 = np.empty(n)
    conds = np.empty(n)
    value[:, n] = terminal
    for i in range(n - 1, -1, -1):
        proj = _Projector(_features(basis, t, i, zeta, bh, ks, pred), basis.ridge)
        nxt = value[:, i + 1]
        fitted_next, _ = proj.fit(nxt)
        zi = proj.fit_against(nxt - fitted_next, dw[:, i], dt, basis.ridge)
        g = driver_fn(i, nxt, zi)
        target = nxt + g * dt
        vi, r2[i] = proj.fit(target)
        value[:, i] = vi
        z[:, i] = zi
        cond_next[:, i] = fitted_next
        driver[:, i] = g
        res[:, i] = target - vi - zi * dw[:, i]
        conds[i] = proj.cond
    if not np.all(np.isfinite(value)):
        raise RegressionError("backward recursion produced non-finite values")
    return value, z, res, cond_next, driver, r2, conds


def solve_first_adjoint(problem: ControlProblem, traj: TrajectorySet, fac: GirsanovFactors,
                        ens: PathEnsemble, basis: RegressionBasis | None = None) -> AdjointSolution:
    """(p, K, N) with -dp = [b_x p + beta_x K + f_x] ds - K dW - dN, p(T) = Phi_x(y_T kappa_T(T_T))."""
    basis = basis or RegressionBasis()
    c = problem.coeffs
    zeta, ctrl, ks, bh, dw = _slices(traj, fac, ens)
    dt = ens.grid.dt
    t = ens.grid.nodes
    xk = zeta * ks

    def driver(i, nxt, zi):
        x, v = xk[:, i], ctrl[:, i]
        return c.b_x(t[i], x, v) * nxt + c.beta_x(t[i], x, v) * zi + c.f_x(t[i], x, v)

    pred = _predictor(basis, ens, traj.valid)
    out = _backward(c.phi_x(xk[:, -1]), driver, basis, zeta, bh, ks, dw, dt, t, pred)
    return AdjointSolution(1, *out[:5], traj.valid.copy(), dt, out[5], out[6],
                           meta={"degree": basis.degree, "variables": list(basis.variables)})


def solve_second_adjoint(problem: ControlProblem, traj: TrajectorySet, fac: GirsanovFactors,
                         ens: PathEnsemble, first: AdjointSolution,
                         basis: RegressionBasis | None = None) -> AdjointSolution:
    """(P, Q, M) with
    -dP = [(2 b_x + beta_x^2) P + 2 beta_x Q + H_xx(s, y, v, p, K)] ds - Q dW - dM,
    P(T) = Phi_xx(y_T kappa_T(T_T)) kappa_T(T_T).
    """
    basis = basis or RegressionBasis()
    c = problem.coeffs
    zeta, ctrl, ks, bh, dw = _slices(traj, fac, ens)
    if first.value.shape[0] != zeta.shape[0]:
        raise ValueError("first-order solution was computed on a different set of paths")
    dt = ens.grid.dt
    t = ens.grid.nodes
    xk = zeta * ks

    def driver(i, nxt, zi):
        x, v = xk[:, i], ctrl[:, i]
        bx, betax = c.b_x(t[i], x, v), c.beta_x(t[i], x, v)
        hxx = (c.f_xx(t[i], x, v) + first.p[:, i] * c.b_xx(t[i], x, v)
               + first.K[:, i] * c.beta_xx(t[i], x, v)) * ks[:, i]
        return (2 * bx + betax**2) * nxt + 2 * betax * zi + hxx

    terminal = c.phi_xx(xk[:, -1]) * ks[:, -1]
    pred = _predictor(basis, ens, traj.valid)
    out = _backward(terminal, driver, basis, zeta, bh, ks, dw, dt, t, pred)
    return AdjointSolution(2, *out[:5], traj.valid.copy(), dt, out[5], out[6],
                           meta={"degree": basis.degree, "variables": list(basis.variables)})


def tower_check(sol: AdjointSolution, n_se: float = 3.0) -> dict:
    """p(0) against the plain Monte Carlo mean of terminal + sum of driver * dt."""
    g = sol.value[:, -1] + sol.driver.sum(axis=1) * sol.dt
    m = g.size
    mean = float(g.mean())
    se = float(g.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    v0 = float(sol.value[:, 0].mean())
    return {"value0": v0, "mc_mean": mean, "se": se, "pass": bool(abs(v0 - mean) <= n_se * se + 1e-12)}


def orthogonality_diagnostics(sol: AdjointSolution, traj: TrajectorySet, fac: GirsanovFactors,
                              ens: PathEnsemble, basis: RegressionBasis | None = None,
                              corr_bound: float = 4.0, drift_tol: float = 1e-2) -> dict:
    """Orthogonality of the residual martingale to W.

    Per node: correlation of residual increments with dW, which should lie
    within ``corr_bound / sqrt(M)`` of zero. Martingale check: the tail sums
    sum_{j>=i} residual_j are regressed on the features at i. Slope
    t-statistics are reported, but at large M they pick up regression error
    that is negligible in size, so the gate is on the spread of the fitted
    (predictable) part relative to the RMS of the solution: ``drift_tol``.
    """
    basis = basis or RegressionBasis()
    zeta, _, ks, bh, dw = _slices(traj, fac, ens)
    pred = _predictor(basis, ens, traj.valid)
    res = sol.residual
    m, n = res.shape
    t = ens.grid.nodes
    corr = np.zeros(n)
    for i in range(n):
        sr, sw = res[:, i].std(), dw[:, i].std()
        if sr > 1e-13 * max(1.0, np.abs(sol.value).max()) and sw > 0:
            corr[i] = np.mean((res[:, i] - res[:, i].mean()) * (dw[:, i] - dw[:, i].mean())) / (sr * sw)
    tail = np.cumsum(res[:, ::-1], axis=1)[:, ::-1]
    max_t = 0.0
    drift = 0.0
    scale = max(float(np.sqrt(np.mean(sol.value**2))), 1e-12)
    for i in range(1, n):
        y = tail[:, i]
        if y.std() <= 1e-13:
            continue
        proj = _Projector(_features(basis, t, i, zeta, bh, ks, pred), basis.ridge)
        if proj.x.shape[1] == 0:
            continue
        coef = proj.coefficients(y)
        fitted, _ = proj.fit(y)
        s2 = np.sum((y - fitted) ** 2) / max(1, m - coef.size - 1)
        cov = s2 * np.linalg.pinv(proj.x.T @ proj.x)
        tstat = np.abs(coef) / np.sqrt(np.maximum(np.diag(cov), 1e-300))
        max_t = max(max_t, float(np.max(tstat)))
        drift = max(drift, float(fitted.std()) / scale)
    bound = corr_bound / np.sqrt(m)
    energy_path = (res**2).sum(axis=1)
    return {
        "corr_with_dW": corr.tolist(),
        "max_abs_corr": float(np.max(np.abs(corr))),
        "corr_bound": float(bound),
        "residual_energy": float(energy_path.mean()),
        "residual_energy_se": float(energy_path.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0,
        "residual_energy_per_node": (res**2).mean(axis=0).tolist(),
        "martingale_max_t": max_t,
        "martingale_drift": drift,
        "pass": bool(np.max(np.abs(corr)) <= bound),
        "martingale_pass": bool(drift <= drift_tol),
    }


def solve_two_driver_adjoint(problem: ControlProblem, direct: dict, ens: PathEnsemble,
                             basis: RegressionBasis | None = None) -> AdjointSolution:
    """Adjoint of the H = 1/2 system dX = b dt + beta dW + sigma X dB, two Brownian drivers:

        -dp = [b_x p + beta_x K + sigma K_1 + f_x] ds - K dW - K_1 dB,  p(T) = Phi_x(X_T).

    ``direct`` is the output of :func:`forward.classical_direct`. Features are
    built from (X, B) through ``basis`` (``zeta`` is read as X). K_1 is stored
    in ``meta["K1"]``; with sigma = 0 it is identically zero and only dW is
    used, so the result matches the transformed route exactly.
    """
    basis = basis or RegressionBasis()
    if not problem.hurst.is_classical:
        raise ValueError("two-driver adjoint needs H = 1/2")
    c = problem.coeffs
    v = direct["valid"]
    x, ctrl = direct["x"][v], direct["controls"][v]
    bh, dw = ens.bh[v], ens.dw[v]
    db = np.diff(bh, axis=1)
    sig = problem.sigma
    dt, t = ens.grid.dt, ens.grid.nodes
    m, n = dw.shape
    ones = np.ones_like(x)
    pred = _predictor(basis, ens, v)
    value = np.empty((m, n + 1))
    z = np.empty((m, n))
    z1 = np.zeros((m, n))
    res = np.empty((m, n))
    cond_next = np.empty((m, n))
    driver = np.empty((m, n))
    r2 = np.empty(n)
    conds = np.empty(n)
    value[:, n] = c.phi_x(x[:, -1])
    for i in range(n - 1, -1, -1):
        s_i = sig.value if sig.kind == "constant" else float(sig.sigma_fn(t[i]))
        proj = _Projector(_features(basis, t, i, x, bh, ones, pred), basis.ridge)
        nxt = value[:, i + 1]
        fitted_next, _ = proj.fit(nxt)
        if s_i == 0.0:
            zi = proj.fit_against(nxt - fitted_next, dw[:, i], dt, basis.ridge)
        else:
            zi, z1[:, i] = proj.fit_against(nxt - fitted_next, (dw[:, i], db[:, i]), dt, basis.ridge)
        xi, vi = x[:, i], ctrl[:, i]
        g = c.b_x(t[i], xi, vi) * nxt + c.beta_x(t[i], xi, vi) * zi + s_i * z1[:, i] + c.f_x(t[i], xi, vi)
        target = nxt + g * dt
        pi, r2[i] = proj.fit(target)
        value[:, i], z[:, i], cond_next[:, i], driver[:, i] = pi, zi, fitted_next, g
        res[:, i] = target - pi - zi * dw[:, i] - z1[:, i] * db[:, i]
        conds[i] = proj.cond
    if not np.all(np.isfinite(value)):
        raise RegressionError("backward recursion produced non-finite values")
    return AdjointSolution(1, value, z, res, cond_next, driver, v.copy(), dt, r2, conds,
                           meta={"K1": z1, "degree": basis.degree, "variables": list(basis.variables)})
