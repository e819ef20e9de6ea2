"""Experiment pipelines behind the CLI, result records and their on-disk layout.

A run writes ``<out>/<fingerprint>/config.json``, ``report.json`` and
``tables/*.csv``. Everything except the timestamps is a deterministic
function of (command, config).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bsde import (RegressionBasis, orthogonality_diagnostics, solve_first_adjoint, solve_second_adjoint,
                   tower_check)
from .config import ExperimentConfig, fingerprint
from .fbm import TimeGrid, covariance_matrix, kernel_table, sample_paths
from .forward import evaluate_cost, reconstruct_x, simulate_variations, simulate_zeta, moments, cost_per_path
from .girsanov import check_girsanov_identity, girsanov_factors
from .problem import SpikePerturbation, builtin_problem, constant_policy, spike
from .verify import (check_variational_inequality, classical_reduction_check, duality_check,
                     scaling_experiment)

__all__ = ["ResultRecord", "NotFoundError", "COMMANDS", "run", "emit_plot_data", "write_record"]


class NotFoundError(KeyError):
    pass


@dataclass
class ResultRecord:
    fingerprint: str
    version: str
    command: str
    config: dict
    started: float
    finished: float
    checks: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def payload(self, timestamps: bool = True) -> dict:
        out = {"fingerprint": self.fingerprint, "version": self.version, "command": self.command,
               "config": self.config, "checks": self.checks, "passed": self.passed, "stats": self.stats}
        if timestamps:
            out.update(started=self.started, finished=self.finished)
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


# ---------------------------------------------------------------------------
# Pipelines: each returns (checks, stats, tables)
# ---------------------------------------------------------------------------

class _Ctx:
    """Lazily built shared objects for one run."""

    def __init__(self, cfg: ExperimentConfig, n_steps: int | None = None):
        self.cfg = cfg
        self.problem = builtin_problem(cfg.problem, **cfg.params)
        self.grid = TimeGrid(self.problem.horizon, n_steps or cfg.n_steps)
        self.policy = self.problem.policy(cfg.policy)
        self._ens = self._fac = self._traj = self._adj = None

    @property
    def ens(self):
        if self._ens is None:
            self._ens = sample_paths(self.problem.hurst, self.grid, self.cfg.m_paths, self.cfg.seed)
        return self._ens

    @property
    def fac(self):
        if self._fac is None:
            self._fac = girsanov_factors(self.ens, self.problem.sigma)
        return self._fac

    @property
    def traj(self):
        if self._traj is None:
            self._traj = simulate_zeta(self.problem, self.policy, self.ens, self.fac)
        return self._traj

    @property
    def basis(self):
        return RegressionBasis(self.cfg.degree)

    @property
    def adjoints(self):
        if self._adj is None:
            first = solve_first_adjoint(self.problem, self.traj, self.fac, self.ens, self.basis)
            second = solve_second_adjoint(self.problem, self.traj, self.fac, self.ens, first, self.basis)
            self._adj = (first, second)
        return self._adj

    def alt_policy(self):
        alt = self.cfg.alt_control
        if alt is None:
            grid = self.problem.control_set.candidate_grid(601)
            alt = float(grid[np.argmin(np.abs(grid + 0.5))])
        return constant_policy(alt, self.problem.control_set)

    def candidates(self):
        c = self.cfg.candidates
        if isinstance(c, int):
            return self.problem.control_set.candidate_grid(c)
        return np.asarray(c, float)


def _sample_fbm(ctx: _Ctx):
    ens, tol = ctx.ens, ctx.cfg.tolerances
    t = ctx.grid.nodes
    emp = ens.bh.T @ ens.bh / ens.m_paths
    exact = covariance_matrix(ens.h, t)
    diff = emp - exact
    table = kernel_table(ens.h, ctx.grid)
    kid = np.abs(table.row_quadrature() - t ** (2 * ens.h.h)).max()
    rows = [{"t": float(t[i]), "s": float(t[j]), "empirical": float(emp[i, j]), "exact": float(exact[i, j]),
             "diff": float(diff[i, j])} for i in range(t.size) for j in range(t.size)]
    stats = {"max_cov_err": float(np.abs(diff).max()), "kernel_identity_max_err": float(kid),
             "m_paths": ens.m_paths, "n_steps": ctx.grid.n_steps}
    checks = {"covariance": stats["max_cov_err"] <= tol.cov_max_err, "kernel_identity": kid <= 1e-2}
    return checks, stats, {"covariance": rows}


def _check_girsanov(ctx: _Ctx):
    ens, fac, tol = ctx.ens, ctx.fac, ctx.cfg.tolerances
    h, sig = ctx.problem.hurst, ctx.problem.sigma
    horizon = ctx.grid.horizon
    k_t = fac.kappa[:, -1]
    ki_t = 1.0 / fac.kappa_shifted[:, -1]
    stats, checks = {}, {}
    for name, arr in (("E_kappa_T", k_t), ("E_kappa_shifted_inv_T", ki_t)):
        mean = moments(arr)
        stats[name] = mean
        checks[name] = abs(mean["mean"] - 1.0) <= tol.n_se * mean["mean_se"] + 1e-12
    q = sig.q_of(h, ctx.grid.nodes)
    ident = float(np.max(np.abs(fac.kappa_shifted / (fac.kappa * np.exp(q)) - 1.0)))
    stats["per_path_identity_max_rel_err"] = ident
    checks["per_path_identity"] = ident <= 1e-12
    functionals = {"one": lambda b: np.ones(b.shape[0]), "bh_T": lambda b: b[:, -1], "bh_T_sq": lambda b: b[:, -1] ** 2}
    for name, fn in functionals.items():
        r = check_girsanov_identity(fn, horizon, ens, sig, name, tol.n_se)
        stats[f"identity_{name}"] = r
        checks[f"identity_{name}"] = r["pass"]
    return checks, stats, {}


def _simulate(ctx: _Ctx):
    traj = ctx.traj
    rec = reconstruct_x(traj, ctx.fac)
    v = traj.valid
    rows = [{"t": float(t), "mean_zeta": float(traj.zeta[v, i].mean()), "mean_x": float(rec["x"][v, i].mean())}
            for i, t in enumerate(ctx.grid.nodes)]
    stats = {"x_terminal": rec["terminal"], "zeta_terminal": moments(traj.zeta[v, -1]),
             "n_flagged": traj.n_flagged, "policy": ctx.policy.label}
    return {"flagged_within_budget": True}, stats, {"paths_mean": rows}


def _cost(ctx: _Ctx):
    est = evaluate_cost(ctx.problem, ctx.traj, ctx.fac)
    stats = {"cost": {"mean": est.mean, "se": est.se, "m_paths": est.m_paths}, "policy": ctx.policy.label}
    checks = {"finite": bool(np.isfinite(est.mean))}
    if "optimal" in ctx.problem.params:
        opt = ctx.problem.policy("optimal")
        traj_o = simulate_zeta(ctx.problem, opt, ctx.ens, ctx.fac)
        both = traj_o.valid & ctx.traj.valid
        d = cost_per_path(ctx.problem, traj_o, ctx.fac)[both] - cost_per_path(ctx.problem, ctx.traj, ctx.fac)[both]
        dm = moments(d)
        stats["optimal_minus_policy"] = dm
        checks["optimal_not_worse"] = dm["mean"] <= ctx.cfg.tolerances.n_se * dm["mean_se"] + 1e-12
    return checks, stats, {}


def _bsde_rows(ctx, first):
    t = ctx.grid.nodes
    return [{"t": float(t[i]), "mean_p": float(first.p[:, i].mean()), "mean_K": float(first.K[:, i].mean()),
             "residual_energy": float((first.n[:, i] ** 2).mean()), "r2": float(first.r2[i])}
            for i in range(ctx.grid.n_steps)]


def _solve_bsde(ctx: _Ctx):
    first, second = ctx.adjoints
    tol = ctx.cfg.tolerances
    orth = orthogonality_diagnostics(first, ctx.traj, ctx.fac, ctx.ens, ctx.basis, tol.corr_bound)
    tower = tower_check(first, tol.n_se)
    stats = {"first": first.summary(), "second": second.summary(), "tower": tower,
             "orthogonality": {k: v for k, v in orth.items() if k != "corr_with_dW"}}
    checks = {"tower": tower["pass"], "orthogonality": orth["pass"], "martingale": orth["martingale_pass"]}
    return checks, stats, {"bsde": _bsde_rows(ctx, first)}


def _duality_parts(ctx: _Ctx):
    first, second = ctx.adjoints
    pert = SpikePerturbation(ctx.cfg.tau, ctx.cfg.epsilon, ctx.alt_policy())
    var = simulate_variations(ctx.problem, ctx.policy, spike(ctx.policy, pert, ctx.problem.horizon),
                              ctx.ens, ctx.fac, ctx.traj)
    return duality_check(ctx.problem, var, ctx.fac, ctx.ens, first, second, ctx.cfg.tolerances.n_se)


def _duality(ctx: _Ctx):
    d = _duality_parts(ctx)
    return {"r1": d["r1"]["pass"], "r2": d["r2"]["pass"], "L": d["L"]["pass"]}, {"duality": d}, {}


def _verify_mp(ctx: _Ctx):
    first, second = ctx.adjoints
    tol = ctx.cfg.tolerances
    vi = check_variational_inequality(ctx.problem, ctx.traj, ctx.fac, ctx.ens, first, second,
                                      ctx.candidates(), n_se=tol.n_se, tol_abs=tol.tol_vi_abs)
    d = _duality_parts(ctx)
    tower = tower_check(first, tol.n_se)
    stats = {"variational_inequality": vi.to_dict(), "duality": d, "tower": tower,
             "first": first.summary(), "second": second.summary()}
    checks = {"variational_inequality": vi.passed, "r1": d["r1"]["pass"], "r2": d["r2"]["pass"],
              "L": d["L"]["pass"], "tower": tower["pass"]}
    return checks, stats, {"vi": vi.rows(), "bsde": _bsde_rows(ctx, first)}


def _scaling(ctx: _Ctx):
    cfg = ctx.cfg
    sctx = _Ctx(cfg, n_steps=cfg.scaling_steps)
    tol = cfg.tolerances
    rep = scaling_experiment(sctx.problem, sctx.policy, sctx.alt_policy(), cfg.tau, cfg.ladder, sctx.ens, sctx.fac,
                             ranges={"y1": tol.slope_y1, "y2": tol.slope_y2}, seed=cfg.seed)
    d = rep.to_dict()
    checks = {"slope_y1": d["slope_pass"]["y1"], "slope_y2": d["slope_pass"]["y2"],
              "remainder_decreasing": d["remainder_decreasing"]}
    return checks, {"scaling": d}, {"scaling": rep.rows()}


def _reduce_classical(ctx: _Ctx):
    cfg = ctx.cfg
    r = classical_reduction_check(ctx.problem, ctx.policy, ctx.grid, cfg.m_paths, cfg.seed, cfg.degree,
                                  cfg.tolerances.n_se, cfg.replicates)
    return {"p0": r["p0_pass"], "energy": r["energy_pass"]}, {"reduction": r}, {}


COMMANDS = {
    "sample-fbm": _sample_fbm,
    "check-girsanov": _check_girsanov,
    "simulate": _simulate,
    "cost": _cost,
    "solve-bsde": _solve_bsde,
    "verify-mp": _verify_mp,
    "scaling": _scaling,
    "duality": _duality,
    "reduce-classical": _reduce_classical,
}


def run(cfg: ExperimentConfig, command: str, out_dir="runs", write: bool = True) -> ResultRecord:
    """Run one pipeline; with ``write`` the record lands in ``out_dir/<fingerprint>/``."""
    if command not in COMMANDS:
        raise NotFoundError(f"unknown command {command!r}; known: {sorted(COMMANDS)}")
    started = time.time()
    ctx = _Ctx(cfg)
    try:
        checks, stats, tables = COMMANDS[command](ctx)
    except Exception as exc:
        raise RuntimeError(f"{command} failed for problem {cfg.problem!r}: {exc}") from exc
    rec = ResultRecord(fingerprint(cfg, command), __version__, command, cfg.to_dict(), started, time.time(),
                       {k: bool(v) for k, v in checks.items()}, _jsonable(stats), tables)
    if write:
        path = write_record(rec, out_dir)
        if cfg.export_paths and ctx._ens is not None:
            ctx._ens.to_npz(path / "ensemble.npz")
    return rec


def write_record(rec: ResultRecord, out_dir) -> Path:
    path = Path(out_dir) / rec.fingerprint
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(json.dumps(rec.config, indent=2, sort_keys=True))
    (path / "report.json").write_text(json.dumps(rec.payload(), indent=2, sort_keys=True))
    for kind in rec.tables:
        emit_plot_data(rec, kind, path / "tables")
    return path


def emit_plot_data(rec: ResultRecord, kind: str, out_dir) -> Path:
    """Write the tidy CSV for one table of the record (``covariance``, ``scaling``, ``vi``, ...)."""
    if kind not in rec.tables:
        raise NotFoundError(f"record {rec.fingerprint} has no {kind!r} data (has {sorted(rec.tables)})")
    rows = rec.tables[kind]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{kind}.csv"
    with open(path, "w", newline="") as fh:
        if rows:
            wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
            wr.writeheader()
            wr.writerows(rows)
    return path
