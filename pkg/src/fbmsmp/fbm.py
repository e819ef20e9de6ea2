"""Fractional Brownian motion: Volterra kernel, covariance and exact path sampling.

Paths of ``(W, B^H)`` live on a uniform grid ``t_i = i T / n``. The fBm is
sampled exactly on the grid by Cholesky factorization of its covariance; a
discretized Volterra construction is kept as an independent cross-check.

Every path draws its Gaussian noise from its own counter-based Philox stream
keyed by ``(seed, path index, stream id)``, so a path's values depend only on
the seed, its index and the grid, never on how many paths were requested.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate, special

__all__ = [
    "HurstParam",
    "TimeGrid",
    "KernelTable",
    "PathEnsemble",
    "kernel_constant",
    "kernel_value",
    "kernel_matrix",
    "kernel_table",
    "covariance",
    "covariance_matrix",
    "sample_paths",
    "sample_paths_volterra",
    "volterra_covariance",
    "path_normals",
    "prediction_weights",
    "predict_terminal",
]

H_MIN = 0.05
H_MAX = 0.5
JITTER_REL = 1e-10

# stream ids inside a path's Philox key
_STREAM_W = 0
_STREAM_FBM = 1


@dataclass(frozen=True)
class HurstParam:
    h: float

    def __post_init__(self):
        h = float(self.h)
        if not (H_MIN <= h <= H_MAX):
            raise ValueError(f"Hurst parameter {h} outside supported range [{H_MIN}, {H_MAX}]")
        object.__setattr__(self, "h", h)

    @property
    def is_classical(self) -> bool:
        return self.h == 0.5


def _as_hurst(h) -> HurstParam:
    return h if isinstance(h, HurstParam) else HurstParam(h)


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ValueError("n_steps must be an integer >= 2")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def index_of(self, t: float) -> int:
        """Index of the grid node equal to ``t`` (up to rounding)."""
        i = int(round(t / self.dt))
        if not 0 <= i <= self.n_steps or abs(i * self.dt - t) > 1e-9 * self.horizon:
            raise ValueError(f"{t} is not a grid node")
        return i


# ---------------------------------------------------------------------------
# Kernel and covariance
# ---------------------------------------------------------------------------

def kernel_constant(h) -> float:
    """Normalization constant C_H of the Molchan-Golosov kernel (H < 1/2)."""
    hp = _as_hurst(h)
    if hp.is_classical:
        raise ValueError("C_H is singular at H = 1/2; use the Brownian branch where K = 1")
    x = hp.h
    return float(np.sqrt(2 * x / ((1 - 2 * x) * special.beta(1 - 2 * x, x + 0.5))))


def _inner_integral_quad(h: float, t: float, s: float) -> float:
    # int_s^t u^{h-3/2} (u-s)^{h-1/2} du with u = s + x^2, which removes the
    # (u-s)^{h-1/2} endpoint singularity: integrand 2 x^{2h} (s+x^2)^{h-3/2}
    def f(x):
        return 2.0 * x ** (2 * h) * (s + x * x) ** (h - 1.5)

    val, _ = integrate.quad(f, 0.0, np.sqrt(t - s), epsabs=1e-14, epsrel=1e-12, limit=200)
    return val


def kernel_value(h, t: float, s: float, variant: str = "standard") -> float:
    """K_H(t, s) for 0 < s < t, inner integral by adaptive quadrature.

    ``variant="printed"`` uses ``t^{H-1/2}`` in place of ``(t-s)^{H-1/2}`` in
    the first term. It does not reproduce the fBm covariance and exists only
    so that this can be demonstrated.
    """
    hp = _as_hurst(h)
    if not (0 < s < t):
        raise ValueError(f"kernel needs 0 < s < t, got s={s}, t={t}")
    if hp.is_classical:
        return 1.0
    x = hp.h
    if variant == "standard":
        second = (t - s) ** (x - 0.5)
    elif variant == "printed":
        second = t ** (x - 0.5)
    else:
        raise ValueError(f"unknown kernel variant {variant!r}")
    first = (t / s) ** (x - 0.5) * second
    return kernel_constant(hp) * (first - (x - 0.5) * s ** (0.5 - x) * _inner_integral_quad(x, t, s))


def kernel_matrix(h, t, s, t_minus_s=None) -> np.ndarray:
    """Vectorized K_H(t, s) (zero where s >= t).

    Uses the closed form of the inner integral,
    ``s^{2H-1} B(1-2H, H+1/2) (1 - I_{s/t}(1-2H, H+1/2))``.
    Pass ``t_minus_s`` when s is within rounding of t.
    """
    hp = _as_hurst(h)
    t, s = np.broadcast_arrays(np.asarray(t, float), np.asarray(s, float))
    d = (t - s) if t_minus_s is None else np.broadcast_to(np.asarray(t_minus_s, float), t.shape)
    mask = (s > 0) & (d > 0)
    out = np.zeros(t.shape)
    if hp.is_classical:
        out[mask] = 1.0
        return out
    x = hp.h
    tt, ss, dd = t[mask], s[mask], d[mask]
    a, b = 1 - 2 * x, x + 0.5
    first = (ss / tt) ** (0.5 - x) * dd ** (x - 0.5)
    second = (0.5 - x) * ss ** (x - 0.5) * special.beta(a, b) * special.betaincc(a, b, ss / tt)
    out[mask] = kernel_constant(hp) * (first + second)
    return out


def covariance(h, t, s):
    """R_H(t, s) = (t^{2H} + s^{2H} - |t - s|^{2H}) / 2."""
    hp = _as_hurst(h)
    t = np.asarray(t, float)
    s = np.asarray(s, float)
    if np.any(t < 0) or np.any(s < 0):
        raise ValueError("covariance is defined for t, s >= 0")
    e = 2 * hp.h
    r = 0.5 * (t**e + s**e - np.abs(t - s) ** e)
    return float(r) if r.ndim == 0 else r


def covariance_matrix(h, times) -> np.ndarray:
    times = np.asarray(times, float)
    return covariance(h, times[:, None], times[None, :])


def prediction_weights(h, grid: "TimeGrid", target: int | None = None) -> np.ndarray:
    """Row i holds the weights w with E[B^H(t_target) | B^H(t_1), ..., B^H(t_i)] = w @ B^H(t_0..t_i).

    Gaussian conditioning on the grid values; B^H(0) = 0 carries no weight.
    Rows at or after the target pick the target value itself.
    """
    hp = _as_hurst(h)
    n = grid.n_steps
    target = n if target is None else int(target)
    r = covariance_matrix(hp, grid.nodes[1:])
    w = np.zeros((n + 1, n + 1))
    for i in range(1, n + 1):
        if i >= target:
            w[i, target] = 1.0
            continue
        w[i, 1:i + 1] = np.linalg.solve(r[:i, :i], r[:i, target - 1])
    return w


def predict_terminal(ens: "PathEnsemble", target: int | None = None) -> np.ndarray:
    """E[B^H(t_target) | grid past up to t_i] for every path and node i, shape (m, n+1)."""
    w = prediction_weights(ens.h, ens.grid, target)
    bh = ens.bh
    return np.stack([bh[:, :i + 1] @ w[i, :i + 1] for i in range(w.shape[0])], axis=1)


# tanh-sinh rule on (0, 1), returned as distances to both endpoints so that
# nodes near an endpoint keep full relative precision
def _tanh_sinh(step: float = 0.2, xmax: float = 4.0):
    x = np.arange(-xmax, xmax + step / 2, step)
    u = 0.5 * np.pi * np.sinh(x)
    left = 1.0 / (1.0 + np.exp(2 * u))
    right = 1.0 / (1.0 + np.exp(-2 * u))
    w = step * 0.5 * np.pi * np.cosh(x) / np.cosh(u) ** 2 / 2.0
    return right, left, w  # distance from 0, distance from 1, weight


@dataclass
class KernelTable:
    """Kernel values on a grid.

    ``k[i, j] = K_H(t_i, t_{j+1/2})`` for ``j < i`` (midpoint values, as used by
    the Volterra sampler). ``cell_sq[i, j]`` is the exact cell integral
    ``int_{t_j}^{t_{j+1}} K_H(t_i, r)^2 dr / dt`` from a tanh-sinh rule that
    absorbs the endpoint singularities, so ``sum_j cell_sq[i, j] * dt`` is a
    convergent row quadrature of ``t_i^{2H}``.
    """

    h: HurstParam
    grid: TimeGrid
    c_h: float
    k: np.ndarray

    @cached_property
    def cell_sq(self) -> np.ndarray:
        n, dt = self.grid.n_steps, self.grid.dt
        t = self.grid.nodes
        i_idx, j_idx = np.tril_indices(n + 1, k=-1)
        d0, d1, w = _tanh_sinh()
        # nodes inside cell j: s = t_j + dt*d0, t_i - s = (i - j - 1)*dt + dt*d1
        s = (j_idx[:, None] + d0[None, :]) * dt
        tms = ((i_idx - j_idx - 1)[:, None] + d1[None, :]) * dt
        vals = kernel_matrix(self.h, t[i_idx][:, None], s, t_minus_s=tms)
        out = np.zeros((n + 1, n))
        out[i_idx, j_idx] = (vals**2) @ w
        return out

    def row_quadrature(self) -> np.ndarray:
        return self.cell_sq.sum(axis=1) * self.grid.dt

    def midpoint_row_quadrature(self) -> np.ndarray:
        return (self.k**2).sum(axis=1) * self.grid.dt

    def midpoint_gram(self) -> np.ndarray:
        """sum_j k[i, j] k[l, j] dt, the covariance implied by the Volterra sampler."""
        return self.k @ self.k.T * self.grid.dt


def kernel_table(h, grid: TimeGrid) -> KernelTable:
    hp = _as_hurst(h)
    n, dt = grid.n_steps, grid.dt
    t = grid.nodes
    i_idx, j_idx = np.tril_indices(n + 1, k=-1)
    k = np.zeros((n + 1, n))
    k[i_idx, j_idx] = kernel_matrix(hp, t[i_idx], (j_idx + 0.5) * dt)
    c_h = 1.0 if hp.is_classical else kernel_constant(hp)
    return KernelTable(h=hp, grid=grid, c_h=c_h, k=k)


def kernel_gram(h, t_a: float, t_b: float) -> float:
    """int_0^{min(t_a,t_b)} K_H(t_a, r) K_H(t_b, r) dr by tanh-sinh quadrature."""
    hp = _as_hurst(h)
    lo, hi = min(t_a, t_b), max(t_a, t_b)
    d0, d1, w = _tanh_sinh(step=1 / 32, xmax=4.5)
    r = lo * d0
    ka = kernel_matrix(hp, lo, r, t_minus_s=lo * d1)
    kb = kernel_matrix(hp, hi, r, t_minus_s=(hi - lo) + lo * d1)
    return float(lo * np.sum(w * ka * kb))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _key(seed: int, path_id: int, stream: int) -> np.ndarray:
    return np.array([seed & 0xFFFFFFFFFFFFFFFF, (int(path_id) << 1) | stream], dtype=np.uint64)


def path_normals(seed: int, path_ids, n: int, stream: int) -> np.ndarray:
    """Standard normals, one independent Philox stream per path."""
    out = np.empty((len(path_ids), n))
    for row, pid in enumerate(path_ids):
        g = np.random.Generator(np.random.Philox(key=_key(seed, pid, stream)))
        out[row] = g.standard_normal(n)
    return out


@dataclass(frozen=True)
class PathEnsemble:
    """Jointly sampled ``(W, B^H)`` paths; arrays have shape ``(m_paths, n_steps + 1)``."""

    h: HurstParam
    grid: TimeGrid
    seed: int
    w: np.ndarray
    bh: np.ndarray
    path_ids: np.ndarray
    sampler: str = "cholesky"
    meta: dict = field(default_factory=dict)

    @property
    def m_paths(self) -> int:
        return self.w.shape[0]

    @property
    def dw(self) -> np.ndarray:
        return np.diff(self.w, axis=1)

    def subset(self, rows) -> "PathEnsemble":
        rows = np.asarray(rows)
        return PathEnsemble(self.h, self.grid, self.seed, self.w[rows], self.bh[rows],
                            self.path_ids[rows], self.sampler, dict(self.meta))

    def to_csv(self, path) -> None:
        """One row per (path, node): path_id, t, w, bh."""
        t = self.grid.nodes
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["path_id", "t", "w", "bh"])
            for r, pid in enumerate(self.path_ids):
                for i in range(t.size):
                    wr.writerow([int(pid), repr(float(t[i])), repr(float(self.w[r, i])),
                                 repr(float(self.bh[r, i]))])

    def to_npz(self, path) -> None:
        """Binary column layout: float64 arrays ``t`` (n+1), ``w`` and ``bh``
        (m, n+1, row-major), int64 ``path_ids`` (m), and a JSON ``meta`` string."""
        meta = {"h": self.h.h, "horizon": self.grid.horizon, "n_steps": self.grid.n_steps,
                "seed": int(self.seed), "sampler": self.sampler}
        np.savez(path, t=self.grid.nodes, w=self.w, bh=self.bh,
                 path_ids=self.path_ids.astype(np.int64), meta=json.dumps(meta))

    @classmethod
    def from_npz(cls, path) -> "PathEnsemble":
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            return cls(HurstParam(meta["h"]), TimeGrid(meta["horizon"], meta["n_steps"]),
                       meta["seed"], z["w"].copy(), z["bh"].copy(), z["path_ids"].copy(),
                       meta["sampler"])


def _cholesky_factor(h: HurstParam, grid: TimeGrid) -> np.ndarray:
    cov = covariance_matrix(h, grid.nodes[1:])
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_REL * np.max(np.diag(cov))
    try:
        return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"fBm covariance not positive definite even with jitter {jitter:.3g}") from exc


def _path_ids(m_paths: int, first_path: int) -> np.ndarray:
    if m_paths < 1:
        raise ValueError("m_paths must be >= 1")
    return np.arange(first_path, first_path + m_paths, dtype=np.int64)


def _brownian(seed, ids, grid) -> np.ndarray:
    w = np.zeros((ids.size, grid.n_steps + 1))
    w[:, 1:] = np.cumsum(path_normals(seed, ids, grid.n_steps, _STREAM_W) * np.sqrt(grid.dt), axis=1)
    return w


def sample_paths(h, grid: TimeGrid, m_paths: int, seed: int, first_path: int = 0) -> PathEnsemble:
    """Exact grid sampling: W from Gaussian increments, B^H = L Z with L L^T = [R_H(t_i, t_j)]."""
    hp = _as_hurst(h)
    ids = _path_ids(m_paths, first_path)
    chol = _cholesky_factor(hp, grid)
    z = path_normals(seed, ids, grid.n_steps, _STREAM_FBM)
    bh = np.zeros((ids.size, grid.n_steps + 1))
    bh[:, 1:] = z @ chol.T
    return PathEnsemble(hp, grid, seed, _brownian(seed, ids, grid), bh, ids, "cholesky")


def sample_paths_volterra(h, grid: TimeGrid, m_paths: int, seed: int, first_path: int = 0) -> PathEnsemble:
    """B^H(t_i) ~ sum_{j<i} K_H(t_i, t_{j+1/2}) dW0_j, with W0 from the fBm stream."""
    hp = _as_hurst(h)
    ids = _path_ids(m_paths, first_path)
    dw0 = path_normals(seed, ids, grid.n_steps, _STREAM_FBM) * np.sqrt(grid.dt)
    if hp.is_classical:
        bh = np.zeros((ids.size, grid.n_steps + 1))
        bh[:, 1:] = np.cumsum(dw0, axis=1)
    else:
        bh = dw0 @ kernel_table(hp, grid).k.T
    return PathEnsemble(hp, grid, seed, _brownian(seed, ids, grid), bh, ids, "volterra")


def volterra_covariance(h, grid: TimeGrid) -> np.ndarray:
    """Covariance matrix of the Volterra sampler on the grid (exact for its construction)."""
    hp = _as_hurst(h)
    if hp.is_classical:
        return covariance_matrix(hp, grid.nodes)
    return kernel_table(hp, grid).midpoint_gram()
