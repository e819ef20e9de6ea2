"""Coefficient sets, control policies, spike perturbations and the Hamiltonian.

Policies are written directly in transformed coordinates, i.e. as v(t) =
u(t, T_t). All callables are vectorized over paths: coefficient functions take
``(t, x, u)`` with ``t`` a float and ``x``, ``u`` arrays (or scalars) and must
be pure. Controls are scalar (k = 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fbm import HurstParam, TimeGrid
from .girsanov import SigmaSpec

__all__ = [
    "CoefficientSet",
    "ControlSet",
    "ControlPolicy",
    "SpikePerturbation",
    "HamiltonianInput",
    "ControlProblem",
    "constant_policy",
    "spike",
    "spike_mask",
    "hamiltonian",
    "hamiltonian_xx",
    "derivative_mismatch",
    "builtin_problem",
    "BUILTIN_PROBLEMS",
]

SPIKE_TIE_TOL = 1e-12


@dataclass(frozen=True)
class CoefficientSet:
    beta: Callable
    b: Callable
    f: Callable
    phi: Callable
    beta_x: Callable
    beta_xx: Callable
    b_x: Callable
    b_xx: Callable
    f_x: Callable
    f_xx: Callable
    phi_x: Callable
    phi_xx: Callable
    bound: float | None = None
    lipschitz: float | None = None


def derivative_mismatch(coeffs: CoefficientSet, n_probes: int = 100, seed: int = 0,
                        x_scale: float = 2.0, u_scale: float = 2.0, horizon: float = 1.0) -> dict:
    """Largest relative gap between each derivative callback and a centered difference.

    The gap is measured as ``|analytic - fd| / max(1, |analytic|)`` on random
    probes of (t, x, u).
    """
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, horizon, n_probes)
    x = rng.normal(0, x_scale, n_probes)
    u = rng.normal(0, u_scale, n_probes)
    d = 1e-5
    out = {}

    def gap(analytic, fd):
        analytic = np.broadcast_to(np.asarray(analytic, float), fd.shape)
        return float(np.max(np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic))))

    for name in ("beta", "b", "f"):
        g, gx, gxx = getattr(coeffs, name), getattr(coeffs, name + "_x"), getattr(coeffs, name + "_xx")
        fd1 = np.array([(g(ti, xi + d, ui) - g(ti, xi - d, ui)) / (2 * d) for ti, xi, ui in zip(t, x, u)], float)
        fd2 = np.array([(gx(ti, xi + d, ui) - gx(ti, xi - d, ui)) / (2 * d) for ti, xi, ui in zip(t, x, u)], float)
        out[name + "_x"] = gap([gx(ti, xi, ui) for ti, xi, ui in zip(t, x, u)], fd1)
        out[name + "_xx"] = gap([gxx(ti, xi, ui) for ti, xi, ui in zip(t, x, u)], fd2)
    fd1 = (coeffs.phi(x + d) - coeffs.phi(x - d)) / (2 * d)
    fd2 = (coeffs.phi_x(x + d) - coeffs.phi_x(x - d)) / (2 * d)
    out["phi_x"] = gap(coeffs.phi_x(x), np.asarray(fd1, float))
    out["phi_xx"] = gap(coeffs.phi_xx(x), np.asarray(fd2, float))
    return out


@dataclass(frozen=True)
class ControlSet:
    """Admissible values U: a finite candidate list or a box [lo, hi]."""

    candidates: tuple | None = None
    box: tuple | None = None

    def __post_init__(self):
        if (self.candidates is None) == (self.box is None):
            raise ValueError("give exactly one of candidates or box")
        if self.box is not None and not self.box[0] <= self.box[1]:
            raise ValueError("box needs lo <= hi")

    def contains(self, values) -> bool:
        v = np.asarray(values, float)
        if self.box is not None:
            lo, hi = self.box
            return bool(np.all((v >= lo - 1e-12) & (v <= hi + 1e-12)))
        c = np.asarray(self.candidates, float)
        return bool(np.all(np.min(np.abs(v.reshape(-1, 1) - c[None, :]), axis=1) <= 1e-12))

    def candidate_grid(self, n: int = 25) -> np.ndarray:
        if self.candidates is not None:
            return np.asarray(self.candidates, float)
        return np.linspace(self.box[0], self.box[1], n)


@dataclass(frozen=True)
class ControlPolicy:
    """A control v(t) in transformed coordinates.

    ``kind`` selects how ``fn`` is called:

    * ``deterministic``: ``fn(t)``
    * ``markov_feedback``: ``fn(t, zeta, bh)``
    * ``fbm_functional``: ``fn(t, bh_shifted)``; an fBm-adapted control u(t, B^H)
      whose transformed version v(t) = u(t, T_t) needs B^H(t)(T_t), supplied
      by the caller.
    """

    kind: str
    fn: Callable
    control_set: ControlSet | None = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("deterministic", "markov_feedback", "fbm_functional", "spiked"):
            raise ValueError(f"unknown policy kind {self.kind!r}")

    def __call__(self, t: float, zeta, bh, bh_shifted) -> np.ndarray:
        m = np.shape(zeta)
        if self.kind == "deterministic":
            v = self.fn(t)
        elif self.kind == "markov_feedback":
            v = self.fn(t, zeta, bh)
        elif self.kind == "fbm_functional":
            v = self.fn(t, bh_shifted)
        else:
            v = self.fn(t, zeta, bh, bh_shifted)
        v = np.broadcast_to(np.asarray(v, float), m)
        if self.control_set is not None and not self.control_set.contains(v):
            raise ValueError(f"policy {self.label or self.kind} left the control set at t={t}")
        return v


def constant_policy(value: float, control_set: ControlSet | None = None) -> ControlPolicy:
    value = float(value)
    return ControlPolicy("deterministic", lambda t: value, control_set, label=f"const({value:g})")


@dataclass(frozen=True)
class SpikePerturbation:
    tau: float
    epsilon: float
    alt: ControlPolicy

    def validate(self, horizon: float) -> None:
        if not 0 < self.tau < horizon:
            raise ValueError("tau must lie in (0, T)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.tau - self.epsilon < 0 or self.tau + self.epsilon > horizon:
            raise ValueError("[tau - eps, tau + eps] must lie inside [0, T]")

    def covers(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        lo, hi = self.tau - self.epsilon, self.tau + self.epsilon
        return (t >= lo - SPIKE_TIE_TOL) & (t <= hi + SPIKE_TIE_TOL)


def spike_mask(pert: SpikePerturbation, grid: TimeGrid) -> np.ndarray:
    """Grid nodes in the closed interval [tau - eps, tau + eps] (ties included)."""
    pert.validate(grid.horizon)
    return pert.covers(grid.nodes)


def spike(policy: ControlPolicy, pert: SpikePerturbation, horizon: float) -> ControlPolicy:
    """v^eps: the alternative control on [tau - eps, tau + eps], ``policy`` elsewhere."""
    pert.validate(horizon)

    def fn(t, zeta, bh, bh_shifted):
        src = pert.alt if pert.covers(t) else policy
        return src(t, zeta, bh, bh_shifted)

    cs = policy.control_set
    return ControlPolicy("spiked", fn, cs, label=f"spike({policy.label}, tau={pert.tau:g}, eps={pert.epsilon:g})")


@dataclass(frozen=True)
class HamiltonianInput:
    s: float
    x: np.ndarray
    v: np.ndarray
    p: np.ndarray
    K: np.ndarray
    kappa_shifted: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.kappa_shifted) <= 0):
            raise ValueError("kappa_s(T_s) must be positive")


def hamiltonian(inp: HamiltonianInput, coeffs: CoefficientSet) -> np.ndarray:
    """H(s,x,v,p,K) = (f + p b + K beta)(s, x kappa_s(T_s), v) / kappa_s(T_s)."""
    ks = np.asarray(inp.kappa_shifted, float)
    xk = np.asarray(inp.x, float) * ks
    return (coeffs.f(inp.s, xk, inp.v) + inp.p * coeffs.b(inp.s, xk, inp.v)
            + inp.K * coeffs.beta(inp.s, xk, inp.v)) / ks


def hamiltonian_xx(inp: HamiltonianInput, coeffs: CoefficientSet) -> np.ndarray:
    """d^2 H / dx^2 = (f_xx + p b_xx + K beta_xx)(s, x kappa_s(T_s), v) * kappa_s(T_s)."""
    ks = np.asarray(inp.kappa_shifted, float)
    xk = np.asarray(inp.x, float) * ks
    return (coeffs.f_xx(inp.s, xk, inp.v) + inp.p * coeffs.b_xx(inp.s, xk, inp.v)
            + inp.K * coeffs.beta_xx(inp.s, xk, inp.v)) * ks


# ---------------------------------------------------------------------------
# Built-in problems
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlProblem:
    name: str
    coeffs: CoefficientSet
    x0: float
    horizon: float
    hurst: HurstParam
    sigma: SigmaSpec
    control_set: ControlSet
    params: dict = field(default_factory=dict)

    def policy(self, spec) -> ControlPolicy:
        """Resolve a policy spec: a number (constant control), ``"optimal"`` or a ControlPolicy."""
        if isinstance(spec, ControlPolicy):
            return spec
        if isinstance(spec, str):
            if spec == "optimal":
                if "optimal" not in self.params:
                    raise ValueError(f"problem {self.name!r} has no known optimal policy")
                return constant_policy(self.params["optimal"], self.control_set)
            return constant_policy(float(spec), self.control_set)
        return constant_policy(float(spec), self.control_set)


def _zero(t, x, u):
    return np.zeros(np.broadcast(np.asarray(x), np.asarray(u)).shape)


def _const(c):
    def fn(t, x, u):
        return np.full(np.broadcast(np.asarray(x), np.asarray(u)).shape, float(c))
    return fn


def _lq_basic(lam=1.0, beta0=0.5, gamma=0.5):
    # beta depends on x only through (u + lam) sin(x): at the optimum u = -lam
    # the state enters nowhere, off it the variations y2 and the remainder are live
    def beta(t, x, u):
        return beta0 + gamma * (u + lam) * np.sin(x)

    def beta_x(t, x, u):
        return gamma * (u + lam) * np.cos(x)

    def beta_xx(t, x, u):
        return -gamma * (u + lam) * np.sin(x)

    return CoefficientSet(
        beta=beta, beta_x=beta_x, beta_xx=beta_xx,
        b=lambda t, x, u: np.asarray(u, float) + 0.0 * np.asarray(x, float), b_x=_zero, b_xx=_zero,
        f=lambda t, x, u: 0.5 * np.asarray(u, float) ** 2 + 0.0 * np.asarray(x, float), f_x=_zero, f_xx=_zero,
        phi=lambda x: lam * np.asarray(x, float), phi_x=lambda x: np.full(np.shape(x), lam),
        phi_xx=lambda x: np.zeros(np.shape(x)),
    )


def _affine(a=0.0, beta0=0.0, c=0.0, phi="linear", lam=1.0, theta=0.0, control_cost=0.5):
    """b = a x + u + theta u x, beta = beta0 + c x, f = control_cost u^2, Phi linear or quadratic."""
    def b(t, x, u):
        x, u = np.asarray(x, float), np.asarray(u, float)
        return a * x + u + theta * u * x

    def b_x(t, x, u):
        x, u = np.asarray(x, float), np.asarray(u, float)
        return a + theta * u + 0.0 * x

    if phi == "linear":
        ph, ph_x, ph_xx = (lambda x: lam * np.asarray(x, float),
                           lambda x: np.full(np.shape(x), lam),
                           lambda x: np.zeros(np.shape(x)))
    else:
        ph, ph_x, ph_xx = (lambda x: 0.5 * np.asarray(x, float) ** 2,
                           lambda x: np.asarray(x, float) + 0.0,
                           lambda x: np.ones(np.shape(x)))
    return CoefficientSet(
        beta=lambda t, x, u: beta0 + c * np.asarray(x, float) + 0.0 * np.asarray(u, float),
        beta_x=_const(c), beta_xx=_zero,
        b=b, b_x=b_x, b_xx=_zero,
        f=lambda t, x, u: control_cost * np.asarray(u, float) ** 2 + 0.0 * np.asarray(x, float),
        f_x=_zero, f_xx=_zero,
        phi=ph, phi_x=ph_x, phi_xx=ph_xx,
    )


def _quadratic_phi(beta0=0.4, gamma=0.5, delta=0.0):
    """b = u, beta = beta0 + gamma u + delta sin(x), f = u^2 / 2, Phi = x^2 / 2."""
    return CoefficientSet(
        beta=lambda t, x, u: beta0 + gamma * np.asarray(u, float) + delta * np.sin(x),
        beta_x=lambda t, x, u: delta * np.cos(x) + 0.0 * np.asarray(u, float),
        beta_xx=lambda t, x, u: -delta * np.sin(x) + 0.0 * np.asarray(u, float),
        b=lambda t, x, u: np.asarray(u, float) + 0.0 * np.asarray(x, float), b_x=_zero, b_xx=_zero,
        f=lambda t, x, u: 0.5 * np.asarray(u, float) ** 2 + 0.0 * np.asarray(x, float), f_x=_zero, f_xx=_zero,
        phi=lambda x: 0.5 * np.asarray(x, float) ** 2, phi_x=lambda x: np.asarray(x, float) + 0.0,
        phi_xx=lambda x: np.ones(np.shape(x)),
    )


def _geometric(a=0.1, c=0.3):
    """Control-free geometric dynamics b = a x, beta = c x with Phi = x."""
    return CoefficientSet(
        beta=lambda t, x, u: c * np.asarray(x, float) + 0.0 * np.asarray(u, float), beta_x=_const(c), beta_xx=_zero,
        b=lambda t, x, u: a * np.asarray(x, float) + 0.0 * np.asarray(u, float), b_x=_const(a), b_xx=_zero,
        f=_zero, f_x=_zero, f_xx=_zero,
        phi=lambda x: np.asarray(x, float) + 0.0, phi_x=lambda x: np.ones(np.shape(x)),
        phi_xx=lambda x: np.zeros(np.shape(x)),
    )


def _zero_coeffs():
    z = lambda x: np.zeros(np.shape(x))  # noqa: E731
    return CoefficientSet(beta=_zero, beta_x=_zero, beta_xx=_zero, b=_zero, b_x=_zero, b_xx=_zero,
                          f=_zero, f_x=_zero, f_xx=_zero, phi=z, phi_x=z, phi_xx=z)


def _build_zero(p):
    return _zero_coeffs(), ControlSet(candidates=(0.0,)), {"optimal": 0.0}


def _build_lq_basic(p):
    lam = p["lam"]
    return _lq_basic(lam, p["beta0"], p["gamma"]), ControlSet(box=(-3 * lam, 3 * lam)), {"optimal": -lam}


def _build_geometric(p):
    return _geometric(p["a"], p["c"]), ControlSet(candidates=(0.0,)), {"optimal": 0.0}


def _build_classical(p):
    return (_affine(a=p["a"], beta0=p["beta0"], c=p["c"], phi="quadratic"),
            ControlSet(box=(-3.0, 3.0)), {})


def _build_linear_gaussian(p):
    lam = p["lam"]
    return (_affine(a=p["a"], beta0=p["beta0"], c=p["c"], phi="linear", lam=lam, theta=p["theta"]),
            ControlSet(box=(-3.0, 3.0)), {})


def _build_quadratic_phi(p):
    return _quadratic_phi(p["beta0"], p["gamma"], p["delta"]), ControlSet(box=(-3.0, 3.0)), {}


def _build_constant_terminal(p):
    lam = p["lam"]
    return (_affine(a=0.0, beta0=p["beta0"], c=0.0, phi="linear", lam=lam),
            ControlSet(box=(-3.0, 3.0)), {})


# name -> (builder, default parameters); x0, T, h, sigma are shared keys
BUILTIN_PROBLEMS = {
    "zero": (_build_zero, dict(x0=1.0, T=1.0, h=0.3, sigma=0.5)),
    "lq_basic": (_build_lq_basic, dict(lam=1.0, beta0=0.5, gamma=2.0, x0=1.0, T=1.0, h=0.3, sigma=0.5)),
    "geometric": (_build_geometric, dict(a=0.1, c=0.3, x0=1.0, T=1.0, h=0.5, sigma=0.5)),
    "classical_h_half": (_build_classical, dict(a=0.2, beta0=0.3, c=0.2, x0=1.0, T=1.0, h=0.5, sigma=0.3)),
    "linear_gaussian": (_build_linear_gaussian,
                        dict(a=0.5, beta0=0.4, c=0.0, lam=1.0, theta=0.0, x0=1.0, T=1.0, h=0.3, sigma=0.0)),
    "quadratic_phi": (_build_quadratic_phi, dict(beta0=0.4, gamma=0.5, delta=0.0, x0=1.0, T=1.0, h=0.3, sigma=0.0)),
    "constant_terminal": (_build_constant_terminal, dict(lam=1.0, beta0=0.4, x0=1.0, T=1.0, h=0.3, sigma=0.5)),
}


def builtin_problem(name: str, **overrides) -> ControlProblem:
    if name not in BUILTIN_PROBLEMS:
        raise KeyError(f"unknown problem {name!r}; known: {sorted(BUILTIN_PROBLEMS)}")
    builder, defaults = BUILTIN_PROBLEMS[name]
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise KeyError(f"unknown parameters for {name!r}: {sorted(unknown)}")
    p = {**defaults, **overrides}
    coeffs, cset, extra = builder(p)
    return ControlProblem(name, coeffs, float(p["x0"]), float(p["T"]), HurstParam(p["h"]),
                          SigmaSpec.constant(p["sigma"]), cset, {**p, **extra})
