"""Girsanov density for the fBm shift and Monte Carlo checks of the change of measure.

For constant sigma everything is closed form:

    kappa_t            = exp(sigma B^H(t) - sigma^2 t^{2H} / 2)
    kappa_t(T_t)       = exp(sigma B^H(t) + sigma^2 t^{2H} / 2)
    B^H(s)(T_t)        = B^H(s) + sigma R_H(s, t)
    B^H(s)(A_t)        = B^H(s) - sigma R_H(s, t)

Shifts are algebraic adjustments of already sampled paths, so the three
estimates in :func:`check_girsanov_identity` share their random numbers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .fbm import HurstParam, PathEnsemble, _as_hurst, covariance

__all__ = [
    "SigmaSpec",
    "GirsanovFactors",
    "kappa",
    "kappa_shifted",
    "shift_bh",
    "shifted_paths",
    "girsanov_factors",
    "check_girsanov_identity",
    "moment_bounds",
]


@dataclass(frozen=True)
class SigmaSpec:
    """Volatility of the fBm term.

    ``kind="constant"`` is closed form. ``kind="custom"`` needs a deterministic
    ``sigma(t)`` plus the two hooks ``q(t) = int_0^t ((K sigma I_[0,t])(r))^2 dr``
    and ``shift(t) = B^H(t)(T_t) - B^H(t)``. Whether the hooks are consistent
    with ``sigma`` (including sign changes) is the caller's responsibility; the
    stochastic integral is then the left-point sum ``sum_j sigma(t_j) dB^H_j``.
    """

    kind: str = "constant"
    value: float = 0.0
    sigma_fn: Callable | None = None
    q: Callable | None = None
    shift: Callable | None = None

    def __post_init__(self):
        if self.kind == "custom":
            if self.sigma_fn is None or self.q is None or self.shift is None:
                raise ValueError("custom sigma needs sigma_fn, q and shift hooks")
        elif self.kind != "constant":
            raise ValueError(f"unknown sigma kind {self.kind!r}")

    @classmethod
    def constant(cls, value: float) -> "SigmaSpec":
        return cls("constant", float(value))

    def q_of(self, h: HurstParam, t):
        t = np.asarray(t, float)
        if self.kind == "constant":
            return self.value**2 * t ** (2 * h.h)
        return np.asarray(self.q(t), float)

    def self_shift(self, h: HurstParam, t):
        t = np.asarray(t, float)
        if self.kind == "constant":
            return self.value * t ** (2 * h.h)
        return np.asarray(self.shift(t), float)

    def stochastic_integral(self, ens: PathEnsemble) -> np.ndarray:
        """int_0^{t_i} sigma dB^H for every path and node."""
        if self.kind == "constant":
            return self.value * ens.bh
        sig = np.asarray([self.sigma_fn(t) for t in ens.grid.nodes[:-1]], float)
        out = np.zeros_like(ens.bh)
        out[:, 1:] = np.cumsum(np.diff(ens.bh, axis=1) * sig, axis=1)
        return out


def _sigma(sigma) -> SigmaSpec:
    return sigma if isinstance(sigma, SigmaSpec) else SigmaSpec.constant(sigma)


def _check_constant(sig: SigmaSpec, what: str):
    if sig.kind != "constant":
        raise ValueError(f"{what} has a closed form only for constant sigma")


def kappa(sigma, h, bh_t, t):
    """kappa_t from the fBm value B^H(t) (constant sigma)."""
    sig, hp = _sigma(sigma), _as_hurst(h)
    _check_constant(sig, "kappa")
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be >= 0")
    return np.exp(sig.value * np.asarray(bh_t, float) - 0.5 * sig.q_of(hp, t))


def kappa_shifted(sigma, h, bh_t, t):
    """kappa_t(T_t) from the unshifted fBm value B^H(t) (constant sigma)."""
    sig, hp = _sigma(sigma), _as_hurst(h)
    _check_constant(sig, "kappa_shifted")
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be >= 0")
    return np.exp(sig.value * np.asarray(bh_t, float) + 0.5 * sig.q_of(hp, t))


def shift_bh(sigma, h, bh_s, s: float, t: float):
    """B^H(s)(T_t) = B^H(s) + sigma R_H(s, t), for 0 <= s <= t."""
    sig, hp = _sigma(sigma), _as_hurst(h)
    _check_constant(sig, "shift_bh")
    if not 0 <= s <= t:
        raise ValueError(f"shift_bh needs 0 <= s <= t, got s={s}, t={t}")
    return np.asarray(bh_s, float) + sig.value * covariance(hp, s, t)


def shifted_paths(ens: PathEnsemble, sigma, t_index: int, sign: int = +1) -> np.ndarray:
    """Whole fBm paths under T_t (sign=+1) or A_t (sign=-1), t = t_{t_index}.

    The shift of the underlying Wiener path is frozen after t, so every node s
    (also s > t) moves by sigma R_H(s, t).
    """
    sig = _sigma(sigma)
    _check_constant(sig, "shifted_paths")
    nodes = ens.grid.nodes
    return ens.bh + sign * sig.value * covariance(ens.h, nodes, nodes[t_index])


@dataclass(frozen=True)
class GirsanovFactors:
    """Per path and node: kappa_{t_i}, kappa_{t_i}(T_{t_i}) and B^H(t_i)(T_{t_i})."""

    sigma: SigmaSpec
    kappa: np.ndarray
    kappa_shifted: np.ndarray
    bh_shifted: np.ndarray

    @property
    def kappa_shifted_inv(self) -> np.ndarray:
        return 1.0 / self.kappa_shifted


def girsanov_factors(ens: PathEnsemble, sigma) -> GirsanovFactors:
    sig = _sigma(sigma)
    nodes = ens.grid.nodes
    q = sig.q_of(ens.h, nodes)
    integral = sig.stochastic_integral(ens)
    with np.errstate(over="ignore"):
        k = np.exp(integral - 0.5 * q)
        ks = np.exp(integral + 0.5 * q)
    return GirsanovFactors(sig, k, ks, ens.bh + sig.self_shift(ens.h, nodes))


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    return float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0


def check_girsanov_identity(functional: Callable, t: float, ens: PathEnsemble, sigma,
                            name: str = "F", n_se: float = 3.0) -> dict:
    """Estimate E[F], E[F(A_t) kappa_t] and E[F(T_t) kappa_t^{-1}(T_t)] on common paths.

    ``functional`` maps an ``(m, n+1)`` array of fBm paths to ``m`` values. The
    two differences are tested against ``n_se`` standard errors of the paired
    per-path differences.
    """
    sig = _sigma(sigma)
    i = ens.grid.index_of(t)
    f0 = np.asarray(functional(ens.bh), float)
    try:
        fa = np.asarray(functional(shifted_paths(ens, sig, i, -1)), float)
        ft = np.asarray(functional(shifted_paths(ens, sig, i, +1)), float)
    except Exception as exc:  # noqa: BLE001
        raise TypeError(f"functional {name!r} cannot be evaluated on shifted paths") from exc
    if f0.shape != (ens.m_paths,) or fa.shape != f0.shape or ft.shape != f0.shape:
        raise TypeError(f"functional {name!r} must return one value per path")
    fac = girsanov_factors(ens, sig)
    za = fa * fac.kappa[:, i]
    zt = ft / fac.kappa_shifted[:, i]
    lhs, se_l = _mean_se(f0)
    rhs_a, se_a = _mean_se(za)
    rhs_t, se_t = _mean_se(zt)
    _, se_da = _mean_se(f0 - za)
    _, se_dt = _mean_se(f0 - zt)
    ok = abs(lhs - rhs_a) <= n_se * se_da and abs(lhs - rhs_t) <= n_se * se_dt
    return {
        "functional": name,
        "t": float(t),
        "lhs": lhs,
        "rhs_A": rhs_a,
        "rhs_T": rhs_t,
        "se": {"lhs": se_l, "rhs_A": se_a, "rhs_T": se_t, "diff_A": se_da, "diff_T": se_dt},
        "pass": bool(ok),
    }


def moment_bounds(ens: PathEnsemble, sigma, powers=(-2, -1, 1, 2)) -> dict:
    """Empirical E[sup_t kappa_t^p] and E[sup_t kappa_t(T_t)^p] with standard errors."""
    fac = girsanov_factors(ens, sigma)
    out = {}
    for p in powers:
        for label, arr in (("kappa", fac.kappa), ("kappa_shifted", fac.kappa_shifted)):
            m, se = _mean_se(np.max(arr ** float(p), axis=1))
            out[f"{label}^{p}"] = {"mean": m, "se": se}
    return out
