"""Experiment configuration: a flat JSON document validated against a schema."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema

from .problem import BUILTIN_PROBLEMS, builtin_problem

__all__ = ["ConfigError", "Tolerances", "ExperimentConfig", "CONFIG_SCHEMA", "load_config", "fingerprint"]


class ConfigError(ValueError):
    pass


_POS = {"type": "number", "exclusiveMinimum": 0}
_RANGE = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["problem"],
    "properties": {
        "problem": {"type": "string", "enum": sorted(BUILTIN_PROBLEMS)},
        "params": {"type": "object", "additionalProperties": {"type": "number"}},
        "policy": {"oneOf": [{"type": "number"}, {"type": "string"}]},
        "alt_control": {"type": ["number", "null"]},
        "n_steps": {"type": "integer", "minimum": 2},
        "m_paths": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "degree": {"type": "integer", "minimum": 0, "maximum": 6},
        "tau": _POS,
        "epsilon": _POS,
        "ladder": {"type": "array", "items": _POS, "minItems": 1},
        "scaling_steps": {"type": "integer", "minimum": 2},
        "candidates": {"oneOf": [{"type": "integer", "minimum": 1},
                                 {"type": "array", "items": {"type": "number"}, "minItems": 1}]},
        "replicates": {"type": "integer", "minimum": 1},
        "export_paths": {"type": "boolean"},
        "tolerances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_se": _POS,
                "tol_vi_abs": _POS,
                "cov_max_err": _POS,
                "corr_bound": _POS,
                "slope_y1": _RANGE,
                "slope_y2": _RANGE,
            },
        },
    },
}


@dataclass(frozen=True)
class Tolerances:
    n_se: float = 3.0
    tol_vi_abs: float = 1e-3
    cov_max_err: float = 0.05
    corr_bound: float = 4.0
    slope_y1: tuple = (0.8, 1.4)
    slope_y2: tuple = (1.7, 2.6)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run depends on. ``params`` overrides the problem defaults (h, sigma, x0, T, lam, ...).

    ``alt_control`` is the constant used on spikes; None picks the admissible
    control nearest -0.5.
    """

    problem: str
    params: dict = field(default_factory=dict)
    policy: object = "optimal"
    alt_control: float | None = None
    n_steps: int = 64
    m_paths: int = 20000
    seed: int = 7
    degree: int = 2
    tau: float = 0.5
    epsilon: float = 0.1
    ladder: tuple = (0.2, 0.1, 0.05, 0.025)
    scaling_steps: int = 128
    candidates: object = 13
    replicates: int = 1
    export_paths: bool = False
    tolerances: Tolerances = field(default_factory=Tolerances)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ladder"] = list(self.ladder)
        if isinstance(self.candidates, tuple):
            d["candidates"] = list(self.candidates)
        d["tolerances"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["tolerances"].items()}
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), **changes})

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        validate(raw)
        data = dict(raw)
        tol = data.pop("tolerances", {}) or {}
        tol = Tolerances(**{k: tuple(v) if isinstance(v, list) else v for k, v in tol.items()})
        if "ladder" in data:
            data["ladder"] = tuple(data["ladder"])
        if isinstance(data.get("candidates"), list):
            data["candidates"] = tuple(data["candidates"])
        cfg = cls(**data, tolerances=tol)
        cfg.check_semantics()
        return cfg

    def check_semantics(self) -> None:
        _, defaults = BUILTIN_PROBLEMS[self.problem]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ConfigError(f"params: unknown parameters for {self.problem!r}: {sorted(unknown)}")
        problem = builtin_problem(self.problem, **self.params)
        try:
            problem.policy(self.policy)
        except ValueError as exc:
            raise ConfigError(f"policy: {exc}") from exc
        if self.alt_control is not None and not problem.control_set.contains(self.alt_control):
            raise ConfigError(f"alt_control: {self.alt_control} is not an admissible control")
        horizon = problem.horizon
        if not 0 < self.tau < horizon:
            raise ConfigError("tau: must lie in (0, T)")
        for name in ("slope_y1", "slope_y2"):
            lo, hi = getattr(self.tolerances, name)
            if not lo < hi:
                raise ConfigError(f"tolerances.{name}: lower bound must be below upper bound")


def validate(raw: dict) -> None:
    """Schema validation; the error names the offending field path."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        err = errors[0]
        path = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {err.message}")


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(raw)


def fingerprint(cfg: ExperimentConfig, command: str = "") -> str:
    """sha256 of the canonical JSON of (command, config); every field counts."""
    payload = json.dumps({"command": command, "config": cfg.to_dict()}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]

