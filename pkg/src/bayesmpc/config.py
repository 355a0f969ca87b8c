"""Experiment configuration: a versioned JSON schema and the builders that
turn a parsed config into model, priors, control problem, continuation and
sampler settings.

Validation is strict: unknown keys are rejected at every level and numeric
fields are range-checked here or by the constructed objects.  Parsing then
serialising then parsing again is idempotent, which the tests pin down.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from bayesmpc.bayes import GaussianPrior, PriorSpec
from bayesmpc.hmc import HmcConfig
from bayesmpc.models import (
    FurutaParams,
    LinearFirstOrderParams,
    SystemModel,
    furuta_theta,
    linear_theta,
    load_furuta_params,
    make_furuta_model,
    make_linear_model,
)
from bayesmpc.smpc import ContinuationState, ControlProblem, StateConstraint

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "bundled_config_text",
    "CONFIG_VERSION",
]

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Malformed or out-of-range experiment configuration."""


def _take(raw: dict, allowed: dict, context: str) -> dict:
    """Validate keys of ``raw`` against ``allowed`` (name -> required flag)
    and return a defaults-filled dict."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{context}: expected an object")
    unknown = set(raw) - set(allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    missing = [k for k, required in allowed.items() if required and k not in raw]
    if missing:
        raise ConfigError(f"{context}: missing required keys {missing}")
    return raw


def _bound_array(values, n, context) -> np.ndarray:
    """Bounds list with null meaning unbounded on that side."""
    if values is None:
        values = [None] * n
    if np.isscalar(values):
        values = [values] * n
    if len(values) != n:
        raise ConfigError(f"{context}: expected {n} entries")
    return np.array([np.inf if v is None else float(v) for v in values])


@dataclass
class ExperimentConfig:
    """Parsed experiment description; see the bundled JSON files for the
    concrete schema."""

    version: int
    seed: int
    model_kind: str
    model_params: dict
    priors_raw: dict
    hmc_raw: dict
    control_raw: dict
    continuation_raw: dict
    loop_raw: dict
    out_dir: str | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    # -- parsing ----------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        top = _take(raw, {
            "version": True, "seed": True, "model": True, "priors": False,
            "hmc": False, "control": True, "continuation": False,
            "loop": True, "out_dir": False,
        }, "config")
        if top["version"] != CONFIG_VERSION:
            raise ConfigError(f"config: unsupported version {top['version']!r}")

        model = _take(top["model"], {"kind": True, "params": False,
                                     "params_file": False}, "model")
        kind = model["kind"]
        if kind not in ("linear_first_order", "furuta"):
            raise ConfigError(f"model: unknown kind {kind!r}")
        cfg = cls(
            version=int(top["version"]),
            seed=int(top["seed"]),
            model_kind=kind,
            model_params=dict(model),
            priors_raw=dict(top.get("priors") or {}),
            hmc_raw=dict(top.get("hmc") or {}),
            control_raw=dict(top["control"]),
            continuation_raw=dict(top.get("continuation") or {}),
            loop_raw=dict(top["loop"]),
            out_dir=top.get("out_dir"),
        )
        # construct everything once so that bad values fail at load time
        cfg.build_model()
        cfg.build_priors()
        cfg.build_hmc()
        cfg.build_problem()
        cfg.build_continuation()
        cfg.loop_params()
        return cfg

    def to_dict(self) -> dict:
        out = {
            "version": self.version,
            "seed": self.seed,
            "model": dict(self.model_params),
            "priors": dict(self.priors_raw),
            "hmc": dict(self.hmc_raw),
            "control": dict(self.control_raw),
            "continuation": dict(self.continuation_raw),
            "loop": dict(self.loop_raw),
        }
        if self.out_dir is not None:
            out["out_dir"] = self.out_dir
        return out

    # -- builders ---------------------------------------------------------

    def build_model(self) -> tuple[SystemModel, np.ndarray]:
        """(model, true parameter vector used by the truth simulator)."""
        if "model" in self._cache:
            return self._cache["model"]
        params = self.model_params.get("params")
        params_file = self.model_params.get("params_file")
        if params is not None and params_file is not None:
            raise ConfigError("model: give either params or params_file, not both")
        if self.model_kind == "linear_first_order":
            try:
                p = LinearFirstOrderParams(**(params or {}))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"model.params: {exc}") from exc
            model, theta = make_linear_model(), linear_theta(p)
        else:
            try:
                if params_file is not None:
                    p = load_furuta_params(params_file)
                elif params:
                    p = FurutaParams(**params)
                else:
                    p = load_furuta_params()
            except (TypeError, ValueError, OSError) as exc:
                raise ConfigError(f"model.params: {exc}") from exc
            model, theta = make_furuta_model(p), furuta_theta(p)
        self._cache["model"] = (model, theta)
        return model, theta

    def build_priors(self) -> PriorSpec:
        model, _ = self.build_model()
        raw = _take(self.priors_raw, {"params": False, "x0_mean": False,
                                      "x0_std": False}, "priors")
        entries = raw.get("params", "default")
        if entries == "default" or entries is None:
            priors = PriorSpec.default(model).param_priors
        else:
            if len(entries) != model.n_theta:
                raise ConfigError(
                    f"priors.params: need {model.n_theta} entries, got {len(entries)}")
            priors = []
            for i, entry in enumerate(entries):
                e = _take(entry, {"name": False, "mean": True, "std": True,
                                  "space": False}, f"priors.params[{i}]")
                name = e.get("name")
                if name is not None and name != model.param_names[i]:
                    raise ConfigError(
                        f"priors.params[{i}]: name {name!r} does not match "
                        f"parameter {model.param_names[i]!r}")
                try:
                    priors.append(GaussianPrior(float(e["mean"]), float(e["std"]),
                                                e.get("space", "unconstrained")))
                except ValueError as exc:
                    raise ConfigError(f"priors.params[{i}]: {exc}") from exc
        x0_mean = np.asarray(raw.get("x0_mean", np.zeros(model.n_x)), dtype=float)
        x0_std_raw = raw.get("x0_std", np.ones(model.n_x))
        x0_std = np.array([np.inf if v is None else float(v)
                           for v in np.atleast_1d(x0_std_raw)])
        try:
            return PriorSpec(priors, x0_mean, x0_std)
        except ValueError as exc:
            raise ConfigError(f"priors: {exc}") from exc

    def build_hmc(self, n_threads: int = 1) -> HmcConfig:
        raw = _take(self.hmc_raw, {
            "step_size": False, "n_leapfrog": False, "n_warmup": False,
            "n_keep": False, "n_chains": False, "target_accept": False,
            "step_jitter": False,
        }, "hmc")
        try:
            return HmcConfig(
                step_size=float(raw.get("step_size", 0.1)),
                n_leapfrog=int(raw.get("n_leapfrog", 32)),
                n_warmup=int(raw.get("n_warmup", 500)),
                n_keep=int(raw.get("n_keep", 500)),
                n_chains=int(raw.get("n_chains", 4)),
                seed=self.seed,
                target_accept=float(raw.get("target_accept", 0.8)),
                step_jitter=float(raw.get("step_jitter", 0.2)),
                n_threads=n_threads,
            )
        except ValueError as exc:
            raise ConfigError(f"hmc: {exc}") from exc

    def build_problem(self) -> ControlProblem:
        model, _ = self.build_model()
        raw = _take(self.control_raw, {
            "horizon": True, "setpoint": True, "state_weight": True,
            "input_weight": True, "input_lower": False, "input_upper": False,
            "state_constraints": False, "slack_floor": False,
            "slack_weight": False, "slack_offset": False,
            "literal_signs": False,
        }, "control")
        setpoint = np.asarray(raw["setpoint"], dtype=float).ravel()
        if setpoint.size != model.n_x:
            raise ConfigError(f"control.setpoint: need {model.n_x} entries")
        lo = _bound_array(raw.get("input_lower"), model.n_u, "control.input_lower")
        hi = _bound_array(raw.get("input_upper"), model.n_u, "control.input_upper")
        lo[lo == np.inf] = -np.inf  # null lower bounds mean unbounded below

        constraints = []
        for i, entry in enumerate(raw.get("state_constraints") or []):
            e = _take(entry, {"dim": True, "bound": True, "side": True},
                      f"control.state_constraints[{i}]")
            if not 0 <= int(e["dim"]) < model.n_x:
                raise ConfigError(
                    f"control.state_constraints[{i}]: dim out of range")
            constraints.append(StateConstraint(int(e["dim"]), float(e["bound"]),
                                               str(e["side"])))

        if raw.get("literal_signs", False):
            # interpret every configured bound with the opposite inequality
            # direction (see the pedagogical experiment notes in README)
            if np.any(np.isfinite(lo) & np.isfinite(hi)):
                raise ConfigError(
                    "control.literal_signs: needs one-sided input bounds")
            lo, hi = np.where(np.isfinite(hi), hi, -np.inf), \
                np.where(np.isfinite(lo), lo, np.inf)
            constraints = [
                StateConstraint(c.dim, c.bound,
                                "lower" if c.side == "upper" else "upper")
                for c in constraints]

        try:
            return ControlProblem(
                n_horizon=int(raw["horizon"]),
                setpoint=setpoint,
                state_weight=np.asarray(raw["state_weight"], dtype=float),
                input_weight=np.asarray(raw["input_weight"], dtype=float),
                input_lower=lo, input_upper=hi,
                state_constraints=tuple(constraints),
                slack_floor=float(raw.get("slack_floor", 0.01)),
                slack_weight=float(raw.get("slack_weight", 100.0)),
                slack_offset=float(raw.get("slack_offset", 0.0)),
            )
        except ValueError as exc:
            raise ConfigError(f"control: {exc}") from exc

    def build_continuation(self) -> ContinuationState:
        raw = _take(self.continuation_raw, {
            "barrier_weight": False, "sharpness": False, "barrier_shrink": False,
            "sharpness_shrink": False, "inner_tol": False, "barrier_floor": False,
            "sharpness_floor": False, "armijo": False, "max_iter": False,
        }, "continuation")
        try:
            return ContinuationState(
                barrier_weight=float(raw.get("barrier_weight", 10.0)),
                sharpness=float(raw.get("sharpness", 1.0)),
                barrier_shrink=float(raw.get("barrier_shrink", 0.25)),
                sharpness_shrink=float(raw.get("sharpness_shrink", 0.25)),
                inner_tol=float(raw.get("inner_tol", 1e-4)),
                barrier_floor=float(raw.get("barrier_floor", 1e-6)),
                sharpness_floor=float(raw.get("sharpness_floor", 1e-3)),
                armijo=float(raw.get("armijo", 1e-4)),
                max_iter=int(raw.get("max_iter", 500)),
            )
        except ValueError as exc:
            raise ConfigError(f"continuation: {exc}") from exc

    def loop_params(self) -> dict:
        model, _ = self.build_model()
        raw = _take(self.loop_raw, {
            "n_steps": True, "n_samples": False, "x0_true": True,
            "u_init": False, "snapshot_times": False, "snapshot_paths": False,
            "excitation_amplitude": False,
        }, "loop")
        n_steps = int(raw["n_steps"])
        if n_steps < 1:
            raise ConfigError("loop.n_steps: must be >= 1")
        x0 = np.asarray(raw["x0_true"], dtype=float).ravel()
        if x0.size != model.n_x:
            raise ConfigError(f"loop.x0_true: need {model.n_x} entries")
        u_init = np.asarray(raw.get("u_init", np.zeros(model.n_u)), dtype=float).ravel()
        if u_init.size != model.n_u:
            raise ConfigError(f"loop.u_init: need {model.n_u} entries")
        return {
            "n_steps": n_steps,
            "n_samples": int(raw.get("n_samples", 200)),
            "x0_true": x0,
            "u_init": u_init,
            "snapshot_times": tuple(int(v) for v in raw.get("snapshot_times", ())),
            "snapshot_paths": int(raw.get("snapshot_paths", 1000)),
            "excitation_amplitude": float(raw.get("excitation_amplitude", 1.0)),
        }


def bundled_config_text(name: str) -> str:
    return resources.files("bayesmpc.configs").joinpath(f"{name}.json").read_text()


def load_config(path_or_name: str, seed: int | None = None,
                out_dir: str | None = None) -> ExperimentConfig:
    """Load a config from a path, or from the bundled set by bare name
    (``pedagogical``, ``furuta``).  ``seed``/``out_dir`` override the file."""
    p = Path(path_or_name)
    if p.exists():
        text = p.read_text(encoding="utf-8")
    else:
        try:
            text = bundled_config_text(str(path_or_name))
        except (FileNotFoundError, ModuleNotFoundError) as exc:
            raise ConfigError(f"no such config: {path_or_name}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path_or_name}: {exc}") from exc
    cfg = ExperimentConfig.from_dict(raw)
    if seed is not None:
        cfg.seed = int(seed)
    if out_dir is not None:
        cfg.out_dir = str(out_dir)
    return cfg
