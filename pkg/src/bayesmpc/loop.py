"""Closed-loop data-to-controller driver.

Each step applies the pending input to the truth simulator, measures, runs
HMC on the joint posterior of (state trajectory, parameters, future
disturbances) given all data so far, solves the chance-constrained horizon
problem on the retained draws, and schedules the first optimised input for
the next step.  Everything is a deterministic function of the master seed:
the truth noise, the per-step chain seeds and the draw thinning all come
from dedicated child streams.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from bayesmpc.bayes import (
    Dataset,
    PosteriorSample,
    PriorSpec,
    SampleSet,
    build_target,
    sample_future_disturbances,
)
from bayesmpc.hmc import HmcConfig, run_chains
from bayesmpc.models import SystemModel
from bayesmpc.smpc import ContinuationState, ControlProblem, control_action, rollout

__all__ = [
    "ClosedLoopRecord",
    "chain_initial_positions",
    "initial_theta_guess",
    "prior_scaled_mass",
    "HorizonSnapshot",
    "LoopResult",
    "run_closed_loop",
    "horizon_snapshot",
    "sample_set_from_chains",
]

logger = logging.getLogger(__name__)

QUANTILE_LEVELS = (0.05, 0.25, 0.50, 0.75, 0.95)


@dataclass
class ClosedLoopRecord:
    """Everything logged for one closed-loop step."""

    t: int
    x_true: np.ndarray
    y: np.ndarray
    u_applied: np.ndarray
    x_post_mean: np.ndarray
    x_post_std: np.ndarray
    theta_post_mean: np.ndarray
    theta_post_std: np.ndarray
    eps: float
    solver_converged: bool
    solver_iters: int
    max_rhat: float
    min_ess: float
    mean_accept: float
    divergences: int
    hmc_seconds: float
    solve_seconds: float

    def to_dict(self) -> dict:
        out = {}
        for key, value in self.__dict__.items():
            out[key] = value.tolist() if isinstance(value, np.ndarray) else value
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ClosedLoopRecord":
        kwargs = dict(raw)
        for key in ("x_true", "y", "u_applied", "x_post_mean", "x_post_std",
                    "theta_post_mean", "theta_post_std"):
            kwargs[key] = np.asarray(kwargs[key], dtype=float)
        return cls(**kwargs)


@dataclass
class HorizonSnapshot:
    """Fan-chart data for one solved horizon: per-step quantiles of the
    sampled rollouts under the optimised inputs, plus the inputs."""

    t: int
    levels: tuple[float, ...]
    quantiles: np.ndarray  # (n_levels, N+1, n_x)
    u_seq: np.ndarray  # (N+1, n_u)


@dataclass
class LoopResult:
    records: list[ClosedLoopRecord]
    snapshots: dict[int, HorizonSnapshot]
    states_true: np.ndarray  # (T+1, n_x)
    measurements: np.ndarray  # (T, n_y)
    inputs: np.ndarray  # (T, n_u) applied inputs
    step_diagnostics: list[dict] = field(default_factory=list)
    solver_traces: dict[int, list] = field(default_factory=dict)

    @property
    def all_converged(self) -> bool:
        return all(r.solver_converged for r in self.records)


def sample_set_from_chains(target, chain_result) -> SampleSet:
    """Unpack flat HMC draws into a stacked SampleSet."""
    flat = chain_result.flat
    m = flat.shape[0]
    first = target.unpack(flat[0])
    t, n_x = first.x_traj.shape
    x = np.empty((m, t, n_x))
    theta = np.empty((m, first.theta.size))
    w = np.empty((m,) + first.w_fut.shape)
    for i in range(m):
        s = target.unpack(flat[i])
        x[i], theta[i], w[i] = s.x_traj, s.theta, s.w_fut
    return SampleSet(x, theta, w, diagnostics=chain_result.diagnostics_dict())


def initial_theta_guess(model: SystemModel, priors: PriorSpec) -> np.ndarray:
    """Unconstrained parameter start: prior means mapped as declared."""
    phi = np.zeros(model.n_theta)
    for i, prior in enumerate(priors.param_priors):
        if prior.space == "constrained":
            one = np.ones(model.n_theta)
            one[i] = prior.mean
            phi[i] = model.param_transform.to_unconstrained(one)[i]
        else:
            phi[i] = prior.mean
    return phi


def chain_initial_positions(target, model, priors, data, n_horizon, phi_center, rng,
                 n_chains) -> np.ndarray:
    """Per-chain starting vectors: measurement-based state guess, the
    current parameter center, zero disturbances, all mildly jittered."""
    x_guess = model.init_state_traj(data.y_hist, data.u_hist)
    theta_center = model.param_transform.to_constrained(phi_center)
    base = target.pack(PosteriorSample(
        x_guess, theta_center, np.zeros((n_horizon + 1, model.n_x))))
    inits = np.empty((n_chains, base.size))
    for c in range(n_chains):
        inits[c] = base + 0.01 * rng.normal(size=base.size)
    return inits


def prior_scaled_mass(target, model, priors) -> np.ndarray:
    """Starting mass diagonal (inverse squared scales) from the priors.

    State coordinates use the initial-state prior scale (capped at the
    unit scale measurements enforce), parameter coordinates the prior
    scale mapped to the unconstrained space, and the non-centered
    disturbance block is standard normal by construction.
    """
    t, n_x = target.data.t, model.n_x
    x_scale = np.minimum(np.where(np.isfinite(priors.x0_std), priors.x0_std, 1.0), 1.0)
    scales = [np.tile(x_scale, t)]
    if target.n_free:
        phi_scale = np.empty(model.n_theta)
        kinds = model.param_transform.kinds
        for i, prior in enumerate(priors.param_priors):
            if prior.space == "constrained" and kinds[i] == "log":
                # delta method: sd(log theta) ~ sd/mean
                phi_scale[i] = prior.std / max(abs(prior.mean), 1e-12)
            else:
                phi_scale[i] = prior.std
        scales.append(phi_scale)
    scales.append(np.ones((target.n_horizon + 1) * n_x))
    flat = np.concatenate(scales)
    return 1.0 / np.maximum(flat, 1e-6) ** 2


def run_closed_loop(model: SystemModel, theta_true: np.ndarray,
                    priors: PriorSpec, problem: ControlProblem,
                    continuation: ContinuationState, hmc_cfg: HmcConfig,
                    n_steps: int, n_retained: int,
                    x0_true, u_init, seed: int,
                    snapshot_times: tuple[int, ...] = (),
                    snapshot_paths: int = 1000,
                    fixed_theta: np.ndarray | None = None) -> LoopResult:
    """Run the full pipeline for ``n_steps`` closed-loop steps.

    ``n_retained`` joint draws are kept per step for the controller.  When
    ``fixed_theta`` is given the sampler conditions on it and only states
    and disturbances are inferred (parameter summaries then report the
    fixed values with zero spread).
    """
    if n_steps < 1:
        raise ValueError("need at least one closed-loop step")
    theta_true = np.asarray(theta_true, dtype=float)
    n_x, n_u, n_y = model.n_x, model.n_u, model.n_y

    master = np.random.SeedSequence(seed)
    truth_seq, *step_seqs = master.spawn(n_steps + 1)
    truth_rng = np.random.default_rng(truth_seq)

    q_true = model.process_std(theta_true)
    r_true = model.meas_std(theta_true)

    states = np.zeros((n_steps + 1, n_x))
    states[0] = np.asarray(x0_true, dtype=float).reshape(n_x)
    measurements = np.zeros((n_steps, n_y))
    inputs = np.zeros((n_steps, n_u))

    records: list[ClosedLoopRecord] = []
    snapshots: dict[int, HorizonSnapshot] = {}
    step_diag: list[dict] = []
    traces: dict[int, list] = {}

    u_cur = np.asarray(u_init, dtype=float).reshape(n_u)
    phi_center = initial_theta_guess(model, priors)
    warm_u = None

    for t in range(1, n_steps + 1):
        idx = t - 1
        hmc_seq, misc_seq = step_seqs[idx].spawn(2)
        misc_rng = np.random.default_rng(misc_seq)

        # apply u_t / measure y_t
        e_t = truth_rng.normal(size=n_y) * r_true
        w_t = truth_rng.normal(size=n_x) * q_true
        inputs[idx] = u_cur
        measurements[idx] = model.measurement(states[idx], u_cur, theta_true, e_t)

        data = Dataset(inputs[:t].copy(), measurements[:t].copy())
        target = build_target(model, priors, data, problem.n_horizon,
                              fixed_theta=fixed_theta)

        t0 = time.perf_counter()
        cfg = HmcConfig(
            step_size=hmc_cfg.step_size, n_leapfrog=hmc_cfg.n_leapfrog,
            mass_diag=prior_scaled_mass(target, model, priors),
            n_warmup=hmc_cfg.n_warmup, n_keep=hmc_cfg.n_keep,
            n_chains=hmc_cfg.n_chains,
            seed=int(hmc_seq.generate_state(1)[0]),
            target_accept=hmc_cfg.target_accept,
            step_jitter=hmc_cfg.step_jitter,
            divergence_threshold=hmc_cfg.divergence_threshold,
            n_threads=hmc_cfg.n_threads)
        inits = chain_initial_positions(target, model, priors, data, problem.n_horizon,
                             phi_center, misc_rng, cfg.n_chains)
        chains = run_chains(target, cfg, inits)
        full_set = sample_set_from_chains(target, chains)
        samples = full_set.subsample(n_retained, misc_rng)
        hmc_seconds = time.perf_counter() - t0

        if fixed_theta is None:
            # next step starts the chains at this posterior's center
            phi_center = model.param_transform.to_unconstrained(
                samples.theta).mean(axis=0)

        t0 = time.perf_counter()
        decision = control_action(samples, u_cur, problem, model, continuation,
                                  u_init=warm_u)
        solve_seconds = time.perf_counter() - t0
        traces[t] = decision.trace
        if not decision.converged:
            logger.warning("step %d: solver not converged (%s); applying best iterate",
                           t, decision.stall_reason or "max_iter")

        if t in snapshot_times:
            snapshots[t] = horizon_snapshot(t, samples, decision, problem, model,
                                            u_cur, n_paths=snapshot_paths,
                                            rng=misc_rng)

        theta_mean = samples.theta.mean(axis=0)
        theta_std = samples.theta.std(axis=0)
        records.append(ClosedLoopRecord(
            t=t,
            x_true=states[idx].copy(),
            y=measurements[idx].copy(),
            u_applied=u_cur.copy(),
            x_post_mean=samples.x_last.mean(axis=0),
            x_post_std=samples.x_last.std(axis=0),
            theta_post_mean=theta_mean,
            theta_post_std=theta_std,
            eps=decision.eps,
            solver_converged=decision.converged,
            solver_iters=decision.n_iter,
            max_rhat=float(np.max(chains.rhat)),
            min_ess=float(np.min(chains.ess)),
            mean_accept=float(np.mean(chains.accept_rate)),
            divergences=int(np.sum(chains.divergences)),
            hmc_seconds=hmc_seconds,
            solve_seconds=solve_seconds,
        ))
        step_diag.append({"t": t, "hmc": chains.diagnostics_dict(),
                          "hmc_seconds": hmc_seconds,
                          "solve_seconds": solve_seconds,
                          "solver_converged": decision.converged,
                          "solver_iters": decision.n_iter,
                          "eps": decision.eps})

        # schedule u_{t+1}: first optimised input, clamped to the box
        # (a no-op whenever the solver converged; asserted by tests)
        u_next = np.clip(decision.u_seq[0], problem.input_lower, problem.input_upper)
        if decision.converged:
            assert np.allclose(u_next, decision.u_seq[0])
        warm_u = np.vstack([decision.u_seq[1:], decision.u_seq[-1:]])

        # truth transition under u_t
        states[idx + 1] = model.transition(states[idx], u_cur, theta_true, w_t)
        u_cur = u_next

    return LoopResult(records, snapshots, states, measurements, inputs,
                      step_diag, traces)


def horizon_snapshot(t: int, samples: SampleSet, decision, problem: ControlProblem,
                     model: SystemModel, u_applied,
                     n_paths: int = 0, rng: np.random.Generator | None = None) -> HorizonSnapshot:
    """Quantile fan of the sampled rollouts under the optimised inputs.

    With ``n_paths`` larger than the retained sample count, extra rollouts
    are generated by reusing the posterior (state, parameter) draws with
    fresh disturbance sequences, smoothing the displayed quantiles.
    """
    x0, theta, w = samples.x_last, samples.theta, samples.w_fut
    if n_paths and n_paths > samples.m:
        if rng is None:
            raise ValueError("path resampling needs a generator")
        reps = int(np.ceil(n_paths / samples.m))
        x0 = np.tile(x0, (reps, 1))[:n_paths]
        theta = np.tile(theta, (reps, 1))[:n_paths]
        w = np.stack([
            sample_future_disturbances(model, theta[i], problem.n_horizon, rng)
            for i in range(n_paths)])
    states = rollout(x0, u_applied, theta, decision.u_seq, w, model)
    quantiles = np.quantile(states, QUANTILE_LEVELS, axis=0)
    return HorizonSnapshot(t=t, levels=QUANTILE_LEVELS,
                           quantiles=quantiles, u_seq=decision.u_seq.copy())
