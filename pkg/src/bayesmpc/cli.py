"""Command-line entry point.

Three subcommands share the same JSON experiment config:

- ``run``    -- full closed-loop experiment; writes trajectory.csv, one
                horizon_t<k>.csv per snapshot step and diagnostics.json.
- ``sample`` -- truth simulation to a chosen data length followed by one
                posterior sampling pass; writes draws.csv, sample_meta.json
                and diagnostics.json.
- ``plan``   -- a single horizon solve on a previously written draws file;
                writes solver_trace.csv and horizon_plan.csv.

Exit codes: 0 success, 1 config error, 2 solver non-convergence,
3 infeasible at initialisation (plan only).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from bayesmpc import __version__
from bayesmpc.bayes import Dataset, SampleSet, build_target
from bayesmpc.config import ConfigError, ExperimentConfig, load_config
from bayesmpc.hmc import run_chains
from bayesmpc.loop import (
    chain_initial_positions,
    initial_theta_guess,
    prior_scaled_mass,
    horizon_snapshot,
    run_closed_loop,
    sample_set_from_chains,
)
from bayesmpc.models import simulate_truth
from bayesmpc.persist import (
    horizon_table,
    solver_trace_table,
    trajectory_table,
    write_csv,
    write_json,
)
from bayesmpc.smpc import InfeasibleError, control_action

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NOT_CONVERGED = 2
EXIT_INFEASIBLE = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bayesmpc",
        description="Sampling-based stochastic MPC experiments")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True,
                       help="config JSON path or bundled name (pedagogical, furuta)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="chain threads (falls back to BAYES_MPC_THREADS)")
        p.add_argument("--verbose", action="store_true",
                       help="chatty logging plus solver trace CSV output")

    p_run = sub.add_parser("run", help="closed-loop experiment")
    add_common(p_run)
    p_run.add_argument("--full-scale", action="store_true",
                       help="paper-scale sampler settings instead of the desk defaults")

    p_sample = sub.add_parser("sample", help="standalone posterior sampling")
    add_common(p_sample)
    p_sample.add_argument("--t", type=int, default=None,
                          help="data length (defaults to loop.n_steps)")

    p_plan = sub.add_parser("plan", help="one horizon solve from a draws file")
    add_common(p_plan)
    p_plan.add_argument("--samples", required=True, help="draws.csv from `sample`")
    return parser


def _resolve_threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("BAYES_MPC_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"BAYES_MPC_THREADS is not an integer: {env!r}") from exc
    return 1


def _out_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir or "runs/experiment")


def _apply_full_scale(cfg: ExperimentConfig) -> None:
    cfg.hmc_raw.update({"n_warmup": 500, "n_keep": 500, "n_chains": 4})
    cfg.loop_raw.update({"n_samples": 500})
    if cfg.model_kind == "furuta":
        cfg.loop_raw["n_steps"] = 50
        cfg.control_raw["horizon"] = 25
    cfg._cache.clear()


def cmd_run(args) -> int:
    cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
    if args.full_scale:
        _apply_full_scale(cfg)
    threads = _resolve_threads(args)
    model, theta_true = cfg.build_model()
    lp = cfg.loop_params()
    result = run_closed_loop(
        model, theta_true, cfg.build_priors(), cfg.build_problem(),
        cfg.build_continuation(), cfg.build_hmc(threads),
        n_steps=lp["n_steps"], n_retained=lp["n_samples"],
        x0_true=lp["x0_true"], u_init=lp["u_init"], seed=cfg.seed,
        snapshot_times=lp["snapshot_times"], snapshot_paths=lp["snapshot_paths"])

    out = _out_dir(cfg)
    header, rows = trajectory_table(result.records, model)
    write_csv(out / "trajectory.csv", header, rows)
    for t, snap in result.snapshots.items():
        h, r = horizon_table(snap, model)
        write_csv(out / f"horizon_t{t}.csv", h, r)
    write_json(out / "diagnostics.json", {
        "package_version": __version__,
        "config": cfg.to_dict(),
        "steps": result.step_diagnostics,
        "all_converged": result.all_converged,
    })
    if args.verbose:
        h, r = solver_trace_table(result.solver_traces)
        write_csv(out / "solver_trace.csv", h, r)
    logger.info("wrote %s", out / "trajectory.csv")
    return EXIT_OK if result.all_converged else EXIT_NOT_CONVERGED


def _excitation_inputs(cfg: ExperimentConfig, model, t: int) -> np.ndarray:
    lp = cfg.loop_params()
    amp = lp["excitation_amplitude"]
    _, exc_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(exc_seq)
    return rng.uniform(-amp, amp, size=(t, model.n_u))


def cmd_sample(args) -> int:
    cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
    threads = _resolve_threads(args)
    model, theta_true = cfg.build_model()
    priors = cfg.build_priors()
    problem = cfg.build_problem()
    lp = cfg.loop_params()
    t = args.t if args.t is not None else lp["n_steps"]
    if t < 1:
        raise ConfigError("--t must be >= 1")

    truth_seq, _ = np.random.SeedSequence(cfg.seed).spawn(2)
    inputs = _excitation_inputs(cfg, model, t)
    _, y = simulate_truth(model, theta_true, lp["x0_true"], inputs,
                          rng=np.random.default_rng(truth_seq))
    data = Dataset(inputs, y)
    target = build_target(model, priors, data, problem.n_horizon)
    hmc_cfg = cfg.build_hmc(threads)
    hmc_cfg.mass_diag = prior_scaled_mass(target, model, priors)
    init_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    inits = chain_initial_positions(target, model, priors, data, problem.n_horizon,
                                    initial_theta_guess(model, priors), init_rng,
                         hmc_cfg.n_chains)
    chains = run_chains(target, hmc_cfg, inits)
    samples = sample_set_from_chains(target, chains)

    out = _out_dir(cfg)
    names = target.coord_names()
    header = ["chain", "draw"] + names
    n_keep = chains.draws.shape[1]
    rows = []
    for i in range(samples.m):
        flat = np.concatenate([samples.x_traj[i].ravel(), samples.theta[i],
                               samples.w_fut[i].ravel()])
        rows.append([i // n_keep, i % n_keep, *flat])
    write_csv(out / "draws.csv", header, rows)
    write_json(out / "sample_meta.json", {
        "t": t,
        "u_last": inputs[-1].tolist(),
        "n_chains": int(chains.draws.shape[0]),
        "n_keep": int(n_keep),
        "config": cfg.to_dict(),
    })
    write_json(out / "diagnostics.json", {
        "package_version": __version__,
        "config": cfg.to_dict(),
        "hmc": chains.diagnostics_dict(coord_names=names),
    })
    logger.info("wrote %s", out / "draws.csv")
    return EXIT_OK


def _sample_set_from_draws(path: Path, model, problem, t: int) -> SampleSet:
    from bayesmpc.persist import read_csv_columns

    cols = read_csv_columns(path)
    n_x = model.n_x
    m = len(next(iter(cols.values())))
    x = np.empty((m, t, n_x))
    for k in range(t):
        for d in range(n_x):
            x[:, k, d] = cols[f"x{k + 1}_{d}"]
    theta = np.stack([cols[name] for name in model.param_names], axis=1)
    w = np.empty((m, problem.n_horizon + 1, n_x))
    for j in range(problem.n_horizon + 1):
        for d in range(n_x):
            w[:, j, d] = cols[f"w{j}_{d}"]
    return SampleSet(x, theta, w)


def cmd_plan(args) -> int:
    cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
    model, _ = cfg.build_model()
    problem = cfg.build_problem()
    continuation = cfg.build_continuation()
    lp = cfg.loop_params()

    draws_path = Path(args.samples)
    meta_path = draws_path.with_name("sample_meta.json")
    if not draws_path.exists():
        raise ConfigError(f"samples file not found: {draws_path}")
    if not meta_path.exists():
        raise ConfigError(f"metadata not found next to draws: {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    try:
        samples = _sample_set_from_draws(draws_path, model, problem, int(meta["t"]))
    except KeyError as exc:
        raise ConfigError(f"draws file does not match the config: missing {exc}") from exc
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2)))
    samples = samples.subsample(lp["n_samples"], rng)
    u_applied = np.asarray(meta["u_last"], dtype=float)

    decision = control_action(samples, u_applied, problem, model, continuation)

    out = _out_dir(cfg)
    h, r = solver_trace_table({int(meta["t"]): decision.trace})
    write_csv(out / "solver_trace.csv", h, r)
    snap = horizon_snapshot(int(meta["t"]), samples, decision, problem, model,
                            u_applied, n_paths=lp["snapshot_paths"], rng=rng)
    hh, rr = horizon_table(snap, model)
    write_csv(out / "horizon_plan.csv", hh, rr)
    logger.info("wrote %s", out / "solver_trace.csv")
    return EXIT_OK if decision.converged else EXIT_NOT_CONVERGED


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "sample":
            return cmd_sample(args)
        if args.command == "plan":
            return cmd_plan(args)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleError, ArithmeticError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
