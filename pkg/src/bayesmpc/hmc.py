"""Fixed-length Hamiltonian Monte Carlo with warmup adaptation.

One transition draws a Gaussian momentum, integrates the Hamiltonian system
with the leapfrog scheme for a fixed number of steps, and accepts the end
point with probability min{1, exp(-H(end, -rho_end) + H(start, rho_start))}.
Warmup adapts the step size by dual averaging toward a target acceptance
statistic and the diagonal mass matrix from empirical draw variances over
doubling windows; post-warmup draws are produced with adaptation frozen.

Positions are flat vectors, so the sampler runs against any callable
returning (log density, gradient); the translation to model quantities
lives in :mod:`bayesmpc.bayes`.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "HmcConfig",
    "ChainState",
    "ChainResult",
    "leapfrog",
    "hmc_iteration",
    "run_chains",
    "split_rhat",
    "effective_sample_size",
    "chain_rngs",
]

logger = logging.getLogger(__name__)


@dataclass
class HmcConfig:
    """Sampler settings.  ``step_size`` is the initial leapfrog step (dual
    averaging moves it during warmup); integration time is
    ``step_size * n_leapfrog``.  ``mass_diag`` is the diagonal of the
    momentum covariance; ``None`` starts from ones."""

    step_size: float = 0.1
    n_leapfrog: int = 32
    mass_diag: np.ndarray | None = None
    n_warmup: int = 500
    n_keep: int = 500
    n_chains: int = 4
    seed: int = 0
    target_accept: float = 0.8
    step_jitter: float = 0.2  # uniform +/- fraction on the step per transition
    divergence_threshold: float = 1000.0
    n_threads: int = 1

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.n_leapfrog < 1:
            raise ValueError("n_leapfrog must be >= 1")
        if self.n_chains < 1 or self.n_keep < 1 or self.n_warmup < 0:
            raise ValueError("bad iteration counts")
        if not 0.0 <= self.step_jitter < 1.0:
            raise ValueError("step_jitter must lie in [0, 1)")
        if self.mass_diag is not None:
            self.mass_diag = np.asarray(self.mass_diag, dtype=float)
            if np.any(self.mass_diag <= 0):
                raise ValueError("mass_diag entries must be positive")


@dataclass
class ChainState:
    """Position with cached log-density and gradient."""

    eta: np.ndarray
    logp: float
    grad: np.ndarray


def _as_logp_grad(target):
    return target.logp_grad if hasattr(target, "logp_grad") else target


def chain_rngs(seed: int, n_chains: int) -> list[np.random.Generator]:
    """Independent per-chain generators derived from one master seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_chains)]


def leapfrog(eta, rho, logp_grad, step: float, n_steps: int, mass_diag):
    """Kick-drift-kick integration of the Hamiltonian flow.

    Returns ``(eta, rho, logp, grad, ok)``; ``ok`` is False when a
    non-finite state or gradient interrupted the trajectory, which callers
    treat as a rejection.
    """
    logp_grad = _as_logp_grad(logp_grad)
    eta = np.asarray(eta, dtype=float).copy()
    rho = np.asarray(rho, dtype=float).copy()
    logp, grad = logp_grad(eta)
    if not np.isfinite(logp):
        return eta, rho, logp, grad, False
    rho = rho + 0.5 * step * grad
    for i in range(n_steps):
        eta = eta + step * rho / mass_diag
        logp, grad = logp_grad(eta)
        if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
            return eta, rho, -np.inf, grad, False
        if i < n_steps - 1:
            rho = rho + step * grad
        else:
            rho = rho + 0.5 * step * grad
    return eta, rho, logp, grad, True


def _kinetic(rho, mass_diag):
    return 0.5 * float(np.sum(rho * rho / mass_diag))


def hmc_iteration(state: ChainState, target, step: float, n_leapfrog: int,
                  mass_diag, rng: np.random.Generator,
                  step_jitter: float = 0.0,
                  divergence_threshold: float = 1000.0):
    """One Metropolis-corrected Hamiltonian transition from ``state``.

    Returns ``(state, accepted, accept_prob, divergent)``; a rejected
    proposal returns the input state unchanged.
    """
    logp_grad = _as_logp_grad(target)
    dim = state.eta.size
    rho0 = rng.normal(size=dim) * np.sqrt(mass_diag)
    if step_jitter > 0.0:
        step = step * (1.0 + step_jitter * rng.uniform(-1.0, 1.0))

    h0 = -state.logp + _kinetic(rho0, mass_diag)
    eta_new, rho_new, logp_new, grad_new, ok = leapfrog(
        state.eta, rho0, logp_grad, step, n_leapfrog, mass_diag)
    if not ok:
        return state, False, 0.0, True

    # the final momentum is negated in the Hamiltonian of the proposal;
    # value-neutral for this quadratic kinetic energy but kept literal
    h_new = -logp_new + _kinetic(-rho_new, mass_diag)
    delta = h_new - h0
    divergent = not np.isfinite(delta) or abs(delta) > divergence_threshold
    accept_prob = min(1.0, float(np.exp(min(0.0, -delta))))
    if rng.uniform() < accept_prob:
        return ChainState(eta_new, logp_new, grad_new), True, accept_prob, divergent
    return state, False, accept_prob, divergent


# -- warmup schedule ---------------------------------------------------------

def _adaptation_windows(n_warmup: int):
    """(step-only buffer, list of mass-window end indices, final buffer).

    Stan-style schedule: a step-size-only opening phase, doubling mass
    windows, and a closing step-size phase.
    """
    if n_warmup == 0:
        return 0, [], 0
    init_buf, term_buf, base = 75, 50, 25
    if n_warmup < init_buf + term_buf + base:
        init_buf = max(1, int(0.15 * n_warmup))
        term_buf = max(1, int(0.10 * n_warmup))
        base = max(1, n_warmup - init_buf - term_buf)
    ends = []
    pos, size = init_buf, base
    while pos + size <= n_warmup - term_buf:
        # last window absorbs what would remain un-doubled
        if pos + 3 * size > n_warmup - term_buf:
            size = n_warmup - term_buf - pos
        ends.append(pos + size)
        pos += size
        size *= 2
    return init_buf, ends, term_buf


class _DualAveraging:
    """Nesterov dual averaging of log step size toward a target
    acceptance statistic."""

    def __init__(self, step0: float, target: float,
                 gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75):
        self.mu = np.log(10.0 * step0)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.log_step = np.log(step0)
        self.log_step_bar = 0.0
        self.h_bar = 0.0
        self.count = 0

    def update(self, accept_prob: float) -> float:
        self.count += 1
        m = self.count
        eta = 1.0 / (m + self.t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_prob)
        self.log_step = self.mu - np.sqrt(m) / self.gamma * self.h_bar
        weight = m ** (-self.kappa)
        self.log_step_bar = weight * self.log_step + (1.0 - weight) * self.log_step_bar
        return float(np.exp(self.log_step))

    def finalized(self) -> float:
        return float(np.exp(self.log_step_bar)) if self.count else float(np.exp(self.log_step))

    def restart(self, step0: float):
        self.mu = np.log(10.0 * step0)
        self.log_step = np.log(step0)
        self.log_step_bar = 0.0
        self.h_bar = 0.0
        self.count = 0


def _shrunk_inverse_variance(window_draws: np.ndarray) -> np.ndarray:
    """Mass diagonal from a warmup window: inverse of the regularized
    empirical variance (shrunk toward unit scale for short windows)."""
    n = window_draws.shape[0]
    var = np.var(window_draws, axis=0, ddof=1 if n > 1 else 0)
    var = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
    var = np.maximum(var, 1e-12)
    return 1.0 / var


@dataclass
class ChainResult:
    """Post-warmup draws of every chain plus sampler diagnostics."""

    draws: np.ndarray  # (n_chains, n_keep, dim)
    accept_rate: np.ndarray  # empirical fraction of accepted proposals
    mean_accept_prob: np.ndarray
    step_size: np.ndarray
    mass_diag: np.ndarray  # (n_chains, dim)
    divergences: np.ndarray  # post-warmup count per chain
    rhat: np.ndarray  # (dim,)
    ess: np.ndarray  # (dim,)
    warnings: list[str] = field(default_factory=list)

    @property
    def flat(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[-1])

    def diagnostics_dict(self, coord_names: list[str] | None = None) -> dict:
        d = {
            "n_chains": int(self.draws.shape[0]),
            "n_keep": int(self.draws.shape[1]),
            "accept_rate": [float(a) for a in self.accept_rate],
            "mean_accept_prob": [float(a) for a in self.mean_accept_prob],
            "step_size": [float(s) for s in self.step_size],
            "divergences": [int(v) for v in self.divergences],
            "rhat": [float(v) for v in self.rhat],
            "ess": [float(v) for v in self.ess],
            "max_rhat": float(np.max(self.rhat)),
            "min_ess": float(np.min(self.ess)),
            "warnings": list(self.warnings),
        }
        if coord_names is not None:
            d["coord_names"] = list(coord_names)
        return d


def _run_single_chain(target, cfg: HmcConfig, init: np.ndarray,
                      rng: np.random.Generator):
    logp_grad = _as_logp_grad(target)
    dim = init.size
    mass = np.ones(dim) if cfg.mass_diag is None else cfg.mass_diag.astype(float).copy()
    if mass.size != dim:
        raise ValueError("mass_diag dimension does not match the target")

    logp0, grad0 = logp_grad(init)
    if not np.isfinite(logp0):
        raise ValueError("chain initialised at a point of zero density")
    state = ChainState(np.asarray(init, float).copy(), logp0, grad0)

    step = cfg.step_size
    da = _DualAveraging(step, cfg.target_accept)
    init_buf, window_ends, _ = _adaptation_windows(cfg.n_warmup)
    window_start = init_buf
    warmup_buf = np.empty((cfg.n_warmup, dim))

    for it in range(cfg.n_warmup):
        state, _, accept_prob, _ = hmc_iteration(
            state, logp_grad, step, cfg.n_leapfrog, mass, rng,
            cfg.step_jitter, cfg.divergence_threshold)
        warmup_buf[it] = state.eta
        step = da.update(accept_prob)
        if it + 1 in window_ends:
            mass = _shrunk_inverse_variance(warmup_buf[window_start:it + 1])
            window_start = it + 1
            step = da.finalized()
            da.restart(step)
    if cfg.n_warmup:
        step = da.finalized()

    draws = np.empty((cfg.n_keep, dim))
    n_accept = 0
    accept_probs = np.empty(cfg.n_keep)
    divergences = 0
    for it in range(cfg.n_keep):
        state, accepted, accept_prob, divergent = hmc_iteration(
            state, logp_grad, step, cfg.n_leapfrog, mass, rng,
            cfg.step_jitter, cfg.divergence_threshold)
        draws[it] = state.eta
        accept_probs[it] = accept_prob
        n_accept += accepted
        divergences += divergent
    return draws, n_accept / cfg.n_keep, accept_probs.mean(), step, mass, divergences


def run_chains(target, cfg: HmcConfig, init: np.ndarray) -> ChainResult:
    """Run ``cfg.n_chains`` adaptive chains and gather diagnostics.

    ``init`` is either one position shared by all chains or an
    (n_chains, dim) array.  Results are a function of ``cfg.seed`` only;
    thread count never changes the draws.
    """
    init = np.asarray(init, dtype=float)
    if init.ndim == 1:
        init = np.tile(init, (cfg.n_chains, 1))
    if init.shape[0] != cfg.n_chains:
        raise ValueError("need one initial position per chain")
    rngs = chain_rngs(cfg.seed, cfg.n_chains)

    if cfg.n_threads > 1 and cfg.n_chains > 1:
        with ThreadPoolExecutor(max_workers=min(cfg.n_threads, cfg.n_chains)) as pool:
            outs = list(pool.map(lambda i: _run_single_chain(target, cfg, init[i], rngs[i]),
                                 range(cfg.n_chains)))
    else:
        outs = [_run_single_chain(target, cfg, init[i], rngs[i])
                for i in range(cfg.n_chains)]

    draws = np.stack([o[0] for o in outs])
    accept_rate = np.array([o[1] for o in outs])
    mean_prob = np.array([o[2] for o in outs])
    steps = np.array([o[3] for o in outs])
    masses = np.stack([o[4] for o in outs])
    divergences = np.array([o[5] for o in outs])

    rhat = split_rhat(draws)
    ess = effective_sample_size(draws)
    warnings = []
    if np.any(rhat > 1.1):
        warnings.append(f"split-Rhat above 1.1 (max {rhat.max():.3f}); chains have not mixed")
    if np.any(accept_rate < 0.2):
        warnings.append(f"acceptance below 0.2 (min {accept_rate.min():.3f}); step size too large")
    if np.any(divergences > 0):
        warnings.append(f"{int(divergences.sum())} divergent transitions after warmup")
    for msg in warnings:
        logger.warning(msg)

    return ChainResult(draws, accept_rate, mean_prob, steps, masses,
                       divergences, rhat, ess, warnings)


# -- diagnostics -------------------------------------------------------------

def split_rhat(draws: np.ndarray) -> np.ndarray:
    """Split potential-scale-reduction factor per coordinate.

    Each chain is halved, giving 2C sequences of length n/2; values near 1
    indicate the chains agree.
    """
    c, n, dim = draws.shape
    half = n // 2
    if half < 2:
        return np.full(dim, np.nan)
    seqs = np.concatenate([draws[:, :half], draws[:, half:2 * half]], axis=0)
    m, length = seqs.shape[0], half
    means = seqs.mean(axis=1)
    variances = seqs.var(axis=1, ddof=1)
    w = variances.mean(axis=0)
    b = length * means.var(axis=0, ddof=1)
    var_plus = (length - 1) / length * w + b / length
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(var_plus / w)
    return np.where(w > 0, rhat, 1.0)


def effective_sample_size(draws: np.ndarray) -> np.ndarray:
    """Bulk effective sample size per coordinate (Geyer initial monotone
    sequence over chain-averaged autocorrelations)."""
    c, n, dim = draws.shape
    ess = np.empty(dim)
    means = draws.mean(axis=1)
    variances = draws.var(axis=1, ddof=1)
    w = variances.mean(axis=0)
    b = means.var(axis=0, ddof=1) if c > 1 else np.zeros(dim)
    var_plus = (n - 1) / n * w + b

    # per-chain autocovariances via FFT
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    centered = draws - draws.mean(axis=1, keepdims=True)
    f = np.fft.rfft(centered, n=size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n].real / n
    mean_acov = acov.mean(axis=0)

    cap = c * n * np.log10(c * n + 10.0)
    for d in range(dim):
        if var_plus[d] <= 0:
            ess[d] = c * n
            continue
        rho = 1.0 - (w[d] - mean_acov[:, d]) / var_plus[d]
        # Geyer pairs rho_{2k} + rho_{2k+1}: keep while positive, enforce
        # monotone decay, then tau = 2 * sum(pairs) - 1
        acc = 0.0
        prev = np.inf
        k = 0
        while 2 * k + 1 < n:
            pair = rho[2 * k] + rho[2 * k + 1]
            if pair < 0:
                break
            pair = min(pair, prev)
            prev = pair
            acc += pair
            k += 1
        tau = max(2.0 * acc - 1.0, 1e-8)
        ess[d] = min(c * n / tau, cap)
    return ess
