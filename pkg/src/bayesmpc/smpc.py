"""Sampled-cost chance-constrained control via a log-barrier continuation.

Given M posterior draws of (current state, parameters, future disturbances),
the horizon cost is the sample average of a quadratic rollout cost, and each
state constraint at each horizon step becomes a smoothed probability

    g_j(u, sharpness) = mean_i sigmoid(margin_ij / sharpness)

required to exceed 1 - eps for a slack variable eps >= slack_floor.  The
solver minimises the barrier objective

    slack_weight*(eps - slack_offset)^2 + mean_i cost_i
        - mu*[ ln(eps - slack_floor) + sum ln(input margins)
               + sum_j ln(g_j - 1 + eps) ]

with damped Newton steps, shrinking the barrier weight ``mu`` and the
sigmoid ``sharpness`` toward their floors between stages, so the smoothed
constraints tighten to indicator form as the continuation proceeds.

Derivatives are assembled by chain rule through the rollout sensitivities.
Gradients are exact; the Hessian drops rollout curvature (Gauss-Newton),
which is exact for linear plants and a standard positive-semidefinite
approximation otherwise — the damped step handles the rest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bayesmpc.models import SystemModel

__all__ = [
    "InfeasibleError",
    "SolverStallError",
    "StateConstraint",
    "ControlProblem",
    "ContinuationState",
    "HorizonDecision",
    "NewtonInfo",
    "TraceRow",
    "rollout",
    "mc_cost",
    "sigmoid",
    "chance_estimate",
    "barrier_cost",
    "newton_inner",
    "control_action",
]


class InfeasibleError(RuntimeError):
    """The decision violates a barrier domain constraint."""


class SolverStallError(RuntimeError):
    """Line search failed to find an acceptable step."""


@dataclass(frozen=True)
class StateConstraint:
    """One-sided bound on a state coordinate, enforced in probability at
    every horizon step.  Margin is positive when satisfied."""

    dim: int
    bound: float
    side: str = "upper"  # "upper": x <= bound; "lower": x >= bound

    def __post_init__(self):
        if self.side not in ("upper", "lower"):
            raise ValueError(f"side must be 'upper' or 'lower', got {self.side!r}")

    def margins(self, states: np.ndarray) -> np.ndarray:
        x = states[..., self.dim]
        return self.bound - x if self.side == "upper" else x - self.bound


@dataclass
class ControlProblem:
    """Horizon length, quadratic cost weights, input box and chance
    constraints.  ``input_lower``/``input_upper`` entries may be infinite;
    only finite sides produce barrier terms."""

    n_horizon: int
    setpoint: np.ndarray
    state_weight: np.ndarray
    input_weight: np.ndarray
    input_lower: np.ndarray
    input_upper: np.ndarray
    state_constraints: tuple[StateConstraint, ...] = ()
    slack_floor: float = 0.01
    slack_weight: float = 100.0
    slack_offset: float = 0.0

    def __post_init__(self):
        self.setpoint = np.asarray(self.setpoint, dtype=float).ravel()
        self.state_weight = np.atleast_2d(np.asarray(self.state_weight, dtype=float))
        self.input_weight = np.atleast_2d(np.asarray(self.input_weight, dtype=float))
        self.input_lower = np.asarray(self.input_lower, dtype=float).ravel()
        self.input_upper = np.asarray(self.input_upper, dtype=float).ravel()
        self.state_constraints = tuple(self.state_constraints)
        if self.n_horizon < 0:
            raise ValueError("horizon must be non-negative")
        for name, w in (("state_weight", self.state_weight),
                        ("input_weight", self.input_weight)):
            if not np.allclose(w, w.T):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(w).min() < -1e-10:
                raise ValueError(f"{name} must be positive semidefinite")
        if np.any(self.input_lower >= self.input_upper):
            raise ValueError("input box is empty")
        if self.slack_floor < 0 or self.slack_weight <= 0 or self.slack_offset > 0:
            raise ValueError("need slack_floor >= 0, slack_weight > 0, slack_offset <= 0")

    @property
    def n_u(self) -> int:
        return self.input_lower.size


@dataclass
class ContinuationState:
    """Barrier/sharpness schedule of the continuation solver."""

    barrier_weight: float = 10.0  # mu
    sharpness: float = 1.0  # gamma
    barrier_shrink: float = 0.25
    sharpness_shrink: float = 0.25
    inner_tol: float = 1e-4
    barrier_floor: float = 1e-6
    sharpness_floor: float = 1e-3
    armijo: float = 1e-4
    max_iter: int = 500

    def __post_init__(self):
        if not (0.0 < self.barrier_shrink < 1.0 and 0.0 < self.sharpness_shrink < 1.0):
            raise ValueError("shrink factors must lie in (0, 1)")
        if min(self.barrier_floor, self.sharpness_floor, self.inner_tol,
               self.barrier_weight, self.sharpness) <= 0:
            raise ValueError("weights, floors and tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    barrier_weight: float
    sharpness: float
    cost: float
    decrement: float  # |p.g|
    step_length: float
    slack: float

    HEADER = ("iteration", "mu", "gamma", "cost", "abs_pg", "alpha", "eps")

    def as_tuple(self):
        return (self.iteration, self.barrier_weight, self.sharpness,
                self.cost, self.decrement, self.step_length, self.slack)


@dataclass
class HorizonDecision:
    """Solved decision: the input sequence over the horizon and the slack.

    After a converged solve the inputs are strictly inside the box, the
    slack strictly exceeds its floor and every smoothed chance constraint
    holds strictly.
    """

    u_seq: np.ndarray  # (N+1, n_u)
    eps: float
    converged: bool
    n_iter: int
    barrier_weight: float
    sharpness: float
    trace: list[TraceRow] = field(default_factory=list)
    stall_reason: str | None = None


def _sample_arrays(samples):
    """(x_last, theta, w_fut) from a SampleSet-like object."""
    return (np.asarray(samples.x_last, dtype=float),
            np.asarray(samples.theta, dtype=float),
            np.asarray(samples.w_fut, dtype=float))


# -- forward simulation ------------------------------------------------------

def rollout(x0, u_applied, theta, u_seq, w, model: SystemModel) -> np.ndarray:
    """Simulate the horizon: N+1 chained transitions starting from the
    current state under the already-applied input, then the decision inputs.

    ``x0`` (M, n_x), ``theta`` (M, n_theta) and ``w`` (M, N+1, n_x) hold one
    entry per posterior sample; returns (M, N+1, n_x) future states.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    u_seq = np.asarray(u_seq, dtype=float).reshape(-1, model.n_u)
    u_applied = np.asarray(u_applied, dtype=float).reshape(model.n_u)
    n_steps = w.shape[1]
    if u_seq.shape[0] + 1 < n_steps:
        raise ValueError("decision sequence too short for the disturbance horizon")
    out = np.empty((x0.shape[0], n_steps, model.n_x))
    x = x0
    for s in range(n_steps):
        u_s = u_applied if s == 0 else u_seq[s - 1]
        x = model.transition(x, u_s, theta, w[:, s])
        out[:, s] = x
    if not np.all(np.isfinite(out)):
        raise ArithmeticError("non-finite state in predictive rollout")
    return out


def _rollout_with_sensitivities(x0, u_applied, theta, u_seq, w, model: SystemModel):
    """Future states plus d(state)/d(u_seq) with the decision flattened to
    (N+1)*n_u columns.  The first transition uses the applied input, so its
    sensitivity is zero."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    u_seq = np.asarray(u_seq, dtype=float).reshape(-1, model.n_u)
    u_applied = np.asarray(u_applied, dtype=float).reshape(model.n_u)
    m, n_x, n_u = x0.shape[0], model.n_x, model.n_u
    n_steps = w.shape[1]
    d_u = u_seq.shape[0] * n_u

    states = np.empty((m, n_steps, n_x))
    sens = np.empty((m, n_steps, n_x, d_u))
    s_cur = np.zeros((m, n_x, d_u))
    x = x0
    for s in range(n_steps):
        if s == 0:
            x = model.transition(x, u_applied, theta, w[:, s])
        else:
            u_s = u_seq[s - 1]
            jx = model.transition_jac(x, np.broadcast_to(u_s, (m, n_u)), theta)[0]
            ju = model.transition_jac_u(x, np.broadcast_to(u_s, (m, n_u)), theta)
            s_new = jx @ s_cur
            s_new[:, :, (s - 1) * n_u:s * n_u] += ju
            s_cur = s_new
            x = model.transition(x, u_s, theta, w[:, s])
        states[:, s] = x
        sens[:, s] = s_cur
    if not np.all(np.isfinite(states)):
        raise ArithmeticError("non-finite state in predictive rollout")
    return states, sens


# -- cost and constraints ----------------------------------------------------

def mc_cost(samples, u_applied, u_seq, problem: ControlProblem,
            model: SystemModel) -> float:
    """Sample-average quadratic horizon cost: state deviations from the
    setpoint weighted by ``state_weight`` plus the input quadratic."""
    x0, theta, w = _sample_arrays(samples)
    states = rollout(x0, u_applied, theta, u_seq, w, model)
    dev = states - problem.setpoint
    state_part = np.einsum("mki,ij,mkj->m", dev, problem.state_weight, dev).mean()
    u = np.asarray(u_seq, dtype=float).reshape(-1, model.n_u)
    input_part = np.einsum("ki,ij,kj->", u, problem.input_weight, u)
    return float(state_part + input_part)


def sigmoid(z, sharpness: float):
    """Logistic relaxation of the step indicator: 1 / (1 + exp(-z/sharpness)).

    Strictly increasing, sigmoid(z) + sigmoid(-z) = 1, and it approaches the
    indicator of {z >= 0} as the sharpness shrinks to zero.
    """
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    t = np.asarray(z, dtype=float) / sharpness
    e = np.exp(-np.abs(t))
    return np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _constraint_margins(states: np.ndarray, problem: ControlProblem) -> np.ndarray:
    """(M, n_margins) margins, one column per (constraint, horizon step)."""
    cols = [c.margins(states) for c in problem.state_constraints]
    return np.concatenate(cols, axis=1)


def chance_estimate(u_seq, sharpness, samples, problem: ControlProblem,
                    model: SystemModel, u_applied, with_derivatives: bool = False):
    """Smoothed satisfaction probabilities g_j(u, sharpness), one entry per
    (state constraint, horizon step).

    With ``with_derivatives`` also returns the gradient (n_margins, D) and
    the Gauss-Newton Hessian (n_margins, D, D) with respect to the flattened
    decision inputs.
    """
    if not problem.state_constraints:
        empty = np.zeros((0,))
        if with_derivatives:
            d = (problem.n_horizon + 1) * model.n_u
            return empty, np.zeros((0, d)), np.zeros((0, d, d))
        return empty
    x0, theta, w = _sample_arrays(samples)
    if not with_derivatives:
        states = rollout(x0, u_applied, theta, u_seq, w, model)
        return sigmoid(_constraint_margins(states, problem), sharpness).mean(axis=0)

    states, sens = _rollout_with_sensitivities(x0, u_applied, theta, u_seq, w, model)
    margins = _constraint_margins(states, problem)
    m_count = states.shape[0]
    # d margin / d u: +/- the state sensitivity row of the constrained dim
    dmdu = np.concatenate([
        (-1.0 if c.side == "upper" else 1.0) * sens[:, :, c.dim, :]
        for c in problem.state_constraints], axis=1)
    sig = sigmoid(margins, sharpness)
    d1 = sig * (1.0 - sig) / sharpness
    d2 = sig * (1.0 - sig) * (1.0 - 2.0 * sig) / sharpness**2
    g = sig.mean(axis=0)
    grad = np.einsum("mj,mjd->jd", d1, dmdu) / m_count
    hess = np.einsum("mj,mjd,mje->jde", d2, dmdu, dmdu, optimize=True) / m_count
    return g, grad, hess


# -- barrier objective -------------------------------------------------------

def barrier_cost(z, sharpness, barrier_weight, samples, problem: ControlProblem,
                 model: SystemModel, u_applied):
    """Value, gradient and Hessian of the log-barrier objective at
    z = (flattened inputs, slack).

    Raises :class:`InfeasibleError` when any barrier argument is
    non-positive; numeric overflow inside a feasible evaluation surfaces as
    :class:`ArithmeticError` instead.
    """
    z = np.asarray(z, dtype=float)
    dim = z.size
    n_u = problem.n_u
    k = problem.n_horizon + 1
    if dim != k * n_u + 1:
        raise ValueError(f"decision must have dimension {k * n_u + 1}, got {dim}")
    u_flat, eps = z[:-1], float(z[-1])
    u_seq = u_flat.reshape(k, n_u)
    mu = float(barrier_weight)

    lo = np.tile(problem.input_lower, k)
    hi = np.tile(problem.input_upper, k)
    lo_margin = u_flat - lo
    hi_margin = hi - u_flat
    if np.any(lo_margin[np.isfinite(lo)] <= 0) or np.any(hi_margin[np.isfinite(hi)] <= 0):
        raise InfeasibleError("input outside its box")
    if eps <= problem.slack_floor:
        raise InfeasibleError("slack at or below its floor")

    x0, theta, w = _sample_arrays(samples)
    states, sens = _rollout_with_sensitivities(x0, u_applied, theta, u_seq, w, model)
    m_count = states.shape[0]

    grad = np.zeros(dim)
    hess = np.zeros((dim, dim))

    # quadratic sampled cost
    dev = states - problem.setpoint
    qdev = dev @ problem.state_weight  # (M, K, n_x)
    value = float(np.einsum("mki,mki->", dev, qdev)) / m_count
    grad[:-1] += 2.0 * np.einsum("mki,mkid->d", qdev, sens) / m_count
    hess[:-1, :-1] += 2.0 * np.einsum(
        "mkid,ij,mkje->de", sens, problem.state_weight, sens, optimize=True) / m_count
    r_block = np.kron(np.eye(k), problem.input_weight)
    value += float(u_flat @ r_block @ u_flat)
    grad[:-1] += 2.0 * r_block @ u_flat
    hess[:-1, :-1] += 2.0 * r_block

    # slack penalty and its barrier
    value += problem.slack_weight * (eps - problem.slack_offset) ** 2
    grad[-1] += 2.0 * problem.slack_weight * (eps - problem.slack_offset)
    hess[-1, -1] += 2.0 * problem.slack_weight
    gap = eps - problem.slack_floor
    value -= mu * np.log(gap)
    grad[-1] -= mu / gap
    hess[-1, -1] += mu / gap**2

    # input box barriers (finite sides only)
    for margin, sign in ((lo_margin, -1.0), (hi_margin, 1.0)):
        finite = np.isfinite(margin)
        if np.any(finite):
            value -= mu * float(np.sum(np.log(margin[finite])))
            g_terms = np.where(finite, mu / np.where(finite, margin, 1.0), 0.0)
            grad[:-1] += sign * g_terms
            hess[:dim - 1, :dim - 1][np.diag_indices(dim - 1)] += np.where(
                finite, mu / np.where(finite, margin, 1.0) ** 2, 0.0)

    # smoothed chance constraints
    if problem.state_constraints:
        margins = _constraint_margins(states, problem)
        dmdu = np.concatenate([
            (-1.0 if c.side == "upper" else 1.0) * sens[:, :, c.dim, :]
            for c in problem.state_constraints], axis=1)
        sig = sigmoid(margins, sharpness)
        d1 = sig * (1.0 - sig) / sharpness
        d2 = sig * (1.0 - sig) * (1.0 - 2.0 * sig) / sharpness**2
        g = sig.mean(axis=0)
        barrier_arg = g - 1.0 + eps
        if np.any(barrier_arg <= 0):
            raise InfeasibleError("smoothed chance constraint violated")
        g_grad = np.einsum("mj,mjd->jd", d1, dmdu) / m_count
        g_hess = np.einsum("mj,mjd,mje->jde", d2, dmdu, dmdu, optimize=True) / m_count

        value -= mu * float(np.sum(np.log(barrier_arg)))
        inv = 1.0 / barrier_arg
        inv2 = inv * inv
        grad[:-1] -= mu * np.einsum("j,jd->d", inv, g_grad)
        grad[-1] -= mu * float(np.sum(inv))
        hess[:-1, :-1] += mu * (np.einsum("j,jd,je->de", inv2, g_grad, g_grad)
                                - np.einsum("j,jde->de", inv, g_hess))
        cross = mu * np.einsum("j,jd->d", inv2, g_grad)
        hess[:-1, -1] += cross
        hess[-1, :-1] += cross
        hess[-1, -1] += mu * float(np.sum(inv2))

    if not (np.isfinite(value) and np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
        raise ArithmeticError("numeric overflow in barrier evaluation")
    return value, grad, hess


# -- Newton continuation -----------------------------------------------------

@dataclass(frozen=True)
class NewtonInfo:
    decrement: float  # p.g (negative for a descent direction)
    step_length: float
    cost_before: float
    cost_after: float


def _descent_direction(grad: np.ndarray, hess: np.ndarray, lam: float):
    """Direction from the (damped) Newton system, inflating the damping
    until it points downhill.  Returns (direction, damping used)."""
    eye = np.eye(hess.shape[0])
    for _ in range(80):
        try:
            p = np.linalg.solve(hess + lam * eye if lam else hess, -grad)
        except np.linalg.LinAlgError:
            p = None
        if p is not None and np.isfinite(p).all() and p @ grad < 0:
            return p, lam
        lam = 10.0 * lam if lam else 1e-6 * (1.0 + float(np.max(np.abs(np.diag(hess)))))
    raise SolverStallError("could not produce a descent direction")


def newton_inner(z, fun, armijo_c: float = 1e-4, max_halvings: int = 60):
    """One damped Newton step on ``fun(z) -> (value, grad, hess)``.

    The direction solves the Newton system with just enough Tikhonov
    damping to point downhill; the step is clipped to stay inside the
    barrier domain (``fun`` signals exits with :class:`InfeasibleError`)
    and backtracked under the Armijo condition.  If no step length is
    accepted — which happens when extreme sample scales leave the system
    too ill-conditioned for a meaningful Newton direction — the damping is
    escalated so the direction degrades gracefully toward scaled gradient
    descent.  Raises :class:`SolverStallError` only when even that cannot
    produce a representable decrease.
    """
    z = np.asarray(z, dtype=float)
    value, grad, hess = fun(z)
    if np.linalg.norm(grad) == 0.0:
        return z, NewtonInfo(0.0, 0.0, value, value)

    lam = 0.0
    for _ in range(8):
        p, lam = _descent_direction(grad, hess, lam)
        pg = float(p @ grad)
        alpha = 1.0
        for _ in range(max_halvings):
            try:
                trial_value, _, _ = fun(z + alpha * p)
            except (InfeasibleError, ArithmeticError):
                alpha *= 0.5
                continue
            if trial_value < value + armijo_c * alpha * pg:
                return z + alpha * p, NewtonInfo(pg, alpha, value, trial_value)
            alpha *= 0.5
        lam = max(1e3 * lam, 1e-6 * (1.0 + float(np.max(np.abs(np.diag(hess))))))
    raise SolverStallError("line search exhausted its halvings")


def _initial_inputs(problem: ControlProblem) -> np.ndarray:
    """Strictly feasible starting inputs: box midpoint when both sides are
    finite, one unit inside a single finite side, zero when unbounded."""
    lo, hi = problem.input_lower, problem.input_upper
    u = np.zeros(problem.n_u)
    both = np.isfinite(lo) & np.isfinite(hi)
    u[both] = 0.5 * (lo[both] + hi[both])
    only_lo = np.isfinite(lo) & ~np.isfinite(hi)
    u[only_lo] = np.maximum(0.0, lo[only_lo] + 1.0)
    only_hi = ~np.isfinite(lo) & np.isfinite(hi)
    u[only_hi] = np.minimum(0.0, hi[only_hi] - 1.0)
    return np.tile(u, (problem.n_horizon + 1, 1))


def _reinit_slack(u_seq, sharpness, samples, problem, model, u_applied,
                  margin: float = 1e-6) -> float:
    """Smallest strictly feasible slack (plus ``margin``) for the inputs.

    Between continuation stages the margin is kept tiny so the slack tracks
    the central path; the first initialisation uses a generous margin to
    start well inside the barrier domain.
    """
    if not problem.state_constraints:
        return problem.slack_floor + 0.1
    g = chance_estimate(u_seq, sharpness, samples, problem, model, u_applied)
    return max(problem.slack_floor + margin, 1.0 - float(g.min()) + margin)


def control_action(samples, u_applied, problem: ControlProblem,
                   model: SystemModel,
                   continuation: ContinuationState | None = None,
                   u_init: np.ndarray | None = None) -> HorizonDecision:
    """Solve the chance-constrained horizon problem by barrier continuation.

    Runs damped Newton steps until the decrement drops below the inner
    tolerance, then shrinks the barrier weight and the sigmoid sharpness
    toward their floors (re-initialising the slack to stay strictly
    feasible) and repeats; terminates once inner-converged at the floors.
    On ``max_iter`` exhaustion or a line-search stall the last iterate is
    returned flagged as non-converged.
    """
    cont = continuation or ContinuationState()
    k = problem.n_horizon + 1

    if u_init is None:
        u_seq = _initial_inputs(problem)
    else:
        u_seq = np.asarray(u_init, dtype=float).reshape(k, problem.n_u).copy()
        # a warm start must sit strictly inside the box
        span = np.where(np.isfinite(problem.input_upper - problem.input_lower),
                        problem.input_upper - problem.input_lower, 2.0)
        pad = 1e-9 * span
        u_seq = np.clip(u_seq, problem.input_lower + pad, problem.input_upper - pad)

    mu = cont.barrier_weight
    gamma = cont.sharpness
    eps = _reinit_slack(u_seq, gamma, samples, problem, model, u_applied, margin=0.1)
    z = np.concatenate([u_seq.ravel(), [eps]])

    trace: list[TraceRow] = []
    converged = False
    stall_reason = None
    it = 0
    last_cost = np.inf
    eps_mach = np.finfo(float).eps
    while it < cont.max_iter:
        fun = lambda zz: barrier_cost(zz, gamma, mu, samples, problem, model, u_applied)
        at_floors = mu <= cont.barrier_floor and gamma <= cont.sharpness_floor
        try:
            z, info = newton_inner(z, fun, cont.armijo)
            it += 1
            trace.append(TraceRow(it, mu, gamma, info.cost_after,
                                  abs(info.decrement), info.step_length, float(z[-1])))
            last_cost = info.cost_after
            # an absolute decrement below the float-noise scale of the cost
            # itself cannot be certified; treat the stage as solved there
            stage_tol = max(cont.inner_tol, 64.0 * eps_mach * abs(last_cost))
            stage_done = abs(info.decrement) < stage_tol
        except SolverStallError as exc:
            # no representable decrease left at this stage
            it += 1
            stage_done = True
            if at_floors:
                stage_tol = max(cont.inner_tol, 64.0 * eps_mach * abs(last_cost))
                converged = bool(trace and trace[-1].decrement < stage_tol)
                stall_reason = None if converged else str(exc)
                break
        if stage_done:
            if at_floors:
                converged = True
                break
            mu = max(cont.barrier_shrink * mu, cont.barrier_floor)
            gamma = max(cont.sharpness_shrink * gamma, cont.sharpness_floor)
            u_seq = z[:-1].reshape(k, problem.n_u)
            z[-1] = _reinit_slack(u_seq, gamma, samples, problem, model, u_applied)

    return HorizonDecision(
        u_seq=z[:-1].reshape(k, problem.n_u).copy(),
        eps=float(z[-1]),
        converged=converged,
        n_iter=it,
        barrier_weight=mu,
        sharpness=gamma,
        trace=trace,
        stall_reason=stall_reason,
    )
