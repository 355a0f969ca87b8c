"""State-space plant models used throughout the toolkit.

Two concrete plants are provided: a scalar first-order linear system and a
rotary inverted pendulum driven by motor voltage.  Both are expressed as a
discrete-time nonlinear state-space model

    x_{k+1} = f(x_k, u_k, theta, w_k),      y_k = h(x_k, u_k, theta, e_k),

with additive Gaussian process noise w and measurement noise e.  The same
model object serves truth simulation, posterior inference and predictive
rollouts, so every map comes with the mean/Jacobian machinery the other
modules need.

Conventions
-----------
Arrays broadcast over leading axes: states are (..., n_x), inputs (..., n_u),
parameter vectors (..., n_theta).  The pendulum state is
[arm angle, pendulum angle, arm rate, pendulum rate]; angle 0 is the hanging
equilibrium and +/-pi is upright (gravity torque -0.5*m_p*L_p*g*sin(alpha)
restores toward 0).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable

import numpy as np

__all__ = [
    "ParamTransform",
    "SystemModel",
    "LinearFirstOrderParams",
    "FurutaParams",
    "linear_step",
    "make_linear_model",
    "linear_theta",
    "furuta_continuous_dynamics",
    "furuta_mass_matrix",
    "furuta_energy",
    "rk4_step",
    "make_furuta_model",
    "furuta_theta",
    "load_furuta_params",
    "simulate_truth",
]


class ParamTransform:
    """Per-parameter bijection between constrained values and the
    unconstrained space used for inference.

    Supported kinds: ``"identity"`` and ``"log"`` (positive parameters are
    sampled as their logarithm).
    """

    def __init__(self, kinds: tuple[str, ...]):
        for k in kinds:
            if k not in ("identity", "log"):
                raise ValueError(f"unknown transform kind {k!r}")
        self.kinds = tuple(kinds)
        self._log_mask = np.array([k == "log" for k in kinds])

    def __len__(self) -> int:
        return len(self.kinds)

    def to_unconstrained(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        phi = theta.copy()
        phi[..., self._log_mask] = np.log(theta[..., self._log_mask])
        return phi

    def to_constrained(self, phi: np.ndarray) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        theta = phi.copy()
        theta[..., self._log_mask] = np.exp(phi[..., self._log_mask])
        return theta

    def constrained_jac_diag(self, phi: np.ndarray) -> np.ndarray:
        """Diagonal of d(theta)/d(phi) evaluated at phi."""
        phi = np.asarray(phi, dtype=float)
        jac = np.ones_like(phi)
        jac[..., self._log_mask] = np.exp(phi[..., self._log_mask])
        return jac

    def log_abs_det_jac(self, phi: np.ndarray) -> np.ndarray:
        """log |d(theta)/d(phi)|, summed over parameters."""
        phi = np.asarray(phi, dtype=float)
        return phi[..., self._log_mask].sum(axis=-1)


@dataclass
class SystemModel:
    """A discrete-time state-space model plus the derivative structure used
    by the posterior density and the predictive rollouts.

    ``transition``/``measurement`` are the full noisy maps of the model
    class; the ``*_mean`` variants evaluate them at zero noise.  Jacobians
    are with respect to the state, the constrained parameter vector and
    (for the transition) the input.  Noise enters additively with
    per-component standard deviations ``process_std(theta)`` and
    ``meas_std(theta)``.
    """

    name: str
    n_x: int
    n_u: int
    n_y: int
    n_theta: int
    param_names: tuple[str, ...]
    param_transform: ParamTransform
    transition: Callable  # (x, u, theta, w) -> x'
    measurement: Callable  # (x, u, theta, e) -> y
    transition_mean: Callable  # (x, u, theta) -> x'
    measurement_mean: Callable  # (x, u, theta) -> y
    transition_jac: Callable  # (x, u, theta) -> (d/dx (...,n_x,n_x), d/dtheta (...,n_x,n_theta))
    transition_jac_u: Callable  # (x, u, theta) -> (..., n_x, n_u)
    measurement_jac: Callable  # (x, u, theta) -> (d/dx (...,n_y,n_x), d/dtheta (...,n_y,n_theta))
    process_std: Callable  # theta -> (..., n_x)
    process_std_jac: Callable  # theta -> (..., n_x, n_theta)
    meas_std: Callable  # theta -> (..., n_y)
    meas_std_jac: Callable  # theta -> (..., n_y, n_theta)
    init_state_traj: Callable  # (y_hist, u_hist) -> (t, n_x) rough state guess
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for label, n in (("n_x", self.n_x), ("n_u", self.n_u),
                         ("n_y", self.n_y), ("n_theta", self.n_theta)):
            if n < 1:
                raise ValueError(f"{label} must be >= 1, got {n}")
        if len(self.param_names) != self.n_theta:
            raise ValueError("param_names length does not match n_theta")
        if len(self.param_transform) != self.n_theta:
            raise ValueError("param_transform length does not match n_theta")


# ---------------------------------------------------------------------------
# Linear first-order plant: x' = a x + b u + w,  y = x + e
# ---------------------------------------------------------------------------

@dataclass
class LinearFirstOrderParams:
    """Parameters of the scalar plant x' = a x + b u + w, y = x + e."""

    a: float = 0.9
    b: float = 0.1
    q: float = 0.05  # process noise std
    r: float = 0.01  # measurement noise std

    def __post_init__(self):
        if self.q <= 0 or self.r <= 0:
            raise ValueError("noise scales q and r must be positive")


def linear_step(x, u, w, p: LinearFirstOrderParams):
    """One step of the scalar plant: a*x + b*u + w."""
    return p.a * np.asarray(x, dtype=float) + p.b * np.asarray(u, dtype=float) + w


def linear_theta(p: LinearFirstOrderParams) -> np.ndarray:
    """Constrained parameter vector [a, b, q, r] for the linear model."""
    return np.array([p.a, p.b, p.q, p.r], dtype=float)


def make_linear_model() -> SystemModel:
    """Scalar first-order model with theta = [a, b, q, r]."""

    def mean_f(x, u, theta):
        return theta[..., 0:1] * x + theta[..., 1:2] * u

    def mean_h(x, u, theta):
        return x.copy() if isinstance(x, np.ndarray) else np.asarray(x, dtype=float)

    def jac_f(x, u, theta):
        shape = np.broadcast_shapes(x.shape[:-1], theta.shape[:-1], u.shape[:-1])
        jx = np.broadcast_to(theta[..., 0:1, None], shape + (1, 1))
        jth = np.zeros(shape + (1, 4))
        jth[..., 0, 0] = x[..., 0]
        jth[..., 0, 1] = u[..., 0]
        return jx, jth

    def jac_f_u(x, u, theta):
        shape = np.broadcast_shapes(x.shape[:-1], theta.shape[:-1], u.shape[:-1])
        return np.broadcast_to(theta[..., 1:2, None], shape + (1, 1))

    def jac_h(x, u, theta):
        shape = np.broadcast_shapes(x.shape[:-1], theta.shape[:-1], u.shape[:-1])
        jx = np.broadcast_to(np.eye(1), shape + (1, 1))
        jth = np.zeros(shape + (1, 4))
        return jx, jth

    def q_std(theta):
        return theta[..., 2:3]

    def q_std_jac(theta):
        out = np.zeros(theta.shape[:-1] + (1, 4))
        out[..., 0, 2] = 1.0
        return out

    def r_std(theta):
        return theta[..., 3:4]

    def r_std_jac(theta):
        out = np.zeros(theta.shape[:-1] + (1, 4))
        out[..., 0, 3] = 1.0
        return out

    def init_traj(y_hist, u_hist):
        return np.asarray(y_hist, dtype=float).reshape(-1, 1).copy()

    return SystemModel(
        name="linear_first_order",
        n_x=1, n_u=1, n_y=1, n_theta=4,
        param_names=("a", "b", "q", "r"),
        param_transform=ParamTransform(("identity", "identity", "log", "log")),
        transition=lambda x, u, theta, w: mean_f(x, u, theta) + w,
        measurement=lambda x, u, theta, e: mean_h(x, u, theta) + e,
        transition_mean=mean_f,
        measurement_mean=mean_h,
        transition_jac=jac_f,
        transition_jac_u=jac_f_u,
        measurement_jac=jac_h,
        process_std=q_std,
        process_std_jac=q_std_jac,
        meas_std=r_std,
        meas_std_jac=r_std_jac,
        init_state_traj=init_traj,
    )


# ---------------------------------------------------------------------------
# Rotary inverted pendulum
# ---------------------------------------------------------------------------

@dataclass
class FurutaParams:
    """Physical parameters of the rotary pendulum (QUBE-Servo 2 class rig).

    ``sigma_diag`` is the diagonal of the joint noise covariance for
    (w_t, e_t): four process-noise variances followed by three
    measurement-noise variances (arm encoder, pendulum encoder, motor
    current).  ``h`` is the sampling interval in seconds.
    """

    m_p: float  # pendulum mass [kg]
    L_r: float  # rotary arm length [m]
    L_p: float  # pendulum length [m]
    J_r: float  # arm inertia [kg m^2]
    J_p: float  # pendulum inertia [kg m^2]
    R_m: float  # motor resistance [ohm]
    k_m: float  # motor constant [V s/rad]
    D_r: float  # arm damping [N m s/rad]
    D_p: float  # pendulum damping [N m s/rad]
    g: float = 9.81
    h: float = 0.025
    sigma_diag: tuple[float, ...] = (9e-8, 1e-8, 1.69e-4, 1.69e-4,
                                     1.21e-6, 1e-6, 3.0625e-2)

    def __post_init__(self):
        positives = {
            "m_p": self.m_p, "L_r": self.L_r, "L_p": self.L_p,
            "J_r": self.J_r, "J_p": self.J_p, "R_m": self.R_m,
            "k_m": self.k_m, "D_r": self.D_r, "D_p": self.D_p,
            "g": self.g, "h": self.h,
        }
        for name, value in positives.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        self.sigma_diag = tuple(float(v) for v in self.sigma_diag)
        if len(self.sigma_diag) != 7 or any(v <= 0 for v in self.sigma_diag):
            raise ValueError("sigma_diag must hold 7 positive variances")

    @property
    def process_std(self) -> np.ndarray:
        return np.sqrt(np.array(self.sigma_diag[:4]))

    @property
    def meas_std(self) -> np.ndarray:
        return np.sqrt(np.array(self.sigma_diag[4:]))


def load_furuta_params(path: str | None = None) -> FurutaParams:
    """Load pendulum parameters from JSON (default: bundled rig file)."""
    if path is None:
        text = resources.files("bayesmpc.configs").joinpath("qube_servo2.json").read_text()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    raw = json.loads(text)
    return FurutaParams(**raw)


def furuta_mass_matrix(alpha, p: FurutaParams) -> np.ndarray:
    """Generalized inertia matrix M(alpha), shape (..., 2, 2)."""
    alpha = np.asarray(alpha, dtype=float)
    A = 0.25 * p.m_p * p.L_p ** 2
    s = np.sin(alpha)
    m11 = p.J_r + p.m_p * p.L_r ** 2 + A * s ** 2
    m12 = 0.5 * p.m_p * p.L_p * p.L_r * np.cos(alpha)
    m22 = np.full_like(alpha, p.J_p + A)
    return np.stack([np.stack([m11, m12], axis=-1),
                     np.stack([m12, m22], axis=-1)], axis=-2)


def _furuta_accel(x, volts, J_r, J_p, k_m, R_m, D_p, D_r, m_p, L_r, L_p, g):
    """Angular accelerations of the pendulum, solving the 2x2 joint-space
    system in closed form.  All arguments broadcast."""
    alpha = x[..., 1]
    w1 = x[..., 2]
    w2 = x[..., 3]
    c = np.cos(alpha)
    s = np.sin(alpha)
    A = 0.25 * m_p * L_p ** 2
    B = 0.5 * m_p * L_p * L_r
    C = 0.5 * m_p * L_p * g

    m11 = J_r + m_p * L_r ** 2 + A * s ** 2
    m12 = B * c
    m22 = J_p + A
    det = m11 * m22 - m12 ** 2

    tau = k_m * (volts - k_m * w1) / R_m
    d1 = tau - D_r * w1 - 2.0 * A * s * c * w1 * w2 + B * s * w2 ** 2
    d2 = -D_p * w2 + A * c * s * w1 ** 2 - C * s

    acc1 = (m22 * d1 - m12 * d2) / det
    acc2 = (m11 * d2 - m12 * d1) / det
    return acc1, acc2


def furuta_continuous_dynamics(x, v_m, p: FurutaParams) -> np.ndarray:
    """Continuous-time state derivative [arm rate, pend rate, arm accel,
    pend accel] under motor voltage ``v_m``."""
    x = np.asarray(x, dtype=float)
    v_m = np.asarray(v_m, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v_m))):
        raise ValueError("non-finite state or input")
    acc1, acc2 = _furuta_accel(
        x, v_m, p.J_r, p.J_p, p.k_m, p.R_m, p.D_p, p.D_r,
        p.m_p, p.L_r, p.L_p, p.g,
    )
    return np.stack([x[..., 2], x[..., 3],
                     np.broadcast_to(acc1, x[..., 0].shape),
                     np.broadcast_to(acc2, x[..., 0].shape)], axis=-1)


def furuta_energy(x, p: FurutaParams) -> np.ndarray:
    """Total mechanical energy, zero reference at rest hanging down."""
    x = np.asarray(x, dtype=float)
    M = furuta_mass_matrix(x[..., 1], p)
    qdot = x[..., 2:4]
    kinetic = 0.5 * np.einsum("...i,...ij,...j->...", qdot, M, qdot)
    potential = 0.5 * p.m_p * p.L_p * p.g * (1.0 - np.cos(x[..., 1]))
    return kinetic + potential


def rk4_step(dynamics: Callable, x, u, h: float):
    """Classical 4th-order Runge-Kutta step with the input held constant
    (zero-order hold) over the interval."""
    if h <= 0:
        raise ValueError("step size h must be positive")
    x = np.asarray(x, dtype=float)
    k1 = dynamics(x, u)
    k2 = dynamics(x + 0.5 * h * k1, u)
    k3 = dynamics(x + 0.5 * h * k2, u)
    k4 = dynamics(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# Inference parameter vector for the pendulum: six physical parameters and
# seven noise scales (stds, not variances), all positive.
_FURUTA_PARAM_NAMES = ("J_r", "J_p", "k_m", "R_m", "D_p", "D_r",
                       "q1", "q2", "q3", "q4", "r1", "r2", "r3")


def furuta_theta(p: FurutaParams) -> np.ndarray:
    """Constrained inference vector for the pendulum model."""
    return np.concatenate([
        np.array([p.J_r, p.J_p, p.k_m, p.R_m, p.D_p, p.D_r]),
        p.process_std,
        p.meas_std,
    ])


def _furuta_dyn_theta(x, u, theta, p: FurutaParams):
    """Continuous dynamics with the six physical parameters taken from a
    (batched) inference vector; mass/lengths/gravity come from ``p``."""
    volts = u[..., 0]
    acc1, acc2 = _furuta_accel(
        x, volts,
        theta[..., 0], theta[..., 1], theta[..., 2], theta[..., 3],
        theta[..., 4], theta[..., 5],
        p.m_p, p.L_r, p.L_p, p.g,
    )
    shape = np.broadcast_shapes(x[..., 0].shape, acc1.shape)
    return np.stack([np.broadcast_to(x[..., 2], shape),
                     np.broadcast_to(x[..., 3], shape),
                     np.broadcast_to(acc1, shape),
                     np.broadcast_to(acc2, shape)], axis=-1)


def _furuta_dyn_jac_theta(x, u, theta, p: FurutaParams, n_theta: int):
    """Jacobians of the continuous dynamics w.r.t. state, inference vector
    and input.  Returns (Gx, Gth, Gu) with shapes (...,4,4), (...,4,n_theta)
    and (...,4,1)."""
    volts = u[..., 0]
    J_r, J_p = theta[..., 0], theta[..., 1]
    k_m, R_m = theta[..., 2], theta[..., 3]
    D_p, D_r = theta[..., 4], theta[..., 5]
    alpha = x[..., 1]
    w1 = x[..., 2]
    w2 = x[..., 3]
    c = np.cos(alpha)
    s = np.sin(alpha)
    A = 0.25 * p.m_p * p.L_p ** 2
    B = 0.5 * p.m_p * p.L_p * p.L_r
    C = 0.5 * p.m_p * p.L_p * p.g

    m11 = J_r + p.m_p * p.L_r ** 2 + A * s ** 2
    m12 = B * c
    m22 = J_p + A
    det = m11 * m22 - m12 ** 2

    tau = k_m * (volts - k_m * w1) / R_m
    d1 = tau - D_r * w1 - 2.0 * A * s * c * w1 * w2 + B * s * w2 ** 2
    d2 = -D_p * w2 + A * c * s * w1 ** 2 - C * s
    acc1 = (m22 * d1 - m12 * d2) / det
    acc2 = (m11 * d2 - m12 * d1) / det

    shape = np.broadcast_shapes(x[..., 0].shape, det.shape)

    # d/dalpha
    dm11 = 2.0 * A * s * c
    dm12 = -B * s
    ddet = dm11 * m22 - 2.0 * m12 * dm12
    dd1 = -2.0 * A * (c ** 2 - s ** 2) * w1 * w2 + B * c * w2 ** 2
    dd2 = A * (c ** 2 - s ** 2) * w1 ** 2 - C * c
    dacc1_da = (m22 * dd1 - dm12 * d2 - m12 * dd2) / det - acc1 * ddet / det
    dacc2_da = (dm11 * d2 + m11 * dd2 - dm12 * d1 - m12 * dd1) / det - acc2 * ddet / det

    # d/dw1
    dd1 = -k_m ** 2 / R_m - D_r - 2.0 * A * s * c * w2
    dd2 = 2.0 * A * c * s * w1
    dacc1_dw1 = (m22 * dd1 - m12 * dd2) / det
    dacc2_dw1 = (m11 * dd2 - m12 * dd1) / det

    # d/dw2
    dd1 = -2.0 * A * s * c * w1 + 2.0 * B * s * w2
    dd2 = np.broadcast_to(-D_p, shape)
    dacc1_dw2 = (m22 * dd1 - m12 * dd2) / det
    dacc2_dw2 = (m11 * dd2 - m12 * dd1) / det

    zero = np.zeros(shape)
    one = np.ones(shape)
    gx = np.stack([
        np.stack([zero, zero, one, zero], axis=-1),
        np.stack([zero, zero, zero, one], axis=-1),
        np.stack([zero, np.broadcast_to(dacc1_da, shape),
                  np.broadcast_to(dacc1_dw1, shape),
                  np.broadcast_to(dacc1_dw2, shape)], axis=-1),
        np.stack([zero, np.broadcast_to(dacc2_da, shape),
                  np.broadcast_to(dacc2_dw1, shape),
                  np.broadcast_to(dacc2_dw2, shape)], axis=-1),
    ], axis=-2)

    gth = np.zeros(shape + (4, n_theta))
    # J_r: m11 shifts
    gth[..., 2, 0] = -acc1 * m22 / det
    gth[..., 3, 0] = d2 / det - acc2 * m22 / det
    # J_p: m22 shifts
    gth[..., 2, 1] = d1 / det - acc1 * m11 / det
    gth[..., 3, 1] = -acc2 * m11 / det
    # k_m and R_m act through the motor torque
    dtau_dkm = (volts - 2.0 * k_m * w1) / R_m
    dtau_dRm = -tau / R_m
    gth[..., 2, 2] = m22 * dtau_dkm / det
    gth[..., 3, 2] = -m12 * dtau_dkm / det
    gth[..., 2, 3] = m22 * dtau_dRm / det
    gth[..., 3, 3] = -m12 * dtau_dRm / det
    # damping terms
    gth[..., 2, 4] = m12 * w2 / det
    gth[..., 3, 4] = -m11 * w2 / det
    gth[..., 2, 5] = -m22 * w1 / det
    gth[..., 3, 5] = m12 * w1 / det

    dtau_du = k_m / R_m
    gu = np.zeros(shape + (4, 1))
    gu[..., 2, 0] = m22 * dtau_du / det
    gu[..., 3, 0] = -m12 * dtau_du / det
    return gx, gth, gu


def make_furuta_model(p: FurutaParams | None = None) -> SystemModel:
    """Pendulum model with theta = [J_r, J_p, k_m, R_m, D_p, D_r,
    q1..q4, r1..r3]; mass, lengths and gravity are treated as known."""
    if p is None:
        p = load_furuta_params()
    n_theta = len(_FURUTA_PARAM_NAMES)
    h = p.h

    def mean_f(x, u, theta):
        return rk4_step(lambda xs, us: _furuta_dyn_theta(xs, us, theta, p), x, u, h)

    def jac_f(x, u, theta):
        jx, jth, _ = _rk4_jacobians(x, u, theta, p, n_theta, h)
        return jx, jth

    def jac_f_u(x, u, theta):
        _, _, ju = _rk4_jacobians(x, u, theta, p, n_theta, h)
        return ju

    def mean_h(x, u, theta):
        current = (u[..., 0] - theta[..., 2] * x[..., 2]) / theta[..., 3]
        shape = np.broadcast_shapes(x[..., 0].shape, current.shape)
        return np.stack([np.broadcast_to(x[..., 0], shape),
                         np.broadcast_to(x[..., 1], shape),
                         np.broadcast_to(current, shape)], axis=-1)

    def jac_h(x, u, theta):
        k_m, R_m = theta[..., 2], theta[..., 3]
        shape = np.broadcast_shapes(x[..., 0].shape, k_m.shape, u[..., 0].shape)
        jx = np.zeros(shape + (3, 4))
        jx[..., 0, 0] = 1.0
        jx[..., 1, 1] = 1.0
        jx[..., 2, 2] = -k_m / R_m
        jth = np.zeros(shape + (3, n_theta))
        jth[..., 2, 2] = -x[..., 2] / R_m
        jth[..., 2, 3] = -(u[..., 0] - k_m * x[..., 2]) / R_m ** 2
        return jx, jth

    def q_std(theta):
        return theta[..., 6:10]

    def q_std_jac(theta):
        out = np.zeros(theta.shape[:-1] + (4, n_theta))
        for i in range(4):
            out[..., i, 6 + i] = 1.0
        return out

    def r_std(theta):
        return theta[..., 10:13]

    def r_std_jac(theta):
        out = np.zeros(theta.shape[:-1] + (3, n_theta))
        for i in range(3):
            out[..., i, 10 + i] = 1.0
        return out

    def init_traj(y_hist, u_hist):
        y = np.asarray(y_hist, dtype=float).reshape(-1, 3)
        t = y.shape[0]
        x = np.zeros((t, 4))
        x[:, 0] = y[:, 0]
        x[:, 1] = y[:, 1]
        if t >= 2:
            x[:, 2] = np.gradient(y[:, 0]) / h
            x[:, 3] = np.gradient(y[:, 1]) / h
        return x

    return SystemModel(
        name="furuta",
        n_x=4, n_u=1, n_y=3, n_theta=n_theta,
        param_names=_FURUTA_PARAM_NAMES,
        param_transform=ParamTransform(("log",) * n_theta),
        transition=lambda x, u, theta, w: mean_f(x, u, theta) + w,
        measurement=lambda x, u, theta, e: mean_h(x, u, theta) + e,
        transition_mean=mean_f,
        measurement_mean=mean_h,
        transition_jac=jac_f,
        transition_jac_u=jac_f_u,
        measurement_jac=jac_h,
        process_std=q_std,
        process_std_jac=q_std_jac,
        meas_std=r_std,
        meas_std_jac=r_std_jac,
        init_state_traj=init_traj,
        extras={"physical": p},
    )


def _rk4_jacobians(x, u, theta, p: FurutaParams, n_theta: int, h: float):
    """Jacobians of the RK4-discretized pendulum step by chaining the stage
    derivatives.  Only the first six theta components enter the dynamics;
    the noise-scale columns stay zero."""
    def dyn(xs):
        return _furuta_dyn_theta(xs, u, theta, p)

    def dyn_jac(xs):
        return _furuta_dyn_jac_theta(xs, u, theta, p, n_theta)

    eye = np.eye(4)
    k1 = dyn(x)
    g1x, g1t, g1u = dyn_jac(x)
    x2 = x + 0.5 * h * k1
    k2 = dyn(x2)
    g2x, g2t, g2u = dyn_jac(x2)
    x3 = x + 0.5 * h * k2
    k3 = dyn(x3)
    g3x, g3t, g3u = dyn_jac(x3)
    x4 = x + h * k3
    g4x, g4t, g4u = dyn_jac(x4)

    a1 = g1x
    a2 = g2x @ (eye + 0.5 * h * a1)
    a3 = g3x @ (eye + 0.5 * h * a2)
    a4 = g4x @ (eye + h * a3)
    jx = eye + (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)

    b1 = g1t
    b2 = g2t + g2x @ (0.5 * h * b1)
    b3 = g3t + g3x @ (0.5 * h * b2)
    b4 = g4t + g4x @ (h * b3)
    jth = (h / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4)

    c1 = g1u
    c2 = g2u + g2x @ (0.5 * h * c1)
    c3 = g3u + g3x @ (0.5 * h * c2)
    c4 = g4u + g4x @ (h * c3)
    ju = (h / 6.0) * (c1 + 2.0 * c2 + 2.0 * c3 + c4)
    return jx, jth, ju


# ---------------------------------------------------------------------------
# Truth simulation
# ---------------------------------------------------------------------------

def simulate_truth(model: SystemModel, theta_true: np.ndarray, x0: np.ndarray,
                   inputs: np.ndarray, rng: int | np.random.Generator):
    """Simulate the plant under a fixed input sequence.

    Returns ``(states, measurements)`` with states of shape (T+1, n_x)
    (``states[0]`` is ``x0``) and measurements of shape (T, n_y), where
    ``measurements[k]`` observes ``states[k]`` under ``inputs[k]``.
    Deterministic for a given seed or generator.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    theta_true = np.asarray(theta_true, dtype=float)
    inputs = np.asarray(inputs, dtype=float).reshape(-1, model.n_u)
    T = inputs.shape[0]
    q = model.process_std(theta_true)
    r = model.meas_std(theta_true)
    w = rng.normal(size=(T, model.n_x)) * q
    e = rng.normal(size=(T, model.n_y)) * r

    states = np.zeros((T + 1, model.n_x))
    states[0] = np.asarray(x0, dtype=float).reshape(model.n_x)
    measurements = np.zeros((T, model.n_y))
    for k in range(T):
        measurements[k] = model.measurement(states[k], inputs[k], theta_true, e[k])
        states[k + 1] = model.transition(states[k], inputs[k], theta_true, w[k])
    return states, measurements
