import numpy as np
import pytest

from bayesmpc.models import (
    FurutaParams,
    LinearFirstOrderParams,
    furuta_continuous_dynamics,
    furuta_energy,
    furuta_mass_matrix,
    furuta_theta,
    linear_step,
    linear_theta,
    load_furuta_params,
    make_furuta_model,
    make_linear_model,
    rk4_step,
    simulate_truth,
)


def reference_furuta_accels(x, volts, p):
    """Independent evaluation of the joint-space dynamics: build M, nu and
    the forcing vector explicitly and solve the 2x2 system numerically."""
    theta_dot, alpha, = x[2], x[1]
    alpha_dot = x[3]
    thd = x[2]
    M = np.array([
        [p.m_p * p.L_r**2 + 0.25 * p.m_p * p.L_p**2 * (1 - np.cos(alpha)**2) + p.J_r,
         0.5 * p.m_p * p.L_p * p.L_r * np.cos(alpha)],
        [0.5 * p.m_p * p.L_p * p.L_r * np.cos(alpha),
         p.J_p + 0.25 * p.m_p * p.L_p**2],
    ])
    nu = np.array([
        [0.5 * p.m_p * p.L_p**2 * np.sin(alpha) * np.cos(alpha) * alpha_dot,
         -0.5 * p.m_p * p.L_p * p.L_r * np.sin(alpha) * alpha_dot],
        [-0.25 * p.m_p * p.L_p**2 * np.cos(alpha) * np.sin(alpha) * thd,
         0.0],
    ])
    rhs = np.array([
        p.k_m * (volts - p.k_m * thd) / p.R_m - p.D_r * thd,
        -0.5 * p.m_p * p.L_p * p.g * np.sin(alpha) - p.D_p * alpha_dot,
    ])
    return np.linalg.solve(M, rhs - nu @ np.array([thd, alpha_dot]))


class TestLinearStep:
    P = LinearFirstOrderParams()

    def test_fixed_point(self):
        assert linear_step(1.0, 1.0, 0.0, self.P) == pytest.approx(1.0)

    def test_noise_passthrough(self):
        assert linear_step(0.0, 0.0, 0.05, self.P) == pytest.approx(0.05)

    def test_hand_arithmetic(self):
        assert linear_step(2.0, 1.0, 0.0, self.P) == pytest.approx(1.9)


class TestFurutaDynamics:
    P = load_furuta_params()

    def test_rest_is_equilibrium(self):
        dx = furuta_continuous_dynamics(np.zeros(4), 0.0, self.P)
        assert np.allclose(dx, 0.0)

    def test_upright_is_equilibrium(self):
        dx = furuta_continuous_dynamics(np.array([0.4, np.pi, 0.0, 0.0]), 0.0, self.P)
        assert np.allclose(dx, 0.0, atol=1e-12)

    def test_matches_reference_solve(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            x = rng.normal(scale=[np.pi, np.pi, 3.0, 3.0])
            volts = rng.uniform(-18.0, 18.0)
            dx = furuta_continuous_dynamics(x, volts, self.P)
            ref = reference_furuta_accels(x, volts, self.P)
            assert np.allclose(dx[:2], x[2:], atol=1e-14)
            assert np.allclose(dx[2:], ref, atol=1e-10)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            furuta_continuous_dynamics(np.array([0.0, np.nan, 0.0, 0.0]), 0.0, self.P)

    def test_mass_matrix_spd_on_grid(self):
        alphas = np.linspace(-np.pi, np.pi, 1000)
        M = furuta_mass_matrix(alphas, self.P)
        assert np.allclose(M, np.swapaxes(M, -1, -2))
        eig = np.linalg.eigvalsh(M)
        assert eig.min() > 0.0

    def test_energy_conserved_without_dissipation(self):
        # zero damping and zero motor coupling (back-EMF dissipates too)
        p = FurutaParams(
            m_p=self.P.m_p, L_r=self.P.L_r, L_p=self.P.L_p,
            J_r=self.P.J_r, J_p=self.P.J_p, R_m=self.P.R_m,
            k_m=1e-30, D_r=1e-30, D_p=1e-30,
            g=self.P.g, h=self.P.h, sigma_diag=self.P.sigma_diag,
        )
        x = np.array([0.0, 2.5, 0.0, 0.0])
        e0 = furuta_energy(x, p)
        h = 1e-3  # fine step so integrator truncation error stays below the gate
        for _ in range(1000):  # 1 s
            x = rk4_step(lambda xs, us: furuta_continuous_dynamics(xs, us, p), x, 0.0, h)
        assert abs(furuta_energy(x, p) - e0) / abs(e0) < 1e-6


class TestRk4:
    def test_constant_field(self):
        x = np.array([1.0, -2.0])
        out = rk4_step(lambda xs, us: np.zeros_like(xs), x, 0.0, 0.025)
        assert np.array_equal(out, x)

    def test_exact_on_linear_field(self):
        out = rk4_step(lambda xs, us: np.full_like(xs, us), np.array([1.0]), 2.0, 0.1)
        assert out[0] == pytest.approx(1.2, abs=0.0)

    def test_exponential_decay(self):
        out = rk4_step(lambda xs, us: -xs, np.array([1.0]), 0.0, 0.025)
        assert abs(out[0] - np.exp(-0.025)) < 1e-9

    def test_fourth_order_convergence(self):
        def err(h):
            n = round(0.4 / h)
            x = np.array([1.0])
            for _ in range(n):
                x = rk4_step(lambda xs, us: -xs, x, 0.0, h)
            return abs(x[0] - np.exp(-0.4))

        errors = [err(h) for h in (0.1, 0.05, 0.025)]
        for coarse, fine in zip(errors, errors[1:]):
            assert coarse / fine >= 8.0

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            rk4_step(lambda xs, us: xs, np.array([1.0]), 0.0, 0.0)


class TestParamTransform:
    @pytest.mark.parametrize("model", [make_linear_model(), make_furuta_model()])
    def test_round_trip(self, model):
        rng = np.random.default_rng(7)
        tr = model.param_transform
        for _ in range(1000):
            phi = rng.normal(scale=2.0, size=model.n_theta)
            theta = tr.to_constrained(phi)
            assert np.max(np.abs(tr.to_unconstrained(theta) - phi)) < 1e-12

    def test_log_jacobian(self):
        model = make_linear_model()
        phi = np.array([0.5, -0.2, np.log(0.05), np.log(0.01)])
        # identity coords contribute nothing; log coords contribute phi
        assert model.param_transform.log_abs_det_jac(phi) == pytest.approx(
            np.log(0.05) + np.log(0.01))


class TestSimulateTruth:
    def test_zero_noise_matches_rollout(self):
        model = make_linear_model()
        theta = np.array([0.9, 0.1, 0.0, 0.0])  # zero noise scales
        inputs = np.ones((20, 1))
        states, meas = simulate_truth(model, theta, [1.0], inputs, rng=0)
        x = 1.0
        for k in range(20):
            assert meas[k, 0] == pytest.approx(x)
            x = 0.9 * x + 0.1
            assert states[k + 1, 0] == pytest.approx(x)

    def test_seed_determinism(self):
        model = make_linear_model()
        theta = linear_theta(LinearFirstOrderParams())
        inputs = np.zeros((30, 1))
        s1, m1 = simulate_truth(model, theta, [0.0], inputs, rng=123)
        s2, m2 = simulate_truth(model, theta, [0.0], inputs, rng=123)
        assert np.array_equal(s1, s2) and np.array_equal(m1, m2)

    def test_disturbance_variance(self):
        model = make_linear_model()
        p = LinearFirstOrderParams()
        theta = linear_theta(p)
        inputs = np.zeros((50, 1))
        states, _ = simulate_truth(model, theta, [0.0], inputs, rng=5)
        w = states[1:, 0] - p.a * states[:-1, 0]
        assert abs(np.var(w) - p.q**2) / p.q**2 < 0.30

    def test_furuta_truth_runs(self):
        model = make_furuta_model()
        theta = furuta_theta(model.extras["physical"])
        inputs = np.zeros((10, 1))
        states, meas = simulate_truth(model, theta, [0.0, 0.05, 0.0, 0.0], inputs, rng=3)
        assert states.shape == (11, 4) and meas.shape == (10, 3)
        assert np.all(np.isfinite(states)) and np.all(np.isfinite(meas))


def test_furuta_rk4_jacobians_match_finite_differences():
    model = make_furuta_model()
    theta = furuta_theta(model.extras["physical"])
    rng = np.random.default_rng(11)
    x = rng.normal(scale=[1.0, 1.0, 2.0, 2.0])
    u = np.array([4.0])

    jx, jth = model.transition_jac(x, u, theta)
    ju = model.transition_jac_u(x, u, theta)

    for i in range(4):
        step = 1e-6
        d = np.zeros(4)
        d[i] = step
        fd = (model.transition_mean(x + d, u, theta)
              - model.transition_mean(x - d, u, theta)) / (2 * step)
        assert np.max(np.abs(jx[:, i] - fd)) < 1e-7
    for i in range(model.n_theta):
        step = 1e-6 * abs(theta[i])
        d = np.zeros(model.n_theta)
        d[i] = step
        fd = (model.transition_mean(x, u, theta + d)
              - model.transition_mean(x, u, theta - d)) / (2 * step)
        assert np.max(np.abs(jth[:, i] - fd)) < 1e-5 * max(1.0, np.max(np.abs(fd)))
    fd = (model.transition_mean(x, u + 1e-6, theta)
          - model.transition_mean(x, u - 1e-6, theta)) / 2e-6
    assert np.max(np.abs(ju[:, 0] - fd)) < 1e-7
