import itertools

import numpy as np
import pytest
from conftest import central_diff_gradient

from bayesmpc.bayes import SampleSet
from bayesmpc.models import (
    furuta_theta,
    make_furuta_model,
    make_linear_model,
)
from bayesmpc.smpc import (
    ContinuationState,
    ControlProblem,
    InfeasibleError,
    SolverStallError,
    StateConstraint,
    barrier_cost,
    chance_estimate,
    control_action,
    mc_cost,
    newton_inner,
    rollout,
    sigmoid,
)

LIN = make_linear_model()
THETA = np.array([0.9, 0.1, 0.05, 0.01])


def make_samples(x_last, theta, w_fut):
    """SampleSet from raw arrays; x_traj is a dummy one-step history."""
    x_last = np.asarray(x_last, dtype=float)
    return SampleSet(x_last[:, None, :], np.asarray(theta, dtype=float),
                     np.asarray(w_fut, dtype=float))


def identical_samples(m, x, theta, n_horizon, n_x):
    x_last = np.tile(np.atleast_1d(x), (m, 1))
    thetas = np.tile(theta, (m, 1))
    w = np.zeros((m, n_horizon + 1, n_x))
    return make_samples(x_last, thetas, w)


def make_problem(n_horizon=4, setpoint=0.0, q_w=1.0, r_w=0.1,
                 lo=-np.inf, hi=np.inf, constraints=(), **kw):
    return ControlProblem(
        n_horizon=n_horizon, setpoint=[setpoint],
        state_weight=[[q_w]], input_weight=[[r_w]],
        input_lower=[lo], input_upper=[hi],
        state_constraints=constraints, **kw)


class TestRollout:
    def test_geometric_sequence(self):
        n = 6
        samples = identical_samples(1, [1.0], THETA, n, 1)
        states = rollout(samples.x_last, [0.0], samples.theta,
                         np.zeros((n + 1, 1)), samples.w_fut, LIN)
        assert np.allclose(states[0, :, 0], 0.9 ** np.arange(1, n + 2))

    def test_single_step_equals_linear_step(self):
        samples = identical_samples(1, [2.0], THETA, 0, 1)
        states = rollout(samples.x_last, [1.0], samples.theta,
                         np.zeros((1, 1)), samples.w_fut, LIN)
        assert states[0, 0, 0] == pytest.approx(0.9 * 2.0 + 0.1 * 1.0)

    def test_pendulum_rest_stays_at_rest(self):
        model = make_furuta_model()
        theta = furuta_theta(model.extras["physical"])
        samples = identical_samples(3, [0.0, 0.0, 0.0, 0.0], theta, 5, 4)
        states = rollout(samples.x_last, [0.0], samples.theta,
                         np.zeros((6, 1)), samples.w_fut, model)
        assert np.allclose(states, 0.0, atol=1e-14)


class TestMcCost:
    def test_identical_samples_equal_single(self):
        u_seq = np.array([[0.2], [0.3], [0.1]])
        prob = make_problem(n_horizon=2)
        one = identical_samples(1, [1.0], THETA, 2, 1)
        many = identical_samples(7, [1.0], THETA, 2, 1)
        assert mc_cost(many, [0.5], u_seq, prob, LIN) == pytest.approx(
            mc_cost(one, [0.5], u_seq, prob, LIN))

    def test_zero_state_weight_zero_inputs(self):
        prob = make_problem(n_horizon=3, q_w=0.0, r_w=1.0)
        samples = identical_samples(4, [2.0], THETA, 3, 1)
        assert mc_cost(samples, [1.0], np.zeros((4, 1)), prob, LIN) == 0.0

    def test_hand_computed_two_step(self):
        # x1 = .9 + .05 = .95; x2 = .855 + .02 = .875
        # states: .95^2 + .875^2 = 1.668125; inputs: .1*(.04+.09) = .013
        prob = make_problem(n_horizon=1, setpoint=0.0, q_w=1.0, r_w=0.1)
        samples = identical_samples(1, [1.0], THETA, 1, 1)
        cost = mc_cost(samples, [0.5], np.array([[0.2], [0.3]]), prob, LIN)
        assert cost == pytest.approx(1.681125, abs=1e-12)


class TestSigmoid:
    def test_center_value(self):
        for gamma in (1e-3, 0.1, 1.0, 10.0):
            assert sigmoid(0.0, gamma) == 0.5

    def test_unit_argument(self):
        assert sigmoid(0.3, 0.3) == pytest.approx(1.0 / (1.0 + np.exp(-1.0)), abs=1e-15)
        assert sigmoid(0.3, 0.3) == pytest.approx(0.7310585786300049, abs=1e-15)

    def test_indicator_limit(self):
        assert sigmoid(1.0, 1e-6) == pytest.approx(1.0, abs=1e-15)
        assert sigmoid(-1.0, 1e-6) == pytest.approx(0.0, abs=1e-300)

    def test_complement_identity(self):
        rng = np.random.default_rng(0)
        z = rng.normal(scale=5.0, size=500)
        for gamma in (1e-3, 0.05, 1.0, 20.0):
            s = sigmoid(z, gamma) + sigmoid(-z, gamma)
            assert np.max(np.abs(s - 1.0)) <= np.finfo(float).eps

    def test_monotone(self):
        z = np.linspace(-4, 4, 200)
        assert np.all(np.diff(sigmoid(z, 0.7)) > 0)


class TestChanceEstimate:
    CON = (StateConstraint(dim=0, bound=0.0, side="upper"),)

    def test_saturated_margins(self):
        # states far below the bound: every margin >> sharpness
        samples = identical_samples(5, [-50.0], THETA, 2, 1)
        prob = make_problem(n_horizon=2, constraints=self.CON)
        g = chance_estimate(np.zeros((3, 1)), 0.1, samples, prob, LIN, [0.0])
        assert np.all(np.abs(g - 1.0) < 1e-9)

    def test_two_sample_closed_form(self):
        # margins after one step are exactly +/- gamma
        gamma = 0.2
        x = np.array([[-gamma / 0.9], [gamma / 0.9]])
        samples = make_samples(x, np.tile(THETA, (2, 1)), np.zeros((2, 1, 1)))
        prob = make_problem(n_horizon=0, constraints=self.CON)
        g = chance_estimate(np.zeros((1, 1)), gamma, samples, prob, LIN, [0.0])
        expected = 0.5 * (0.7310585786300049 + 0.2689414213699951)
        assert g[0] == pytest.approx(expected, abs=1e-12)
        assert g[0] == pytest.approx(0.5, abs=1e-12)

    def test_monotone_under_slackening(self):
        # raising the bound slackens every margin; g must not decrease
        rng = np.random.default_rng(1)
        x = rng.normal(size=(30, 1))
        samples = make_samples(x, np.tile(THETA, (30, 1)),
                               rng.normal(scale=0.05, size=(30, 4, 1)))
        u_seq = rng.normal(size=(4, 1))
        for shift in (0.5, 1.0, 2.0):
            g0 = chance_estimate(u_seq, 0.3, samples,
                                 make_problem(n_horizon=3, constraints=(
                                     StateConstraint(0, 1.0, "upper"),)), LIN, [0.0])
            g1 = chance_estimate(u_seq, 0.3, samples,
                                 make_problem(n_horizon=3, constraints=(
                                     StateConstraint(0, 1.0 + shift, "upper"),)), LIN, [0.0])
            assert np.all(g1 >= g0)

    def test_sharpening_approaches_indicator(self):
        rng = np.random.default_rng(2)
        x = rng.normal(scale=2.0, size=(40, 1))
        samples = make_samples(x, np.tile(THETA, (40, 1)), np.zeros((40, 3, 1)))
        prob = make_problem(n_horizon=2, constraints=self.CON)
        u_seq = np.zeros((3, 1))
        states = rollout(samples.x_last, [0.0], samples.theta, u_seq,
                         samples.w_fut, LIN)
        margins = np.concatenate([c.margins(states) for c in prob.state_constraints],
                                 axis=1)
        indicator = (margins > 0).mean(axis=0)
        gamma0 = np.min(np.abs(margins)) / 10.0
        gaps = []
        for k in range(4):
            g = chance_estimate(u_seq, gamma0 / 2**k, samples, prob, LIN, [0.0])
            gaps.append(np.abs(g - indicator))
        for a, b in zip(gaps, gaps[1:]):
            assert np.all(b <= a + 1e-15)


def feasible_random_point(rng, prob, dim):
    z = np.empty(dim)
    z[:-1] = rng.uniform(-1.5, 1.5, size=dim - 1)
    z[-1] = rng.uniform(prob.slack_floor + 0.2, prob.slack_floor + 0.9)
    return z


class TestBarrierCost:
    def setup_method(self):
        self.prob = make_problem(
            n_horizon=4, setpoint=1.0, q_w=1.0, r_w=0.1, lo=-2.0, hi=2.0,
            constraints=(StateConstraint(0, 3.0, "upper"),
                         StateConstraint(0, -3.0, "lower")),
            slack_floor=0.05)
        rng = np.random.default_rng(3)
        m = 12
        x = rng.normal(scale=0.3, size=(m, 1))
        w = rng.normal(scale=0.05, size=(m, 5, 1))
        thetas = np.tile(THETA, (m, 1)) + rng.normal(scale=0.01, size=(m, 4))
        self.samples = make_samples(x, thetas, w)

    def test_vanishing_barrier_recovers_smooth_cost(self):
        z = np.concatenate([np.full(5, 0.3), [0.5]])
        value, _, _ = barrier_cost(z, 0.5, 1e-12, self.samples, self.prob, LIN, [0.0])
        smooth = (self.prob.slack_weight * (0.5 - self.prob.slack_offset) ** 2
                  + mc_cost(self.samples, [0.0], z[:-1].reshape(-1, 1), self.prob, LIN))
        assert value == pytest.approx(smooth, rel=1e-9)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        checked = 0
        while checked < 100:
            z = feasible_random_point(rng, self.prob, 6)
            try:
                _, grad, _ = barrier_cost(z, 0.5, 0.37, self.samples, self.prob,
                                          LIN, [0.0])
            except InfeasibleError:
                continue
            fd = central_diff_gradient(
                lambda zz: barrier_cost(zz, 0.5, 0.37, self.samples, self.prob,
                                        LIN, [0.0])[0], z)
            assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-5
            checked += 1

    def test_hessian_matches_finite_differences_linear_plant(self):
        # rollout is affine in the inputs for this plant: Hessian is exact
        rng = np.random.default_rng(5)
        checked = 0
        while checked < 20:
            z = feasible_random_point(rng, self.prob, 6)
            try:
                _, _, hess = barrier_cost(z, 0.5, 0.37, self.samples, self.prob,
                                          LIN, [0.0])
            except InfeasibleError:
                continue
            for i in range(6):
                fd = central_diff_gradient(
                    lambda zz: barrier_cost(zz, 0.5, 0.37, self.samples, self.prob,
                                            LIN, [0.0])[1][i], z)
                assert np.linalg.norm(hess[i] - fd) / max(np.linalg.norm(fd), 1.0) < 1e-5
            checked += 1

    def test_infeasible_input_raises(self):
        z = np.concatenate([np.full(5, 2.5), [0.5]])  # outside the box
        with pytest.raises(InfeasibleError):
            barrier_cost(z, 0.5, 1.0, self.samples, self.prob, LIN, [0.0])

    def test_slack_below_floor_raises(self):
        z = np.concatenate([np.zeros(5), [0.01]])
        with pytest.raises(InfeasibleError):
            barrier_cost(z, 0.5, 1.0, self.samples, self.prob, LIN, [0.0])


class TestNewtonInner:
    def test_quadratic_single_full_step(self):
        h = np.array([[4.0, 1.0], [1.0, 3.0]])
        target = np.array([1.0, -2.0])

        def fun(z):
            d = z - target
            return 0.5 * float(d @ h @ d), h @ d, h

        z0 = np.array([10.0, 10.0])
        z1, info = newton_inner(z0, fun)
        assert info.step_length == 1.0
        assert np.max(np.abs(z1 - target)) < 1e-12

    def test_indefinite_hessian_still_descends(self):
        def fun(z):
            # saddle: gradient nonzero, Hessian indefinite
            value = 0.5 * (z[0] ** 2 - z[1] ** 2) + z[0] + 0.1 * z[1]
            grad = np.array([z[0] + 1.0, -z[1] + 0.1])
            hess = np.diag([1.0, -1.0])
            return value, grad, hess

        z0 = np.array([0.5, 0.5])
        z1, info = newton_inner(z0, fun)
        assert info.decrement < 0
        assert info.cost_after < info.cost_before

    def test_one_dim_barrier_toy_root(self):
        # minimize (u-1)^2 - mu*ln(2-u): stationarity is the quadratic
        # 2u^2 - 6u + (4 - mu) = 0 restricted to u < 2
        mu = 0.1
        roots = np.roots([2.0, -6.0, 4.0 - mu])
        root = roots[roots < 2.0][0]

        def fun(z):
            u = z[0]
            if u >= 2.0:
                raise InfeasibleError("outside barrier domain")
            value = (u - 1.0) ** 2 - mu * np.log(2.0 - u)
            grad = np.array([2.0 * (u - 1.0) + mu / (2.0 - u)])
            hess = np.array([[2.0 + mu / (2.0 - u) ** 2]])
            return value, grad, hess

        z = np.array([0.0])
        iterations = 0
        try:
            for _ in range(20):
                z, info = newton_inner(z, fun)
                iterations += 1
                if abs(info.decrement) < 1e-16:
                    break
        except SolverStallError:
            pass  # no further representable decrease: converged to float noise
        assert abs(z[0] - root) < 1e-8
        assert iterations <= 20


class TestControlAction:
    def test_matches_enumerated_box_qp(self):
        prob = make_problem(n_horizon=4, setpoint=1.5, q_w=1.0, r_w=0.1,
                            lo=-2.0, hi=2.0, slack_floor=0.05)
        samples = identical_samples(3, [-2.0], THETA, 4, 1)
        # a deep barrier floor removes the O(mu/margin) bias on the
        # near-active coordinates so the comparison is meaningful at 1e-4
        cont = ContinuationState(barrier_floor=1e-9)
        decision = control_action(samples, [0.0], prob, LIN, cont)
        assert decision.converged
        ref = box_lq_oracle(-2.0, 0.0, prob)
        assert np.max(np.abs(decision.u_seq[:, 0] - ref)) < 1e-4

    def test_slack_stays_above_floor(self):
        rng = np.random.default_rng(6)
        prob = make_problem(n_horizon=3, setpoint=1.0, q_w=1.0, r_w=0.05,
                            hi=2.0, constraints=(StateConstraint(0, 1.2, "upper"),),
                            slack_floor=0.05)
        x = rng.normal(loc=0.9, scale=0.05, size=(50, 1))
        w = rng.normal(scale=0.05, size=(50, 4, 1))
        samples = make_samples(x, np.tile(THETA, (50, 1)), w)
        decision = control_action(samples, [0.5], prob, LIN)
        assert decision.eps > prob.slack_floor

    def test_violation_recount_within_slack(self):
        rng = np.random.default_rng(7)
        m = 100
        prob = make_problem(n_horizon=10, setpoint=1.0, q_w=1.0, r_w=0.01,
                            hi=2.0, constraints=(StateConstraint(0, 1.2, "upper"),),
                            slack_floor=0.05)
        x = rng.normal(loc=0.9, scale=0.05, size=(m, 1))
        w = rng.normal(scale=0.05, size=(m, 11, 1))
        samples = make_samples(x, np.tile(THETA, (m, 1)), w)
        decision = control_action(samples, [0.5], prob, LIN)
        assert decision.converged
        states = rollout(samples.x_last, [0.5], samples.theta, decision.u_seq,
                         samples.w_fut, LIN)
        margins = prob.state_constraints[0].margins(states)
        violation_rate = (margins <= 0).mean(axis=0)
        assert np.all(violation_rate <= decision.eps + 0.02)

    def test_cost_non_increasing_within_stage(self):
        prob = make_problem(n_horizon=3, setpoint=1.0, q_w=1.0, r_w=0.05,
                            lo=-2.0, hi=2.0,
                            constraints=(StateConstraint(0, 1.2, "upper"),),
                            slack_floor=0.05)
        rng = np.random.default_rng(8)
        x = rng.normal(loc=0.5, scale=0.1, size=(40, 1))
        w = rng.normal(scale=0.05, size=(40, 4, 1))
        samples = make_samples(x, np.tile(THETA, (40, 1)), w)
        decision = control_action(samples, [0.0], prob, LIN)
        stage = None
        last_cost = None
        for row in decision.trace:
            key = (row.barrier_weight, row.sharpness)
            if key != stage:
                stage, last_cost = key, row.cost
                continue
            assert row.cost <= last_cost + 1e-9
            last_cost = row.cost

    def test_schedule_reaches_floors_monotonically(self):
        prob = make_problem(n_horizon=2, setpoint=0.5, q_w=1.0, r_w=0.1,
                            lo=-1.0, hi=1.0, slack_floor=0.05)
        samples = identical_samples(2, [0.0], THETA, 2, 1)
        cont = ContinuationState()
        decision = control_action(samples, [0.0], prob, LIN, cont)
        assert decision.converged
        mus = [row.barrier_weight for row in decision.trace]
        gammas = [row.sharpness for row in decision.trace]
        assert all(a >= b for a, b in zip(mus, mus[1:]))
        assert all(a >= b for a, b in zip(gammas, gammas[1:]))
        assert mus[-1] == pytest.approx(cont.barrier_floor)
        assert gammas[-1] == pytest.approx(cont.sharpness_floor)


def box_lq_oracle(x_t, u_applied, prob):
    """Deterministic box-constrained LQ solution by exhaustive active-set
    enumeration; independent of the barrier machinery."""
    a, b = 0.9, 0.1
    n = prob.n_horizon + 1
    k = n  # number of predicted states
    phi = np.empty(k)
    psi = np.zeros((k, n))
    for s in range(1, k + 1):
        phi[s - 1] = a**s * x_t + a ** (s - 1) * b * u_applied
        for mcol in range(s - 1):
            psi[s - 1, mcol] = a ** (s - 2 - mcol) * b
    q_w = prob.state_weight[0, 0]
    r_w = prob.input_weight[0, 0]
    P = 2.0 * (q_w * psi.T @ psi + r_w * np.eye(n))
    qvec = 2.0 * q_w * psi.T @ (phi - prob.setpoint[0])
    lo = np.full(n, prob.input_lower[0])
    hi = np.full(n, prob.input_upper[0])

    best, best_val = None, np.inf
    for assignment in itertools.product((0, 1, 2), repeat=n):
        z = np.zeros(n)
        fixed = np.array(assignment) != 0
        z[np.array(assignment) == 1] = lo[np.array(assignment) == 1]
        z[np.array(assignment) == 2] = hi[np.array(assignment) == 2]
        free = ~fixed
        if free.any():
            rhs = -(qvec[free] + P[np.ix_(free, fixed)] @ z[fixed])
            try:
                z[free] = np.linalg.solve(P[np.ix_(free, free)], rhs)
            except np.linalg.LinAlgError:
                continue
        if np.any(z < lo - 1e-9) or np.any(z > hi + 1e-9):
            continue
        grad = P @ z + qvec
        ok = True
        for i in range(n):
            if assignment[i] == 1 and grad[i] < -1e-9:
                ok = False
            if assignment[i] == 2 and grad[i] > 1e-9:
                ok = False
        if not ok:
            continue
        val = 0.5 * z @ P @ z + qvec @ z
        if val < best_val - 1e-15:
            best_val, best = val, z.copy()
    return best


def test_box_lq_oracle_unconstrained_sanity():
    # with an enormous box the oracle must match the closed-form solve
    prob = make_problem(n_horizon=3, setpoint=1.5, q_w=1.0, r_w=0.1,
                        lo=-1e6, hi=1e6)
    z = box_lq_oracle(-2.0, 0.0, prob)
    a, b = 0.9, 0.1
    n = 4
    phi = np.array([a**s * -2.0 for s in range(1, n + 1)])
    psi = np.zeros((n, n))
    for s in range(1, n + 1):
        for m in range(s - 1):
            psi[s - 1, m] = a ** (s - 2 - m) * b
    P = 2.0 * (psi.T @ psi + 0.1 * np.eye(n))
    qvec = 2.0 * psi.T @ (phi - 1.5)
    assert np.allclose(z, np.linalg.solve(P, -qvec), atol=1e-8)
