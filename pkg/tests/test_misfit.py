import math

import numpy as np
import pytest

from adaptive_irgnm.core.mesh import uniform_mesh
from adaptive_irgnm.core.misfit import (
    AffineModel,
    ElasticNetPenalty,
    L1Penalty,
    QuadraticMisfit,
    QuadraticPenalty,
    RateFunction,
    bregman_distance,
    check_assumption1,
    check_variational_inequality,
    manufacture_source,
    rate_bound,
    rate_bound_via_f,
    rate_scaling_holds,
    select_beta_bisection,
    solve_general_subproblem,
)
from adaptive_irgnm.core.problem import DenseLinearProblem


class TestPenalties:
    def test_quadratic_prox(self):
        R = QuadraticPenalty(np.zeros(1), 0.5)

        np.testing.assert_allclose(R.prox(np.array([2.0]), 1.0), [1.0])

    def test_l1_prox_is_soft_thresholding(self):
        R = L1Penalty(lam=0.5)

        np.testing.assert_allclose(R.prox(np.array([2.0, -0.3, -1.0]), 1.0), [1.5, 0.0, -0.5])

    def test_elastic_net_prox(self):
        R = ElasticNetPenalty(np.zeros(2), lam=1.0, scale=0.5)

        np.testing.assert_allclose(R.prox(np.array([3.0, 0.1]), 1.0), [1.0, 0.0])

    def test_bregman_distance_of_quadratic_penalty(self):
        R = QuadraticPenalty(np.zeros(2), 0.5)
        q_bar = np.zeros(2)
        xi = R.subgradient(q_bar)

        assert bregman_distance(R, np.array([1.0, 0.0]), q_bar, xi) == pytest.approx(0.5)
        assert bregman_distance(R, np.array([2.0, 0.0]), q_bar, xi) == pytest.approx(2.0)

    def test_bregman_distance_of_l1_is_nonnegative(self):
        R = L1Penalty()
        q_bar = np.array([1.0, -1.0, 0.0])
        xi = R.subgradient(q_bar)

        for q in (np.array([-1.0, 2.0, 3.0]), np.array([0.5, -0.5, 0.0])):
            assert bregman_distance(R, q, q_bar, xi) >= 0.0


class TestGeneralSubproblem:
    def test_l1_subproblem(self):
        model = AffineModel(np.array([[2.0]]), np.zeros(1))

        sol = solve_general_subproblem(model, np.array([1.0]), QuadraticMisfit(), L1Penalty(), 1.0)

        # min (2q - 1)^2 + |q| is attained at q = 3/8
        assert sol.q[0] == pytest.approx(0.375, abs=1e-8)
        assert sol.objective == pytest.approx(0.4375, abs=1e-10)

    def test_l1_subproblem_matches_grid_search(self):
        J = np.array([[1.0, 0.5], [0.2, 1.0]])
        g = np.array([1.0, 0.1])
        beta = 2.0
        model = AffineModel(J, np.zeros(2))

        sol = solve_general_subproblem(model, g, QuadraticMisfit(), L1Penalty(), beta)

        def objective(q1, q2):
            r1 = J[0, 0] * q1 + J[0, 1] * q2 - g[0]
            r2 = J[1, 0] * q1 + J[1, 1] * q2 - g[1]
            return r1**2 + r2**2 + (np.abs(q1) + np.abs(q2)) / beta

        center, width = np.zeros(2), 2.0
        for step in (1e-2, 1e-4, 1e-6):
            axis1 = np.arange(center[0] - width, center[0] + width + step / 2, step)
            axis2 = np.arange(center[1] - width, center[1] + width + step / 2, step)
            q1, q2 = np.meshgrid(axis1, axis2, indexing="ij")
            values = objective(q1, q2)
            i, j = np.unravel_index(np.argmin(values), values.shape)
            center, width = np.array([axis1[i], axis2[j]]), 5 * step

        np.testing.assert_allclose(sol.q, center, atol=1e-4)
        assert sol.objective <= objective(*center) + 1e-10

    def test_quadratic_subproblem_matches_closed_form(self):
        model = AffineModel(np.diag([1.0, 0.5]), np.zeros(2))
        g = np.array([1.0, 1.0])

        sol = solve_general_subproblem(model, g, QuadraticMisfit(), QuadraticPenalty(np.zeros(2), 1.0), 1.0)

        np.testing.assert_allclose(sol.q, [0.5, 0.4], atol=1e-8)

    def test_plain_gradient_steps(self):
        model = AffineModel(np.eye(2), np.zeros(2))

        sol = solve_general_subproblem(
            model, np.array([1.0, -1.0]), QuadraticMisfit(), L1Penalty(), 1.0, accelerate=False
        )

        np.testing.assert_allclose(sol.q, [0.5, -0.5], atol=1e-8)

    def test_nonpositive_beta(self):
        model = AffineModel(np.eye(1), np.zeros(1))

        with pytest.raises(ValueError, match="must be positive"):
            solve_general_subproblem(model, np.zeros(1), QuadraticMisfit(), L1Penalty(), 0.0)

    def test_bisection_lands_in_window(self):
        model = AffineModel(np.eye(2), np.zeros(2))
        g = np.array([1.0, 1.0])
        S = QuadraticMisfit()

        beta, sol = select_beta_bisection(model, g, S, QuadraticPenalty(np.zeros(2)), 2.0, 0.1, 0.2)

        assert 0.2 <= S(model(sol.q), g) <= 0.4
        assert 5.0 <= (2 * beta + 1) ** 2 <= 10.0

    def test_linearize_dense_problem(self):
        T = np.array([[1.0, 2.0], [0.0, 3.0]])
        model = AffineModel.linearize(DenseLinearProblem(T), uniform_mesh(0.0, 1.0, 2), np.array([1.0, 1.0]))

        np.testing.assert_allclose(model.J, T)
        np.testing.assert_allclose(model.offset, 0.0, atol=1e-14)


class TestRateFunction:
    def test_holder_inverse(self):
        f = RateFunction("holder", 0.5)

        assert f.theta_inverse(0.04) == pytest.approx(0.04)
        assert f.phi(0.3) == pytest.approx(0.3)

    def test_log_rate(self):
        f = RateFunction("log", 1.0)
        lam = f.theta_inverse(0.1)

        assert float(f.theta(lam)) == pytest.approx(0.1)
        assert f.domain_max == pytest.approx(math.exp(-1.0))
        with pytest.raises(ValueError, match="outside the domain"):
            f(0.5)

    def test_invalid_rate(self):
        with pytest.raises(ValueError, match="Unknown"):
            RateFunction("power")
        with pytest.raises(ValueError, match="positive"):
            RateFunction("holder", 0.0)

    def test_phi_convexity(self):
        assert RateFunction("holder", 0.5).phi_is_convex([0.1, 0.5, 1.0])
        assert not RateFunction("holder", 1.0).phi_is_convex([0.1, 0.5, 1.0])

    def test_rate_bound(self):
        f = RateFunction("holder", 0.5)

        assert rate_bound(f, 0.01, 1.0) == pytest.approx(0.02)
        assert rate_bound_via_f(f, 0.01, 1.0) == pytest.approx(0.02)

    def test_rate_bound_forms_agree_for_log(self):
        f = RateFunction("log", 1.0)

        assert rate_bound(f, 1e-3, 2.0) == pytest.approx(rate_bound_via_f(f, 1e-3, 2.0), rel=1e-8)

    def test_rate_bound_arguments(self):
        with pytest.raises(ValueError, match="Noise level"):
            rate_bound(RateFunction(), 0.0, 1.0)

    def test_rate_scaling(self):
        assert rate_scaling_holds(RateFunction("holder", 0.5), 4.0, [1e-4, 1e-2, 1.0])
        assert rate_scaling_holds(RateFunction("holder", 0.25), 0.5, [1e-3, 0.1])


class TestSourceCondition:
    def test_manufactured_holder_sources(self):
        T = np.diag([1.0, 0.5])
        s = np.array([1.0, 1.0])

        np.testing.assert_allclose(manufacture_source(T, RateFunction("holder", 1.0), s).q_true, [1.0, 0.25])
        np.testing.assert_allclose(manufacture_source(T, RateFunction("holder", 0.5), s).q_true, [1.0, 0.5])

    def test_prior_shift(self):
        p = DenseLinearProblem(np.diag([1.0, 0.5]), prior=2.0)
        src = manufacture_source(p, RateFunction("holder", 0.5), np.array([1.0, 1.0]))

        np.testing.assert_allclose(src.q_true, [3.0, 2.5])
        assert src.s_norm == pytest.approx(math.sqrt(2.0))


class TestChecks:
    def test_quadratic_misfit_satisfies_assumptions(self):
        report = check_assumption1(QuadraticMisfit(), lambda rng: rng.standard_normal(3), 200)

        assert all(report.passed.values())
        assert report.c_S_estimate <= 2.0
        assert report.samples == 200

    def test_variational_inequality(self):
        p = DenseLinearProblem(np.eye(2))
        q_true = np.array([1.0, 1.0])
        samples = [q_true, q_true + np.array([1.0, 0.0]), q_true - np.array([1.0, 0.0])]

        report = check_variational_inequality(
            QuadraticPenalty(np.zeros(2), 0.5), p, q_true, samples, uniform_mesh(0.0, 1.0, 2)
        )

        assert report.skipped == 1
        assert report.samples == 3
        assert report.constant == pytest.approx(math.sqrt(2.0))

    def test_quasi_triangle_constant_of_quadratic_misfit_is_two(self):
        report = check_assumption1(QuadraticMisfit(), lambda rng: rng.standard_normal(3), 100_000)

        assert report.c_S_estimate <= 2.0 + 1e-12
        assert report.c_S_estimate == pytest.approx(2.0, abs=0.05)
