import numpy as np
import pytest

from adaptive_irgnm.core.errors import SubproblemError
from adaptive_irgnm.core.gnstep import (
    eval_qoi,
    i_prime_beta,
    nonlinear_state,
    solve_subproblem,
    subproblem_objective,
    tangent,
    with_beta,
)
from adaptive_irgnm.core.mesh import refine, uniform_mesh
from adaptive_irgnm.core.oracle import dense_kkt, dense_tikhonov, fd_check
from adaptive_irgnm.core.problem import CoefficientProblem, DenseLinearProblem, synthesize_data


@pytest.fixture
def mesh():
    return uniform_mesh(0.0, 1.0, 4)


@pytest.fixture
def dense():
    return DenseLinearProblem(np.diag([1.0, 0.5]), data=np.array([1.0, 1.0]))


@pytest.fixture
def coefficient():
    clean = CoefficientProblem(source=10.0, prior=1.0, exact=lambda x: 1.0 + 0.5 * np.sin(2 * np.pi * x))
    data = synthesize_data(clean, clean.exact, 0.01, 0, uniform_mesh(0.0, 1.0, 64))
    return clean.with_data(data, 0.01)


class TestDenseStep:
    def test_closed_form(self, dense, mesh):
        state = solve_subproblem(dense, np.zeros(2), np.zeros(2), 1.0, mesh)

        np.testing.assert_allclose(state.q, [0.5, 0.4], atol=1e-12)

    def test_quantities_of_interest(self, dense, mesh):
        state = solve_subproblem(dense, np.zeros(2), np.zeros(2), 1.0, mesh)
        qoi = eval_qoi(dense, state)

        assert qoi.i2 == pytest.approx(0.89)
        assert qoi.i1 == pytest.approx(0.89 + 0.25 + 0.16)
        assert qoi.i3 == pytest.approx(2.0)
        assert qoi.i4 == pytest.approx(0.89)

    def test_weak_regularization_recovers_data(self, mesh):
        p = DenseLinearProblem(np.eye(2), data=np.array([1.0, 2.0]))
        state = solve_subproblem(p, np.zeros(2), np.zeros(2), 1e12, mesh)

        np.testing.assert_allclose(state.q, [1.0, 2.0], atol=1e-9)

    def test_matches_normal_equations(self, mesh):
        rng = np.random.default_rng(0)
        T = rng.standard_normal((6, 4))
        g, q0, q_old = rng.standard_normal(6), rng.standard_normal(4), rng.standard_normal(4)
        p = DenseLinearProblem(T, data=g, prior=q0)
        state = solve_subproblem(p, q_old, T @ q_old, 0.3, mesh)

        np.testing.assert_allclose(state.q, dense_tikhonov(T, g, q0, 0.3), atol=1e-10)

    def test_nonpositive_beta(self, dense, mesh):
        with pytest.raises(SubproblemError, match="must be positive"):
            solve_subproblem(dense, np.zeros(2), np.zeros(2), 0.0, mesh)

    def test_derivative_of_residual(self, dense, mesh):
        state = solve_subproblem(dense, np.zeros(2), np.zeros(2), 1.0, mesh)

        # i(beta) = sum_j (t_j^2 beta / (t_j^2 beta + 1) - 1)^2 for g = 1
        t2 = np.array([1.0, 0.25])
        expected = float(np.sum(-2.0 / (t2 + 1.0) * t2 / (t2 + 1.0) ** 2))
        assert i_prime_beta(dense, state) == pytest.approx(expected, rel=1e-10)
        assert i_prime_beta(dense, state) < 0


class TestCoefficientStep:
    @pytest.fixture
    def step(self, coefficient):
        m = refine(uniform_mesh(0.0, 1.0, 8), [3, 4])
        q_old = coefficient.prior_vector(m)
        u_old = coefficient.solve_state(m, q_old)
        return m, q_old, u_old

    def test_matches_dense_oracle(self, coefficient, step):
        m, q_old, u_old = step
        state = solve_subproblem(coefficient, q_old, u_old, 5.0, m)
        ref = dense_kkt(coefficient, m, q_old, u_old, 5.0)

        np.testing.assert_allclose(state.q, ref["q"], atol=1e-8)
        np.testing.assert_allclose(state.w, ref["w"], atol=1e-8)

    def test_stationarity(self, coefficient, step):
        m, q_old, u_old = step
        state = solve_subproblem(coefficient, q_old, u_old, 5.0, m)
        residuals = state.kkt_residuals(coefficient)

        assert residuals["q"] < 1e-10
        assert residuals["w"] < 1e-10
        assert residuals["v"] < 1e-10
        assert residuals["u_old"] < 1e-10

    def test_objective_identity(self, coefficient, step):
        m, q_old, u_old = step
        state = solve_subproblem(coefficient, q_old, u_old, 5.0, m)
        qoi = eval_qoi(coefficient, state)
        reg = coefficient.q_norm(m, state.q - state.q0) ** 2 / 5.0

        assert qoi.i1 == pytest.approx(qoi.i2 + reg, abs=1e-12)
        assert subproblem_objective(coefficient, m, q_old, u_old, 5.0, state.q) == pytest.approx(
            qoi.i1, rel=1e-10
        )

    def test_solution_minimizes_objective(self, coefficient, step):
        m, q_old, u_old = step
        state = solve_subproblem(coefficient, q_old, u_old, 5.0, m)
        best = subproblem_objective(coefficient, m, q_old, u_old, 5.0, state.q)
        bump = np.sin(np.pi * m.vertices)

        for eps in (1e-2, -1e-2, 1e-1):
            assert subproblem_objective(coefficient, m, q_old, u_old, 5.0, state.q + eps * bump) > best

    def test_i_prime_matches_finite_differences(self, coefficient, step):
        m, q_old, u_old = step

        def i_of(beta: np.ndarray) -> float:
            s = solve_subproblem(coefficient, q_old, u_old, float(beta[0]), m)
            return coefficient.misfit(m, s.w + s.u_old)

        state = solve_subproblem(coefficient, q_old, u_old, 5.0, m)
        error = fd_check(i_of, np.array([5.0]), np.array([1.0]), i_prime_beta(coefficient, state))

        assert error <= 1e-5

    def test_tangent_matches_finite_differences(self, coefficient, step):
        m, q_old, u_old = step
        state = solve_subproblem(coefficient, q_old, u_old, 5.0, m)
        dq = tangent(coefficient, state)["q"]

        def q_of(alpha: np.ndarray) -> np.ndarray:
            return solve_subproblem(coefficient, q_old, u_old, 1.0 / float(alpha[0]), m).q

        assert fd_check(q_of, np.array([0.2]), np.array([1.0]), dq, steps=(1e-3, 1e-4, 1e-5)) <= 1e-5

    def test_nonlinear_state_and_with_beta(self, coefficient, step):
        m, q_old, u_old = step
        state = solve_subproblem(coefficient, q_old, u_old, 5.0, m)
        u = nonlinear_state(coefficient, state)

        assert eval_qoi(coefficient, state, u).i4 == pytest.approx(coefficient.misfit(m, u))
        assert with_beta(state, 2.0).beta == 2.0
        assert with_beta(state, 2.0).q is state.q
