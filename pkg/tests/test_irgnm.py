from unittest.mock import patch

import numpy as np
import pytest

from adaptive_irgnm.core.config import ProblemConfig, RunConfig, build_problem
from adaptive_irgnm.core.errors import BetaSearchError, ConfigValidationError, IterationError
from adaptive_irgnm.core.irgnm import (
    DerivedConstants,
    audit_theorem1,
    check_condition_A,
    check_condition_C,
    check_constants,
    run,
    validate_config,
)
from adaptive_irgnm.core.mesh import uniform_mesh
from adaptive_irgnm.core.oracle import bisect_beta, dense_residual, dense_tikhonov
from adaptive_irgnm.core.problem import CoefficientProblem, DenseLinearProblem, synthesize_data
from adaptive_irgnm.core.regparam import window

T = np.diag([1.0, 0.5, 0.25, 0.125])
Q_TRUE = np.ones(4)


@pytest.fixture
def mesh():
    return uniform_mesh(0.0, 1.0, 4)


@pytest.fixture
def dense_config():
    return RunConfig(tau=5.0, c_tc=0.0)


def _dense(mesh, delta):
    clean = DenseLinearProblem(T, exact=Q_TRUE)
    return clean.with_data(synthesize_data(clean, Q_TRUE, delta, 0, mesh), delta)


class TestConstants:
    def test_defaults_hold(self):
        assert check_constants(RunConfig()) == []

    def test_derived_values(self):
        dc = validate_config(RunConfig())

        assert dc.tau_condition == pytest.approx(0.0442)
        assert dc.c4 == pytest.approx(0.0279)
        assert dc.c5 == pytest.approx(1.395)
        assert dc.c_C == pytest.approx(0.1)
        assert dc.contraction == pytest.approx(0.44 / 0.96)

    def test_linear_operator_has_unbounded_c5(self, dense_config):
        dc = validate_config(dense_config)

        assert dc.c5 == np.inf
        assert dc.tau_condition == pytest.approx(0.08)
        assert dc.c_C == pytest.approx(0.1)

    def test_large_cone_constant(self):
        with pytest.raises(ConfigValidationError) as exc_info:
            validate_config(RunConfig(c_tc=0.4))

        names = [v.name for v in exc_info.value.violations]
        assert "tau condition" in names
        assert "contraction condition" in names
        assert "contraction condition" in str(exc_info.value)

    def test_step_constant(self):
        violations = check_constants(RunConfig(c2=0.6))

        assert [v.name for v in violations] == ["step constant condition"]
        assert violations[0].lhs == pytest.approx(0.6875)
        assert violations[0].margin < 0

    def test_small_tau(self):
        names = [v.name for v in check_constants(RunConfig(tau=3.0))]

        assert "tau condition" in names

    def test_conditions(self):
        dc = DerivedConstants(c4=0.02, c5=1.0, c_C=0.1, tau_condition=0.05, contraction=0.5)

        assert check_condition_A(-0.019, 1.0, dc)
        assert not check_condition_A(0.021, 1.0, dc)
        assert check_condition_C(0.1, 1.0, dc)
        assert not check_condition_C(-0.11, 1.0, dc)


class TestDenseRun:
    def test_discrepancy_stop(self, mesh, dense_config):
        p = _dense(mesh, 0.01)
        report = run(p, dense_config, mesh, np.zeros(4))

        assert report.stop_reason == "discrepancy"
        assert report.k_star >= 1
        assert report.final_i3h < report.threshold
        assert report.threshold == pytest.approx(25.0 * 1e-4)
        assert not report.partial

    def test_each_step_lands_in_window(self, mesh, dense_config):
        report = run(_dense(mesh, 0.01), dense_config, mesh, np.zeros(4))
        bcfg = dense_config.beta_search()

        for rec in report.records:
            lower, upper = window(rec.qoi.i3, bcfg)
            assert lower * (1 - 1e-12) <= rec.qoi.i2 <= upper * (1 + 1e-12)
            assert rec.qoi.i1 == pytest.approx(rec.qoi.i2 + rec.q_norm**2 / rec.beta, rel=1e-10)
            # linear forward map: the linearized and nonlinear residuals agree
            assert rec.qoi.i4 == pytest.approx(rec.qoi.i2, rel=1e-10)
            assert rec.etas == {"eta1": 0.0, "eta2": 0.0, "eta3": 0.0, "eta4": 0.0}
            assert rec.condA_rounds == rec.condC_rounds == 0

    def test_misfit_contracts(self, mesh, dense_config):
        report = run(_dense(mesh, 0.01), dense_config, mesh, np.zeros(4))
        i3 = [rec.qoi.i3 for rec in report.records] + [report.final_i3h]

        for before, after in zip(i3, i3[1:]):
            assert after <= dense_config.theta_upper * before * (1 + 1e-12)

    def test_betas_increase(self, mesh, dense_config):
        betas = run(_dense(mesh, 0.01), dense_config, mesh, np.zeros(4)).to_dict()["betas"]

        assert all(b1 < b2 for b1, b2 in zip(betas, betas[1:]))

    def test_final_iterate_is_tikhonov_solution(self, mesh, dense_config):
        p = _dense(mesh, 0.01)
        report = run(p, dense_config, mesh, np.zeros(4))

        expected = dense_tikhonov(T, p.data, np.zeros(4), report.records[-1].beta)

        np.testing.assert_allclose(report.q, expected, atol=1e-10)

    def test_audit(self, mesh, dense_config):
        p = _dense(mesh, 0.01)
        report = run(p, dense_config, mesh, np.zeros(4))
        rows = audit_theorem1(report, Q_TRUE, p, dense_config)

        assert len(rows) == report.k_star
        assert all(row.iterate_bounded for row in rows)
        assert all(row.eta_condition and row.eta3_condition for row in rows)
        assert not any(row.violated for row in rows)
        assert rows[0].growth_condition is None

    def test_audit_recomputes_errors_from_iterates(self, mesh, dense_config):
        p = _dense(mesh, 0.01)
        report = run(p, dense_config, mesh, np.zeros(4))
        rows = audit_theorem1(report, Q_TRUE, p, dense_config)

        for row, rec in zip(rows, report.records):
            error = np.linalg.norm(rec.q - Q_TRUE)
            assert row.error == pytest.approx(error, rel=1e-12)
            assert row.bregman == pytest.approx(0.5 * error**2, rel=1e-12)
            assert row.margins["iterate"] == pytest.approx(
                np.linalg.norm(Q_TRUE) - np.linalg.norm(rec.q), abs=1e-12
            )
        assert rows[-1].error == pytest.approx(np.linalg.norm(report.q - Q_TRUE), rel=1e-12)

    def test_audit_flags_iterates_beyond_the_true_solution(self, mesh, dense_config):
        p = _dense(mesh, 0.01)
        report = run(p, dense_config, mesh, np.zeros(4))

        rows = audit_theorem1(report, 0.01 * Q_TRUE, p, dense_config)

        assert not rows[-1].iterate_bounded
        assert rows[-1].violated

    def test_trace_matches_dense_replay(self, mesh, dense_config):
        p = _dense(mesh, 1e-3)
        report = run(p, dense_config, mesh, np.zeros(4))
        q_prev = np.zeros(4)

        def i_of_beta(beta):
            return dense_residual(T, p.data, np.zeros(4), beta)

        assert report.k_star >= 2
        for rec in report.records:
            i3 = float(np.sum((T @ q_prev - p.data) ** 2))
            smallest = bisect_beta(i_of_beta, dense_config.theta_upper * i3)
            largest = bisect_beta(i_of_beta, dense_config.theta_lower * i3)

            assert rec.qoi.i3 == pytest.approx(i3, rel=1e-8)
            assert smallest * (1 - 1e-6) <= rec.beta <= largest * (1 + 1e-6)
            np.testing.assert_allclose(rec.q, dense_tikhonov(T, p.data, np.zeros(4), rec.beta), atol=1e-8)
            q_prev = rec.q

    def test_huge_noise_stops_immediately(self, mesh, dense_config):
        report = run(_dense(mesh, 10.0), dense_config, mesh, np.zeros(4))

        assert report.k_star == 0
        assert report.stop_reason == "discrepancy"
        np.testing.assert_array_equal(report.q, np.zeros(4))

    def test_step_budget(self, mesh):
        cfg = RunConfig(tau=5.0, c_tc=0.0, max_newton_steps=1)
        report = run(_dense(mesh, 1e-4), cfg, mesh, np.zeros(4))

        assert report.k_star == 1
        assert report.stop_reason == "budget"

    def test_report_dict(self, mesh, dense_config):
        summary = run(_dense(mesh, 0.01), dense_config, mesh, np.zeros(4)).to_dict()

        assert summary["stop_reason"] == "discrepancy"
        assert summary["final_vertices"] == mesh.n_vertices
        assert summary["derived_constants"]["c5"] == np.inf
        assert len(summary["betas"]) == summary["k_star"]

    def test_failing_step_carries_partial_report(self, mesh, dense_config):
        with patch("adaptive_irgnm.core.irgnm.select_beta", side_effect=BetaSearchError("no beta")):
            with pytest.raises(IterationError) as exc_info:
                run(_dense(mesh, 0.01), dense_config, mesh, np.zeros(4))

        assert exc_info.value.step == 0
        assert exc_info.value.report.partial
        assert exc_info.value.report.stop_reason == "error"
        assert isinstance(exc_info.value.__cause__, BetaSearchError)

    def test_invalid_constants_rejected_before_solving(self, mesh):
        with patch("adaptive_irgnm.core.irgnm.select_beta") as select:
            with pytest.raises(ConfigValidationError):
                run(_dense(mesh, 0.01), RunConfig(c_tc=0.4), mesh, np.zeros(4))
        select.assert_not_called()


class TestCoefficientRun:
    def test_adaptive_steps(self):
        clean = CoefficientProblem(source=10.0, prior=1.0, exact=lambda x: 1.0 + 0.5 * np.sin(2 * np.pi * x))
        delta = 1e-3
        p = clean.with_data(synthesize_data(clean, clean.exact, delta, 0, uniform_mesh(0.0, 1.0, 128)), delta)
        m0 = uniform_mesh(0.0, 1.0, 8)
        cfg = RunConfig(tau=6.0, max_newton_steps=3, max_dofs=400)

        report = run(p, cfg, m0, p.prior_vector(m0))

        assert report.stop_reason in ("discrepancy", "budget")
        assert 1 <= report.k_star <= 3
        assert report.mesh.n_vertices >= m0.n_vertices
        for rec in report.records:
            h1, h2, h3, h4 = rec.dofs
            assert h1 <= h2 <= h3 <= h4
            assert rec.beta > 0
        if report.stop_reason == "discrepancy":
            assert report.final_i3h < report.threshold

    def test_noise_sweep(self):
        pcfg = ProblemConfig(kind="coefficient", cells=16)
        errors = []
        for delta in (1e-1, 3e-2, 1e-2):
            cfg = RunConfig(delta=delta, max_dofs=2000)
            bench = build_problem(pcfg, cfg)

            report = run(bench.problem, cfg, bench.mesh, bench.q_start)

            assert report.stop_reason == "discrepancy"
            assert report.k_star <= 30
            m = report.mesh
            q_true = bench.problem.interpolate_control(m, bench.q_true)
            errors.append(bench.problem.q_norm(m, report.q - q_true))

        assert all(e2 <= 1.1 * e1 for e1, e2 in zip(errors, errors[1:]))
