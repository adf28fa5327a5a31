"""Adaptive iteratively regularized Gauss-Newton method.

Each Gauss-Newton step visits up to four nested meshes: the starting mesh,
the mesh left by the regularization parameter search, the mesh after
refining for the I_1 estimate (condition A), and the mesh after refining
for the I_3 estimate of the new iterate (condition C). The iteration stops
by the discrepancy principle I_3 < tau^2 delta^2.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .config import RunConfig
from .dwr import DorflerRefiner, Estimate, EtaBundle, eta1, eta2, eta3, eta3_state, eta4
from .errors import ConfigValidationError, IrgnmError, IterationError
from .gnstep import QoiBundle, eval_qoi, nonlinear_state
from .mesh import Mesh1D
from .problem import InverseProblem, estimate_ctc
from .regparam import BetaSearchResult, BetaStep, Refiner, prolong_iterate, select_beta

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Violation:
    name: str
    lhs: float
    rhs: float

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs

    def __str__(self) -> str:
        return f"{self.name}: {self.lhs:.6g} vs bound {self.rhs:.6g} (margin {self.margin:.3g})"


@dataclass(frozen=True)
class DerivedConstants:
    c4: float
    c5: float
    c_C: float
    tau_condition: float  # 2 (c_tc^2 + (1 + c_tc)^2 / tau^2)
    contraction: float  # (2 theta_upper + 4 c_tc^2) / (1 - 4 c_tc^2)

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def check_constants(cfg: RunConfig) -> list[Violation]:
    violations = []
    tau_condition = 2.0 * (cfg.c_tc**2 + (1.0 + cfg.c_tc) ** 2 / cfg.tau**2)
    if not tau_condition < cfg.theta_lower:
        violations.append(Violation("tau condition", tau_condition, cfg.theta_lower))

    denominator = 1.0 - 4.0 * cfg.c_tc**2
    contraction = (2.0 * cfg.theta_upper + 4.0 * cfg.c_tc**2) / denominator if denominator > 0 else np.inf
    if not contraction < 1.0:
        violations.append(Violation("contraction condition", contraction, 1.0))
    if not (1.0 + cfg.c3) * contraction <= cfg.c2:
        violations.append(Violation("step constant condition", (1.0 + cfg.c3) * contraction, cfg.c2))
    if not cfg.c2 < 1.0:
        violations.append(Violation("c2 < 1", cfg.c2, 1.0))

    if not 0.0 < cfg.theta_lower <= cfg.theta_upper < 0.5:
        violations.append(Violation("0 < theta_lower <= theta_upper < 1/2", cfg.theta_upper, 0.5))
    if not max(1.0, cfg.tau_beta_tilde) < cfg.tau_beta:
        violations.append(
            Violation("max(1, tau_beta_tilde) < tau_beta", max(1.0, cfg.tau_beta_tilde), cfg.tau_beta)
        )
    if not cfg.tau_beta <= cfg.tau:
        violations.append(Violation("tau_beta <= tau", cfg.tau_beta, cfg.tau))
    for name in ("c1", "c3"):
        if not getattr(cfg, name) > 0:
            violations.append(Violation(f"{name} > 0", 0.0, getattr(cfg, name)))
    if not 0.0 < cfg.marking_fraction <= 1.0:
        violations.append(Violation("0 < marking_fraction <= 1", cfg.marking_fraction, 1.0))
    return violations


def validate_config(cfg: RunConfig) -> DerivedConstants:
    violations = check_constants(cfg)
    if violations:
        for v in violations:
            logger.warning(f"Constant check failed: {v}")
        raise ConfigValidationError(violations)

    tau_condition = 2.0 * (cfg.c_tc**2 + (1.0 + cfg.c_tc) ** 2 / cfg.tau**2)
    gap = cfg.theta_lower - tau_condition
    c4 = 0.5 * gap
    c5 = gap / (4.0 * cfg.c_tc**2) if cfg.c_tc > 0 else np.inf
    c_C = min(cfg.c1, c5, cfg.c3 / (2.0 * (1.0 + cfg.c3)))
    return DerivedConstants(
        c4=c4,
        c5=c5,
        c_C=c_C,
        tau_condition=tau_condition,
        contraction=(2.0 * cfg.theta_upper + 4.0 * cfg.c_tc**2) / (1.0 - 4.0 * cfg.c_tc**2),
    )


def check_condition_A(eta1_value: float, i3h: float, dc: DerivedConstants) -> bool:
    return abs(eta1_value) <= dc.c4 * i3h


def check_condition_C(eta3_value: float, i3h: float, dc: DerivedConstants) -> bool:
    return abs(eta3_value) <= dc.c_C * i3h


@dataclass(frozen=True)
class I3Evaluation:
    u_old: np.ndarray
    i3h: float
    eta3: Estimate


def evaluate_I3(
    p: InverseProblem, q_old: np.ndarray, m: Mesh1D, u0: np.ndarray | None = None
) -> I3Evaluation:
    """State solve, misfit and its error estimate for the current iterate"""
    u_old = p.solve_state(m, q_old, u0=u0)
    return I3Evaluation(u_old, p.misfit(m, u_old), eta3_state(p, m, q_old, u_old))


@dataclass
class IterationRecord:
    k: int
    beta: float
    qoi: QoiBundle
    etas: dict[str, float]
    dofs: tuple[int, int, int, int]
    condA_rounds: int
    condC_rounds: int
    q_norm: float
    cond_A: bool
    cond_C: bool
    newton_steps: int
    i3h_next: float
    eta3_next: float
    i3h_unrefined: float
    ctc_estimate: float | None = None
    wall_time: float = 0.0
    beta_trace: list[BetaStep] = field(default_factory=list)
    mesh: Mesh1D | None = None  # mesh of the new iterate before condition C refinement
    q: np.ndarray | None = None

    def to_row(self) -> dict[str, Any]:
        return {
            "k": self.k,
            "beta": self.beta,
            "I1h": self.qoi.i1,
            "I2h": self.qoi.i2,
            "I3h": self.qoi.i3,
            "I4h": self.qoi.i4,
            **self.etas,
            "dofs_h1": self.dofs[0],
            "dofs_h2": self.dofs[1],
            "dofs_h3": self.dofs[2],
            "dofs_h4": self.dofs[3],
            "q_norm": self.q_norm,
            "condA_rounds": self.condA_rounds,
            "condC_rounds": self.condC_rounds,
        }


@dataclass
class RunReport:
    delta: float
    tau: float
    derived: DerivedConstants
    records: list[IterationRecord] = field(default_factory=list)
    mesh: Mesh1D | None = None
    q: np.ndarray | None = None
    stop_reason: str = "error"  # discrepancy | budget | error
    final_i3h: float = float("nan")
    initial_rounds: int = 0
    partial: bool = False

    @property
    def k_star(self) -> int:
        return len(self.records)

    @property
    def threshold(self) -> float:
        return self.tau**2 * self.delta**2

    def to_dict(self) -> dict[str, Any]:
        return {
            "k_star": self.k_star,
            "stop_reason": self.stop_reason,
            "final_I3h": self.final_i3h,
            "threshold": self.threshold,
            "delta": self.delta,
            "initial_refinements": self.initial_rounds,
            "final_vertices": None if self.mesh is None else self.mesh.n_vertices,
            "betas": [r.beta for r in self.records],
            "derived_constants": self.derived.to_dict(),
            "partial": self.partial,
        }


def run(
    p: InverseProblem,
    cfg: RunConfig,
    m0: Mesh1D,
    q_start: np.ndarray,
    refiner: Refiner | None = None,
) -> RunReport:
    dc = validate_config(cfg)
    if refiner is None:
        refiner = DorflerRefiner(cfg.marking_fraction, cfg.max_dofs)
    bcfg = cfg.beta_search()
    report = RunReport(delta=p.delta, tau=cfg.tau, derived=dc)
    threshold = report.threshold

    m = m0.with_stage(0)
    q_old = np.asarray(q_start, dtype=float)
    k = 0
    budget = False

    def refine_for_I3(ev: I3Evaluation, m: Mesh1D, q_old: np.ndarray):
        rounds = 0
        exhausted = False
        while not check_condition_C(ev.eta3.value, ev.i3h, dc):
            fine = refiner(m, ev.eta3.indicators) if rounds < cfg.max_refinements else None
            if fine is None:
                exhausted = True
                break
            q_fine = p.control_space(m).prolong(q_old, fine)
            u0 = p.state_space(m).prolong(ev.u_old, fine)
            m, q_old = fine, q_fine
            ev = evaluate_I3(p, q_old, m, u0=u0)
            rounds += 1
            logger.debug(f"Condition C refinement {rounds}: {m.n_vertices} vertices, I3={ev.i3h:.6g}")
        return ev, m, q_old, rounds, exhausted

    try:
        ev = evaluate_I3(p, q_old, m)
        ev, m, q_old, report.initial_rounds, budget = refine_for_I3(ev, m, q_old)
        beta: float | None = None

        while not budget and ev.i3h >= threshold and ev.i3h > 0.0:
            if k >= cfg.max_newton_steps:
                budget = True
                logger.warning(f"Gauss-Newton step budget of {cfg.max_newton_steps} reached")
                break
            started = time.perf_counter()
            m = m.with_stage(k)
            h1 = m.n_vertices

            search: BetaSearchResult = select_beta(
                p, q_old, ev.u_old, ev.i3h, bcfg, m, refiner, beta_start=beta
            )
            budget = search.budget_exhausted
            m, q_old, u_old, state = search.mesh, search.q_old, search.u_old, search.state
            h2 = m.n_vertices
            newton_steps = search.newton_steps
            trace = list(search.history)

            e1 = eta1(p, state)
            a_rounds = 0
            while not check_condition_A(e1.value, search.i3h, dc):
                fine = refiner(m, e1.indicators) if a_rounds < cfg.max_refinements else None
                if fine is None:
                    budget = True
                    break
                q_old, u_old = prolong_iterate(p, q_old, u_old, m, fine)
                m = fine
                search = select_beta(
                    p, q_old, u_old, p.misfit(m, u_old), bcfg, m, refiner, beta_start=search.beta
                )
                budget = budget or search.budget_exhausted
                m, q_old, u_old, state = search.mesh, search.q_old, search.u_old, search.state
                newton_steps += search.newton_steps
                trace.extend(search.history)
                e1 = eta1(p, state)
                a_rounds += 1
                logger.debug(f"Condition A refinement {a_rounds}: {m.n_vertices} vertices")
            h3 = m.n_vertices
            cond_A = check_condition_A(e1.value, search.i3h, dc)

            u = nonlinear_state(p, state)
            qoi = eval_qoi(p, state, u)
            etas = EtaBundle(e1, eta2(p, state), eta3(p, state), eta4(p, state, u))
            q_norm = p.q_norm(m, state.q - state.q0)
            try:
                ctc = estimate_ctc(p, state.q, q_old, m)
            except ValueError:
                ctc = None

            beta = search.beta
            q_old = state.q
            ev = I3Evaluation(u, qoi.i4, eta3_state(p, m, q_old, u))
            i3h_unrefined = ev.i3h
            ev, m, q_old, c_rounds, exhausted = refine_for_I3(ev, m, q_old)
            budget = budget or exhausted
            h4 = m.n_vertices

            record = IterationRecord(
                k=k,
                beta=beta,
                qoi=qoi,
                etas=etas.values(),
                dofs=(h1, h2, h3, h4),
                condA_rounds=a_rounds,
                condC_rounds=c_rounds,
                q_norm=q_norm,
                cond_A=cond_A,
                cond_C=check_condition_C(ev.eta3.value, ev.i3h, dc),
                newton_steps=newton_steps,
                i3h_next=ev.i3h,
                eta3_next=ev.eta3.value,
                i3h_unrefined=i3h_unrefined,
                ctc_estimate=ctc,
                wall_time=time.perf_counter() - started,
                beta_trace=trace,
                mesh=state.mesh,
                q=state.q.copy(),
            )
            report.records.append(record)
            logger.info(
                f"Step {k}: beta={beta:.6g} I2={qoi.i2:.6g} I3={ev.i3h:.6g} "
                f"vertices={h4} (A rounds {a_rounds}, C rounds {c_rounds})"
            )
            if i3h_unrefined != ev.i3h:
                logger.debug(f"I3 before C refinement {i3h_unrefined:.6g}, after {ev.i3h:.6g}")
            k += 1

    except IrgnmError as e:
        report.mesh, report.q, report.final_i3h = m, q_old, float("nan")
        report.stop_reason = "error"
        report.partial = True
        raise IterationError(f"Gauss-Newton step {k} failed: {e}", step=k, report=report) from e

    report.mesh, report.q, report.final_i3h = m, q_old, ev.i3h
    report.stop_reason = "discrepancy" if ev.i3h < threshold or ev.i3h == 0.0 else "budget"
    if budget and report.stop_reason == "budget":
        logger.warning(f"Run stopped by budget after {report.k_star} steps (I3={ev.i3h:.6g})")
    logger.info(f"Run finished: {report.stop_reason} at k*={report.k_star}, I3={ev.i3h:.6g}")
    return report


@dataclass(frozen=True)
class AuditRow:
    k: int
    iterate_bounded: bool  # ||q_k - q0|| <= ||q_true - q0||
    eta_condition: bool  # eta1 + 2 c_tc^2 eta3 <= (theta_lower - tau_condition) I3
    eta3_condition: bool  # eta3 <= c1 I3
    growth_condition: bool | None  # I3^k <= (1 + c3) I4^(k-1) + r^k
    error: float = float("nan")  # ||q_k - q_true||
    bregman: float = float("nan")  # 1/2 ||q_k - q_true||^2
    margins: dict[str, float] = field(default_factory=dict)

    @property
    def violated(self) -> bool:
        return not (self.iterate_bounded and self.eta_condition and self.eta3_condition) or (
            self.growth_condition is False
        )


def audit_theorem1(
    report: RunReport, q_true: object, p: InverseProblem, cfg: RunConfig, tol: float = 1e-8
) -> list[AuditRow]:
    """Per-step check of the convergence hypotheses.

    Estimator and functional values come from the log. Norms are recomputed
    from the stored iterates with q_true interpolated on each step's mesh.
    """
    rows = []
    dc = report.derived
    previous: IterationRecord | None = None
    for rec in report.records:
        if rec.mesh is None or rec.q is None:
            q_norm, true_norm, error = rec.q_norm, math.nan, math.nan
        else:
            q0 = p.prior_vector(rec.mesh)
            target = p.interpolate_control(rec.mesh, q_true)
            q_norm = p.q_norm(rec.mesh, rec.q - q0)
            true_norm = p.q_norm(rec.mesh, target - q0)
            error = p.q_norm(rec.mesh, rec.q - target)
        i3 = rec.qoi.i3
        eta_lhs = abs(rec.etas["eta1"]) + 2.0 * cfg.c_tc**2 * abs(rec.etas["eta3"])
        eta_rhs = (cfg.theta_lower - dc.tau_condition) * i3
        margins = {
            "iterate": true_norm - q_norm,
            "eta": eta_rhs - eta_lhs,
            "eta3": cfg.c1 * i3 - abs(rec.etas["eta3"]),
        }
        growth = None
        if previous is not None:
            bound = (1.0 + cfg.c3) * previous.qoi.i4 + cfg.slack(rec.k)
            margins["growth"] = bound - i3
            growth = i3 <= bound
        row = AuditRow(
            k=rec.k,
            iterate_bounded=bool(q_norm <= true_norm + tol),
            eta_condition=eta_lhs <= eta_rhs,
            eta3_condition=abs(rec.etas["eta3"]) <= cfg.c1 * i3,
            growth_condition=growth,
            error=error,
            bregman=0.5 * error**2,
            margins=margins,
        )
        if row.violated:
            logger.warning(f"Audit step {rec.k}: hypothesis violated, margins {margins}")
        rows.append(row)
        previous = rec
    return rows
