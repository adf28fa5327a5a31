"""Dual weighted residual estimators for the quantities of interest of a step.

Every estimator has the form 1/2 M'(x_h, y_h)(pi_h x_h - x_h, pi_h y_h - y_h)
for an auxiliary Lagrangian M(x, y) = J(x) + L'(x)(y). The reconstruction
defects are cell bubbles, so the derivatives are assembled against bubble test
spaces and the per-cell indicators are plain elementwise products.
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import SubproblemError
from .gnstep import GnState, StepLagrangian, tangent
from .mesh import MarkSet, Mesh1D
from .problem import InverseProblem, Space

logger = logging.getLogger(__name__)

GoalDerivative = Callable[[Space], np.ndarray]


@dataclass(frozen=True)
class Estimate:
    value: float
    indicators: np.ndarray

    @classmethod
    def zero(cls, n_cells: int) -> "Estimate":
        return cls(0.0, np.zeros(n_cells))

    def __abs__(self) -> float:
        return abs(self.value)


@dataclass(frozen=True)
class EtaBundle:
    eta1: Estimate
    eta2: Estimate
    eta3: Estimate
    eta4: Estimate

    def values(self) -> dict[str, float]:
        return {
            "eta1": self.eta1.value,
            "eta2": self.eta2.value,
            "eta3": self.eta3.value,
            "eta4": self.eta4.value,
        }


@dataclass(frozen=True)
class AuxAdjoint:
    """Discrete stationary point of an auxiliary Lagrangian"""

    components: dict[str, np.ndarray]
    residual: float = field(default=0.0)


def _solve(matrix: sp.spmatrix, rhs: np.ndarray, what: str) -> np.ndarray:
    try:
        return splu(sp.csc_matrix(matrix)).solve(rhs)
    except RuntimeError as e:
        raise SubproblemError(f"Singular {what} system: {e}")


def _extended(p: InverseProblem, state: GnState, u: np.ndarray) -> StepLagrangian:
    lag = state.lagrangian(p)
    return lag.with_values(u=u, z=lag.V.zeros())


def solve_aux(lag: StepLagrangian, goal: dict[str, GoalDerivative]) -> AuxAdjoint:
    """Solve L''(x_h)(y_h, dx) = -J'(x_h)(dx) for all discrete dx"""
    names = lag.components
    rhs = np.concatenate([goal[n](lag.space(n)) if n in goal else lag.space(n).zeros() for n in names])
    H = lag.hessian(names)
    y = _solve(H, -rhs, "auxiliary adjoint")
    residual = float(np.max(np.abs(H @ y + rhs), initial=0.0))
    return AuxAdjoint(lag.split(y, names), residual)


def goal_estimate(
    lag: StepLagrangian,
    goal: dict[str, GoalDerivative],
    aux: AuxAdjoint,
) -> Estimate:
    names = lag.components
    dx = lag.defects({n: lag.x[n] for n in names})
    dy = lag.defects(aux.components)
    indicators = np.zeros(lag.mesh.n_cells)
    for n in names:
        if n in goal:
            indicators += goal[n](lag.space(n, bubble=True)) * dx[n]
        indicators += lag.gradient(n, bubble=True) * dy[n]
        for c in names:
            block = lag.block(n, c, bubble=True)
            if block is not None:
                indicators += dx[n] * (block @ aux.components[c])
    indicators *= 0.5
    return Estimate(float(indicators.sum()), indicators)


def eta1(p: InverseProblem, state: GnState) -> Estimate:
    """1/2 L'(x_h)(pi_h x_h - x_h)"""
    lag = state.lagrangian(p)
    dx = lag.defects(state.x)
    indicators = np.zeros(state.mesh.n_cells)
    for n in lag.components:
        indicators += lag.gradient(n, bubble=True) * dx[n]
    indicators *= 0.5
    return Estimate(float(indicators.sum()), indicators)


def _i2_goal(p: InverseProblem, lag: StepLagrangian) -> dict[str, GoalDerivative]:
    def d(test: Space) -> np.ndarray:
        return 2.0 * lag._obs_residual(test)

    return {"u_old": d, "w": d}


def _i3_goal(p: InverseProblem, state: GnState) -> dict[str, GoalDerivative]:
    m, V = state.mesh, p.state_space(state.mesh)

    def d(test: Space) -> np.ndarray:
        return 2.0 * (p.observation_gram(m, test, V) @ state.u_old - p.observation_load(m, test))

    return {"u_old": d}


def _i4_goal(p: InverseProblem, state: GnState, u: np.ndarray) -> dict[str, GoalDerivative]:
    m, V = state.mesh, p.state_space(state.mesh)

    def d(test: Space) -> np.ndarray:
        return 2.0 * (p.observation_gram(m, test, V) @ u - p.observation_load(m, test))

    return {"u": d}


def solve_aux_M(p: InverseProblem, state: GnState) -> AuxAdjoint:
    lag = state.lagrangian(p)
    return solve_aux(lag, _i2_goal(p, lag))


def eta2(p: InverseProblem, state: GnState, aux: AuxAdjoint | None = None) -> Estimate:
    lag = state.lagrangian(p)
    goal = _i2_goal(p, lag)
    return goal_estimate(lag, goal, aux or solve_aux(lag, goal))


def solve_aux_N(p: InverseProblem, state: GnState) -> AuxAdjoint:
    return solve_aux(state.lagrangian(p), _i3_goal(p, state))


def eta3(p: InverseProblem, state: GnState, aux: AuxAdjoint | None = None) -> Estimate:
    lag = state.lagrangian(p)
    goal = _i3_goal(p, state)
    return goal_estimate(lag, goal, aux or solve_aux(lag, goal))


def eta3_state(p: InverseProblem, m: Mesh1D, q_old: np.ndarray, u_old: np.ndarray) -> Estimate:
    """Estimate of I_3 error from the state equation alone.

    Used before a step has been solved on the mesh, when only (q_old, u_old)
    is available.
    """
    V = p.state_space(m)
    B = V.bubble_space()

    def goal(test: Space) -> np.ndarray:
        return 2.0 * (p.observation_gram(m, test, V) @ u_old - p.observation_load(m, test))

    K = p.jacobian_u(m, q_old, u_old, V, V)
    z = _solve(sp.csc_matrix(K).T, -goal(V), "state adjoint")
    du = V.defect(u_old)
    dz = V.defect(z)
    indicators = 0.5 * (
        goal(B) * du
        + du * (p.jacobian_u(m, q_old, u_old, V, B).T @ z)
        + p.residual(m, q_old, u_old, B) * dz
    )
    return Estimate(float(indicators.sum()), indicators)


def solve_aux_K(p: InverseProblem, state: GnState, u: np.ndarray) -> AuxAdjoint:
    return solve_aux(_extended(p, state, u), _i4_goal(p, state, u))


def eta4(
    p: InverseProblem, state: GnState, u: np.ndarray, aux: AuxAdjoint | None = None
) -> Estimate:
    lag = _extended(p, state, u)
    goal = _i4_goal(p, state, u)
    return goal_estimate(lag, goal, aux or solve_aux(lag, goal))


def eta_iprime(p: InverseProblem, state: GnState) -> Estimate:
    """Estimate for the derivative of I_2 with respect to beta.

    The functional -alpha^2 * 2 <C(w + u_old) - g, C w_dot> is estimated with
    the discrete tangent w_dot held fixed.
    """
    lag = state.lagrangian(p)
    m, V = state.mesh, lag.V
    w_dot = tangent(p, state)["w"]
    scale = -2.0 / state.beta**2

    def d(test: Space) -> np.ndarray:
        return scale * (p.observation_gram(m, test, V) @ w_dot)

    goal = {"u_old": d, "w": d}
    return goal_estimate(lag, goal, solve_aux(lag, goal))


def estimate_all(p: InverseProblem, state: GnState, u: np.ndarray) -> EtaBundle:
    return EtaBundle(
        eta1=eta1(p, state),
        eta2=eta2(p, state),
        eta3=eta3(p, state),
        eta4=eta4(p, state, u),
    )


def mark_cells(indicators: Sequence[float] | np.ndarray, fraction: float) -> MarkSet:
    """Dörfler marking on the indicator magnitudes"""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"Marking fraction must lie in (0, 1], got {fraction}")
    etas = np.abs(np.asarray(indicators, dtype=float))
    if etas.size == 0:
        raise ValueError("No indicators to mark")
    total = float(etas.sum())
    if total == 0.0:
        return MarkSet()

    # stable sort on -eta keeps lower indices first among ties
    order = np.argsort(-etas, kind="stable")
    target = np.inf if fraction >= 1.0 else fraction * total * (1.0 - 1e-12)
    marked: list[int] = []
    accumulated = 0.0
    for i in order:
        if accumulated >= target or etas[i] == 0.0:
            break
        marked.append(int(i))
        accumulated += etas[i]
    logger.debug(f"Marked {len(marked)} of {etas.size} cells (fraction {fraction})")
    return MarkSet.of(marked)


@dataclass(frozen=True)
class DorflerRefiner:
    """Refine by bulk marking until the vertex budget is reached"""

    fraction: float = 0.5
    max_dofs: int = 20000

    def __call__(self, m: Mesh1D, indicators: np.ndarray) -> Mesh1D | None:
        marks = mark_cells(indicators, self.fraction)
        if not marks:
            return None
        fine = m.refine(marks)
        if fine.n_vertices > self.max_dofs:
            logger.warning(
                f"Refinement to {fine.n_vertices} vertices exceeds budget of {self.max_dofs}"
            )
            return None
        return fine
