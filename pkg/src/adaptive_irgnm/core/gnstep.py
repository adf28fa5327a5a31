"""Linear-quadratic optimal control problem of one Gauss-Newton step.

The step Lagrangian in x = (q, u_old, w, v, v_old) is

    L(x) = ||C'(u_old) w + C(u_old) - g||^2 + 1/beta ||q - q0||^2
           + A'_u(q_old, u_old)(w)(v) + A'_q(q_old, u_old)(q - q_old)(v)
           + A(q_old, u_old)(v_old) - f(v_old)

and its extension by the decoupled constraint A(q, u)(z) - f(z) adds the
components (u, z). :class:`StepLagrangian` evaluates first derivatives and
Hessian blocks of L against arbitrary test spaces; with piecewise-linear tests
they form the discrete stationarity systems, with bubble tests they feed the
error estimators.
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import SubproblemError
from .mesh import Mesh1D
from .problem import InverseProblem, Space

logger = logging.getLogger(__name__)

STEP_COMPONENTS = ("q", "u_old", "w", "v", "v_old")
EXTENDED_COMPONENTS = STEP_COMPONENTS + ("u", "z")
KKT_COMPONENTS = ("q", "w", "v")


class StepLagrangian:
    def __init__(
        self,
        problem: InverseProblem,
        mesh: Mesh1D,
        q_old: np.ndarray,
        q0: np.ndarray,
        beta: float,
        x: dict[str, np.ndarray],
    ):
        self.problem = problem
        self.mesh = mesh
        self.q_old = q_old
        self.q0 = q0
        self.beta = beta
        self.x = x
        self.extended = "u" in x
        self.Q = problem.control_space(mesh)
        self.V = problem.state_space(mesh)

    def with_values(self, **values: np.ndarray) -> "StepLagrangian":
        return StepLagrangian(
            self.problem, self.mesh, self.q_old, self.q0, self.beta, {**self.x, **values}
        )

    @property
    def components(self) -> tuple[str, ...]:
        return EXTENDED_COMPONENTS if self.extended else STEP_COMPONENTS

    def space(self, name: str, bubble: bool = False) -> Space:
        base = self.Q if name == "q" else self.V
        return base.bubble_space() if bubble else base

    def _obs_residual(self, test: Space) -> np.ndarray:
        p, m, x = self.problem, self.mesh, self.x
        return p.observation_gram(m, test, self.V) @ (x["w"] + x["u_old"]) - p.observation_load(m, test)

    def gradient(self, name: str, bubble: bool = False) -> np.ndarray:
        """L'(x) tested with the basis of the given component's space"""
        p, m, x = self.problem, self.mesh, self.x
        qo, uo = self.q_old, x["u_old"]
        T = self.space(name, bubble)
        Q, V = self.Q, self.V
        if name == "q":
            g = (2.0 / self.beta) * (p.control_gram(m, T, Q) @ (x["q"] - self.q0))
            g = g + p.jacobian_q(m, qo, uo, V, T).T @ x["v"]
            if self.extended:
                g = g + p.jacobian_q(m, x["q"], x["u"], V, T).T @ x["z"]
            return g
        if name == "u_old":
            return (
                2.0 * self._obs_residual(T)
                + p.hessian_uu(m, qo, uo, du=x["w"], rows=T, cols=V) @ x["v"]
                + p.hessian_qu(m, qo, uo, dq=x["q"] - qo, rows=T, cols=V) @ x["v"]
                + p.jacobian_u(m, qo, uo, V, T).T @ x["v_old"]
            )
        if name == "w":
            return 2.0 * self._obs_residual(T) + p.jacobian_u(m, qo, uo, V, T).T @ x["v"]
        if name == "v":
            return p.jacobian_u(m, qo, uo, T, V) @ x["w"] + p.jacobian_q(m, qo, uo, T, Q) @ (
                x["q"] - qo
            )
        if name == "v_old":
            return p.residual(m, qo, uo, T)
        if name == "u":
            return p.jacobian_u(m, x["q"], x["u"], V, T).T @ x["z"]
        if name == "z":
            return p.residual(m, x["q"], x["u"], T)
        raise KeyError(name)

    def block(self, row: str, col: str, bubble: bool = False) -> sp.spmatrix | None:
        """Hessian block L''(x)(trial in col, test in row)"""
        p, m, x = self.problem, self.mesh, self.x
        qo, uo = self.q_old, x["u_old"]
        Q, V = self.Q, self.V
        Tq, Tv = self.space("q", bubble), self.space("v", bubble)
        blocks: dict[tuple[str, str], Callable[[], sp.spmatrix]] = {
            ("q", "q"): lambda: (2.0 / self.beta) * p.control_gram(m, Tq, Q),
            ("q", "u_old"): lambda: p.hessian_qu(m, qo, uo, z=x["v"], rows=Tq, cols=V),
            ("u_old", "q"): lambda: p.hessian_qu(m, qo, uo, z=x["v"], rows=Q, cols=Tv).T,
            ("q", "v"): lambda: p.jacobian_q(m, qo, uo, V, Tq).T,
            ("v", "q"): lambda: p.jacobian_q(m, qo, uo, Tv, Q),
            ("u_old", "u_old"): lambda: 2.0 * p.observation_gram(m, Tv, V)
            + p.hessian_uu(m, qo, uo, z=x["v_old"], rows=Tv, cols=V),
            ("u_old", "w"): lambda: 2.0 * p.observation_gram(m, Tv, V)
            + p.hessian_uu(m, qo, uo, z=x["v"], rows=Tv, cols=V),
            ("w", "u_old"): lambda: 2.0 * p.observation_gram(m, Tv, V)
            + p.hessian_uu(m, qo, uo, z=x["v"], rows=Tv, cols=V),
            ("u_old", "v"): lambda: p.hessian_uu(m, qo, uo, du=x["w"], rows=Tv, cols=V)
            + p.hessian_qu(m, qo, uo, dq=x["q"] - qo, rows=Tv, cols=V),
            ("v", "u_old"): lambda: p.hessian_uu(m, qo, uo, du=x["w"], rows=V, cols=Tv).T
            + p.hessian_qu(m, qo, uo, dq=x["q"] - qo, rows=V, cols=Tv).T,
            ("u_old", "v_old"): lambda: p.jacobian_u(m, qo, uo, V, Tv).T,
            ("v_old", "u_old"): lambda: p.jacobian_u(m, qo, uo, Tv, V),
            ("w", "w"): lambda: 2.0 * p.observation_gram(m, Tv, V),
            ("w", "v"): lambda: p.jacobian_u(m, qo, uo, V, Tv).T,
            ("v", "w"): lambda: p.jacobian_u(m, qo, uo, Tv, V),
        }
        if self.extended:
            q, u, z = x["q"], x["u"], x["z"]
            blocks.update(
                {
                    ("q", "u"): lambda: p.hessian_qu(m, q, u, z=z, rows=Tq, cols=V),
                    ("u", "q"): lambda: p.hessian_qu(m, q, u, z=z, rows=Q, cols=Tv).T,
                    ("q", "z"): lambda: p.jacobian_q(m, q, u, V, Tq).T,
                    ("z", "q"): lambda: p.jacobian_q(m, q, u, Tv, Q),
                    ("u", "u"): lambda: p.hessian_uu(m, q, u, z=z, rows=Tv, cols=V),
                    ("u", "z"): lambda: p.jacobian_u(m, q, u, V, Tv).T,
                    ("z", "u"): lambda: p.jacobian_u(m, q, u, Tv, V),
                }
            )
        build = blocks.get((row, col))
        return None if build is None else sp.csr_matrix(build())

    def hessian(self, names: Sequence[str], bubble: bool = False) -> sp.csr_matrix:
        rows = []
        for r in names:
            row = []
            for c in names:
                b = self.block(r, c, bubble)
                if b is None:
                    b = sp.csr_matrix((self.space(r, bubble).ndofs, self.space(c).ndofs))
                row.append(b)
            rows.append(row)
        return sp.bmat(rows, format="csr")

    def gradient_vector(self, names: Sequence[str], bubble: bool = False) -> np.ndarray:
        return np.concatenate([self.gradient(n, bubble) for n in names])

    def split(self, vec: np.ndarray, names: Sequence[str]) -> dict[str, np.ndarray]:
        out, start = {}, 0
        for n in names:
            size = self.space(n).ndofs
            out[n] = vec[start : start + size]
            start += size
        return out

    def defects(self, values: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {n: self.space(n).defect(v) for n, v in values.items()}


@dataclass(frozen=True)
class QoiBundle:
    i1: float
    i2: float
    i3: float
    i4: float

    def to_dict(self) -> dict[str, float]:
        return {"i1": self.i1, "i2": self.i2, "i3": self.i3, "i4": self.i4}


@dataclass(frozen=True, eq=False)
class GnState:
    mesh: Mesh1D
    beta: float
    q: np.ndarray
    u_old: np.ndarray
    w: np.ndarray
    v: np.ndarray
    v_old: np.ndarray
    q_old: np.ndarray
    q0: np.ndarray
    factor: object = field(default=None, repr=False)

    @property
    def x(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in STEP_COMPONENTS}

    def lagrangian(self, problem: InverseProblem) -> StepLagrangian:
        return StepLagrangian(problem, self.mesh, self.q_old, self.q0, self.beta, self.x)

    def kkt_residuals(self, problem: InverseProblem) -> dict[str, float]:
        lag = self.lagrangian(problem)
        return {n: float(np.max(np.abs(lag.gradient(n)), initial=0.0)) for n in STEP_COMPONENTS}


def solve_subproblem(
    p: InverseProblem,
    q_old: np.ndarray,
    u_old: np.ndarray,
    beta: float,
    m: Mesh1D,
) -> GnState:
    """Discrete stationary point of the step Lagrangian"""
    if not beta > 0:
        raise SubproblemError(f"Regularization parameter must be positive, got {beta}")
    Q, V = p.control_space(m), p.state_space(m)
    q0 = p.prior_vector(m)
    lag = StepLagrangian(
        p,
        m,
        q_old,
        q0,
        beta,
        {"q": Q.zeros(), "u_old": u_old, "w": V.zeros(), "v": V.zeros(), "v_old": V.zeros()},
    )

    kkt = lag.hessian(KKT_COMPONENTS)
    try:
        lu = splu(sp.csc_matrix(kkt))
    except RuntimeError as e:
        raise SubproblemError(f"Singular KKT system at beta={beta:.4g}: {e}")
    sol = lag.split(lu.solve(-lag.gradient_vector(KKT_COMPONENTS)), KKT_COMPONENTS)
    lag = lag.with_values(**sol)

    K = sp.csc_matrix(p.jacobian_u(m, q_old, u_old, V, V))
    try:
        v_old = splu(sp.csc_matrix(K.T)).solve(-lag.gradient("u_old"))
    except RuntimeError as e:
        raise SubproblemError(f"Singular linearized state operator: {e}")

    logger.debug(f"Solved step subproblem beta={beta:.6g} on {m.n_vertices} vertices")
    return GnState(
        mesh=m,
        beta=beta,
        q=sol["q"],
        u_old=u_old,
        w=sol["w"],
        v=sol["v"],
        v_old=v_old,
        q_old=q_old,
        q0=q0,
        factor=lu,
    )


def nonlinear_state(p: InverseProblem, state: GnState) -> np.ndarray:
    return p.solve_state(state.mesh, state.q)


def eval_qoi(p: InverseProblem, state: GnState, u: np.ndarray | None = None) -> QoiBundle:
    m = state.mesh
    if u is None:
        u = nonlinear_state(p, state)
    i2 = p.misfit(m, state.w + state.u_old)
    i3 = p.misfit(m, state.u_old)
    i4 = p.misfit(m, u)
    reg = p.q_norm(m, state.q - state.q0) ** 2 / state.beta
    return QoiBundle(i1=i2 + reg, i2=i2, i3=i3, i4=i4)


def tangent(p: InverseProblem, state: GnState) -> dict[str, np.ndarray]:
    """Derivative of (q, w, v) with respect to alpha = 1/beta"""
    if state.factor is None:
        raise SubproblemError("No KKT factorization attached to this state")
    m = state.mesh
    lag = state.lagrangian(p)
    load = np.zeros(sum(lag.space(n).ndofs for n in KKT_COMPONENTS))
    nq = lag.Q.ndofs
    load[:nq] = -2.0 * (p.q_gram(m) @ (state.q - state.q0))
    return lag.split(state.factor.solve(load), KKT_COMPONENTS)  # type: ignore[attr-defined]


def i_prime_beta(p: InverseProblem, state: GnState) -> float:
    """d/d(beta) of I_2 at the current beta"""
    m = state.mesh
    dw = tangent(p, state)["w"]
    obs = p.obs_gram(m) @ (state.w + state.u_old) - p.obs_load(m)
    di_dalpha = 2.0 * float(obs @ dw)
    return -di_dalpha / state.beta**2


def subproblem_objective(
    p: InverseProblem,
    m: Mesh1D,
    q_old: np.ndarray,
    u_old: np.ndarray,
    beta: float,
    q: np.ndarray,
) -> float:
    """Reduced Tikhonov functional of the linearized step"""
    w = p.apply_Fprime(m, q_old, u_old, q - q_old)
    q0 = p.prior_vector(m)
    return p.misfit(m, u_old + w) + p.q_norm(m, q - q0) ** 2 / beta


def with_beta(state: GnState, beta: float) -> GnState:
    return replace(state, beta=beta)
