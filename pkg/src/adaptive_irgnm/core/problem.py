"""Inverse problems F = C o S given through the semilinear form A(q,u)(v).

Every form is returned as a vector or sparse matrix over explicit test and
trial spaces. Test spaces may be bubble spaces, which is how the error
estimators evaluate residuals against reconstruction defects. A is assumed
affine in q with vanishing third derivatives.
"""

import copy
import logging
from abc import ABC, abstractmethod
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Protocol
from weakref import WeakKeyDictionary

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import StateSolveError
from .fem import (
    FeFunction,
    FeSpace,
    assemble_matrix,
    assemble_vector,
    quadrature_integrate,
    quadrature_points,
)
from .mesh import Mesh1D

logger = logging.getLogger(__name__)

ScalarFunction = Callable[[np.ndarray], np.ndarray]


class DiscreteSpace(Protocol):
    bubble: bool

    @property
    def ndofs(self) -> int: ...

    def bubble_space(self) -> "DiscreteSpace": ...

    def zeros(self) -> np.ndarray: ...

    def defect(self, vec: np.ndarray) -> np.ndarray: ...

    def prolong(self, vec: np.ndarray, fine: Mesh1D) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class EuclideanSpace:
    """Coordinate space of a mesh-independent problem.

    Its bubble space has one (always zero) degree of freedom per mesh cell so
    estimator indicators keep the cell layout of the mesh.
    """

    n: int
    mesh: Mesh1D
    bubble: bool = False

    @property
    def ndofs(self) -> int:
        return self.mesh.n_cells if self.bubble else self.n

    def bubble_space(self) -> "EuclideanSpace":
        return EuclideanSpace(self.n, self.mesh, bubble=True)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.ndofs)

    def defect(self, vec: np.ndarray) -> np.ndarray:
        return np.zeros(self.mesh.n_cells)

    def prolong(self, vec: np.ndarray, fine: Mesh1D) -> np.ndarray:
        return np.array(vec, dtype=float)

    def with_mesh(self, mesh: Mesh1D) -> "EuclideanSpace":
        return EuclideanSpace(self.n, mesh, self.bubble)


Space = FeSpace | EuclideanSpace


def _lu(matrix: sp.spmatrix, what: str, q: np.ndarray | None = None):
    try:
        return splu(sp.csc_matrix(matrix))
    except RuntimeError as e:
        q_min = float(np.min(q)) if q is not None and len(q) else None
        raise StateSolveError(f"Singular {what} (min q = {q_min}): {e}", q_min=q_min)


class InverseProblem(ABC):
    """Abstract F(q) = C(S(q)) with S defined by A(q,u)(v) = f(v)"""

    delta: float
    rho: float

    def __init__(self, delta: float = 0.0, rho: float = 1.0):
        self.delta = delta
        self.rho = rho
        self._cache: WeakKeyDictionary = WeakKeyDictionary()

    # spaces and vectors
    @abstractmethod
    def control_space(self, mesh: Mesh1D) -> Space: ...

    @abstractmethod
    def state_space(self, mesh: Mesh1D) -> Space: ...

    @abstractmethod
    def prior_vector(self, mesh: Mesh1D) -> np.ndarray: ...

    @abstractmethod
    def interpolate_control(self, mesh: Mesh1D, q: object) -> np.ndarray: ...

    # forms
    @abstractmethod
    def residual(self, mesh: Mesh1D, q: np.ndarray, u: np.ndarray, test: Space) -> np.ndarray:
        """A(q,u)(test_i) - f(test_i)"""

    @abstractmethod
    def jacobian_u(
        self, mesh: Mesh1D, q: np.ndarray, u: np.ndarray, test: Space, trial: Space
    ) -> sp.spmatrix:
        """A'_u(q,u)(trial_j)(test_i)"""

    @abstractmethod
    def jacobian_q(
        self, mesh: Mesh1D, q: np.ndarray, u: np.ndarray, test: Space, trial: Space
    ) -> sp.spmatrix:
        """A'_q(q,u)(trial_j)(test_i)"""

    @abstractmethod
    def hessian_qu(
        self,
        mesh: Mesh1D,
        q: np.ndarray,
        u: np.ndarray,
        *,
        rows: Space,
        cols: Space,
        dq: np.ndarray | None = None,
        du: np.ndarray | None = None,
        z: np.ndarray | None = None,
    ) -> sp.spmatrix:
        """A''_qu(q,u)(dq,du)(z) with one slot fixed.

        The two free slots, taken in the order (dq, du, z), run over the
        bases of ``rows`` and ``cols``.
        """

    @abstractmethod
    def hessian_uu(
        self,
        mesh: Mesh1D,
        q: np.ndarray,
        u: np.ndarray,
        *,
        rows: Space,
        cols: Space,
        du: np.ndarray | None = None,
        z: np.ndarray | None = None,
    ) -> sp.spmatrix:
        """A''_uu(q,u)(du1,du2)(z) with du1 or z fixed"""

    @abstractmethod
    def observation_gram(self, mesh: Mesh1D, test: Space, trial: Space) -> sp.spmatrix:
        """<C trial_j, C test_i>_G"""

    @abstractmethod
    def observation_load(self, mesh: Mesh1D, test: Space) -> np.ndarray:
        """<g, C test_i>_G"""

    @abstractmethod
    def data_norm2(self, mesh: Mesh1D) -> float: ...

    @abstractmethod
    def control_gram(self, mesh: Mesh1D, test: Space, trial: Space) -> sp.spmatrix:
        """<trial_j, test_i>_Q"""

    @abstractmethod
    def with_data(self, data: object, delta: float) -> "InverseProblem": ...

    @abstractmethod
    def exact_output(self, mesh: Mesh1D, q_true: object) -> object:
        """Noise-free data F(q_true) computed on the given mesh"""

    @abstractmethod
    def add_noise(self, clean: object, mesh: Mesh1D, delta: float, seed: int) -> object: ...

    def check_control(self, mesh: Mesh1D, q: np.ndarray) -> None:
        """Hook for solvability preconditions on the control"""

    # cached P1 blocks
    def _cached(self, mesh: Mesh1D, name: str, build: Callable[[], object]):
        entry = self._cache.setdefault(mesh, {})
        if name not in entry:
            entry[name] = build()
        return entry[name]

    def obs_gram(self, mesh: Mesh1D) -> sp.spmatrix:
        V = self.state_space(mesh)
        return self._cached(mesh, "obs_gram", lambda: self.observation_gram(mesh, V, V))

    def obs_load(self, mesh: Mesh1D) -> np.ndarray:
        V = self.state_space(mesh)
        return self._cached(mesh, "obs_load", lambda: self.observation_load(mesh, V))

    def obs_norm2(self, mesh: Mesh1D) -> float:
        return self._cached(mesh, "data_norm2", lambda: self.data_norm2(mesh))

    def q_gram(self, mesh: Mesh1D) -> sp.spmatrix:
        Q = self.control_space(mesh)
        return self._cached(mesh, "q_gram", lambda: self.control_gram(mesh, Q, Q))

    # derived operations
    def misfit(self, mesh: Mesh1D, y: np.ndarray) -> float:
        """||C y - g||_G^2"""
        value = y @ (self.obs_gram(mesh) @ y) - 2.0 * y @ self.obs_load(mesh) + self.obs_norm2(mesh)
        return max(float(value), 0.0)

    def g_norm(self, mesh: Mesh1D, y: np.ndarray) -> float:
        return float(np.sqrt(max(y @ (self.obs_gram(mesh) @ y), 0.0)))

    def q_norm(self, mesh: Mesh1D, q: np.ndarray) -> float:
        return float(np.sqrt(max(q @ (self.q_gram(mesh) @ q), 0.0)))

    def solve_state(
        self,
        mesh: Mesh1D,
        q: np.ndarray,
        u0: np.ndarray | None = None,
        tol: float = 1e-10,
        max_iter: int = 20,
    ) -> np.ndarray:
        self.check_control(mesh, q)
        V = self.state_space(mesh)
        u = V.zeros() if u0 is None else np.array(u0, dtype=float)
        r = self.residual(mesh, q, u, V)
        for _ in range(max_iter):
            if np.linalg.norm(r) <= tol:
                break
            lu = _lu(self.jacobian_u(mesh, q, u, V, V), "state operator", q)
            u = u + lu.solve(-r)
            r_new = self.residual(mesh, q, u, V)
            if np.linalg.norm(r_new) >= np.linalg.norm(r):
                r = r_new
                break
            r = r_new
        if not np.all(np.isfinite(u)) or np.linalg.norm(r) > 1e3 * tol:
            q_min = float(np.min(q))
            raise StateSolveError(
                f"State equation not solved (residual {np.linalg.norm(r):.3e}, min q = {q_min})",
                q_min=q_min,
            )
        return u

    def apply_F(self, mesh: Mesh1D, q: np.ndarray) -> np.ndarray:
        return self.solve_state(mesh, q)

    def apply_Fprime(self, mesh: Mesh1D, q: np.ndarray, u: np.ndarray, dq: np.ndarray) -> np.ndarray:
        V, Q = self.state_space(mesh), self.control_space(mesh)
        lu = _lu(self.jacobian_u(mesh, q, u, V, V), "linearized state operator", q)
        return lu.solve(-(self.jacobian_q(mesh, q, u, V, Q) @ dq))

    def apply_Fprime_adjoint(
        self, mesh: Mesh1D, q: np.ndarray, u: np.ndarray, r: np.ndarray
    ) -> np.ndarray:
        """Riesz representative in Q of dq -> <r, F'(q) dq>_G"""
        V, Q = self.state_space(mesh), self.control_space(mesh)
        K = sp.csc_matrix(self.jacobian_u(mesh, q, u, V, V))
        z = _lu(K.T, "adjoint state operator", q).solve(self.obs_gram(mesh) @ r)
        load = -(self.jacobian_q(mesh, q, u, V, Q).T @ z)
        return _lu(self.q_gram(mesh), "control Gram matrix").solve(load)


class CoefficientProblem(InverseProblem):
    """-u'' + q u = f on (0,1), u(0) = u(1) = 0, observed in L2(0,1)"""

    def __init__(
        self,
        source: ScalarFunction | float,
        data: FeFunction | None = None,
        prior: ScalarFunction | float = 0.0,
        exact: ScalarFunction | float | None = None,
        delta: float = 0.0,
        rho: float = 1.0,
        q_lower_bound: float = -4.0,
    ):
        super().__init__(delta, rho)
        self.source = source
        self.data = data
        self.prior = prior
        self.exact = exact
        self.q_lower_bound = q_lower_bound

    def _f(self, x: np.ndarray) -> np.ndarray:
        if callable(self.source):
            return np.broadcast_to(self.source(x), x.shape)
        return np.full(x.shape, float(self.source))

    def _g(self, x: np.ndarray) -> np.ndarray:
        if self.data is None:
            return np.zeros(x.shape)
        return self.data(x.ravel()).reshape(x.shape)

    def control_space(self, mesh: Mesh1D) -> FeSpace:
        return FeSpace(mesh, dirichlet=False)

    def state_space(self, mesh: Mesh1D) -> FeSpace:
        return FeSpace(mesh, dirichlet=True)

    def prior_vector(self, mesh: Mesh1D) -> np.ndarray:
        return self.control_space(mesh).interpolate(self.prior)

    def interpolate_control(self, mesh: Mesh1D, q: object) -> np.ndarray:
        if isinstance(q, FeFunction):
            return np.asarray(q(mesh.vertices), dtype=float)
        return self.control_space(mesh).interpolate(q)  # type: ignore[arg-type]

    def check_control(self, mesh: Mesh1D, q: np.ndarray) -> None:
        q_min = float(np.min(q))
        if q_min < self.q_lower_bound:
            raise StateSolveError(
                f"Coefficient minimum {q_min:.4g} below admissible bound {self.q_lower_bound}",
                q_min=q_min,
            )

    def residual(self, mesh, q, u, test):
        qf = self.control_space(mesh).field(q)
        uf = self.state_space(mesh).field(u)
        return assemble_vector(
            test,
            lambda phi, x: uf.der * phi.der + qf.val * uf.val * phi.val - self._f(x) * phi.val,
        )

    def jacobian_u(self, mesh, q, u, test, trial):
        qf = self.control_space(mesh).field(q)
        return assemble_matrix(
            test, trial, lambda psi, phi, x: psi.der * phi.der + qf.val * psi.val * phi.val
        )

    def jacobian_q(self, mesh, q, u, test, trial):
        uf = self.state_space(mesh).field(u)
        return assemble_matrix(test, trial, lambda psi, phi, x: psi.val * uf.val * phi.val)

    def hessian_qu(self, mesh, q, u, *, rows, cols, dq=None, du=None, z=None):
        fixed = [v for v in (dq, du, z) if v is not None]
        if len(fixed) != 1:
            raise ValueError("Exactly one slot of A''_qu must be fixed")
        if dq is not None:
            weight = self.control_space(mesh).field(dq)
        else:
            weight = self.state_space(mesh).field(du if du is not None else z)
        return assemble_matrix(rows, cols, lambda psi, phi, x: weight.val * psi.val * phi.val)

    def hessian_uu(self, mesh, q, u, *, rows, cols, du=None, z=None):
        return sp.csr_matrix((rows.ndofs, cols.ndofs))

    def observation_gram(self, mesh, test, trial):
        return assemble_matrix(test, trial, lambda psi, phi, x: psi.val * phi.val)

    def data_breakpoints(self) -> np.ndarray | None:
        """Kinks of the data, integrated over exactly on any working mesh"""
        if isinstance(self.data, FeFunction):
            return self.data.mesh.vertices
        return None

    def observation_load(self, mesh, test):
        return assemble_vector(test, lambda phi, x: self._g(x) * phi.val, self.data_breakpoints())

    def data_norm2(self, mesh):
        return quadrature_integrate(mesh, lambda x: self._g(x) ** 2, self.data_breakpoints())

    def control_gram(self, mesh, test, trial):
        return assemble_matrix(test, trial, lambda psi, phi, x: psi.val * phi.val)

    def with_data(self, data, delta):
        clone = copy.copy(self)
        clone.data = data
        clone.delta = delta
        clone._cache = WeakKeyDictionary()
        return clone

    def exact_output(self, mesh, q_true):
        u = self.solve_state(mesh, self.interpolate_control(mesh, q_true))
        return self.state_space(mesh).to_function(u)

    def add_noise(self, clean, mesh, delta, seed):
        values = np.array(clean.vertex_values, dtype=float)
        if delta > 0:
            rng = np.random.default_rng(seed)
            noise = FeFunction(mesh, rng.standard_normal(mesh.n_vertices))
            x, w = quadrature_points(mesh)
            norm = np.sqrt(np.sum(noise.at_qp().val ** 2 * w))
            values = values + delta / norm * noise.vertex_values
        return FeFunction(mesh, values)


def _dense_block(test: Space, trial: Space, matrix: np.ndarray) -> sp.csr_matrix:
    if test.bubble or trial.bubble:
        return sp.csr_matrix((test.ndofs, trial.ndofs))
    return sp.csr_matrix(matrix)


class DenseLinearProblem(InverseProblem):
    """F(q) = T q with state u = T q and identity observation"""

    def __init__(
        self,
        T: np.ndarray,
        data: np.ndarray | None = None,
        prior: np.ndarray | float = 0.0,
        exact: np.ndarray | None = None,
        delta: float = 0.0,
        rho: float = 1.0,
    ):
        super().__init__(delta, rho)
        self.T = np.asarray(T, dtype=float)
        m, n = self.T.shape
        self.data = np.zeros(m) if data is None else np.asarray(data, dtype=float)
        self.prior = np.broadcast_to(np.asarray(prior, dtype=float), (n,)).copy()
        self.exact = None if exact is None else np.asarray(exact, dtype=float)

    @property
    def shape(self) -> tuple[int, int]:
        return self.T.shape

    def control_space(self, mesh):
        return EuclideanSpace(self.T.shape[1], mesh)

    def state_space(self, mesh):
        return EuclideanSpace(self.T.shape[0], mesh)

    def prior_vector(self, mesh):
        return self.prior.copy()

    def interpolate_control(self, mesh, q):
        return np.broadcast_to(np.asarray(q, dtype=float), (self.T.shape[1],)).copy()

    def residual(self, mesh, q, u, test):
        if test.bubble:
            return test.zeros()
        return u - self.T @ q

    def jacobian_u(self, mesh, q, u, test, trial):
        return _dense_block(test, trial, np.eye(self.T.shape[0]))

    def jacobian_q(self, mesh, q, u, test, trial):
        return _dense_block(test, trial, -self.T)

    def hessian_qu(self, mesh, q, u, *, rows, cols, dq=None, du=None, z=None):
        return sp.csr_matrix((rows.ndofs, cols.ndofs))

    def hessian_uu(self, mesh, q, u, *, rows, cols, du=None, z=None):
        return sp.csr_matrix((rows.ndofs, cols.ndofs))

    def observation_gram(self, mesh, test, trial):
        return _dense_block(test, trial, np.eye(self.T.shape[0]))

    def observation_load(self, mesh, test):
        return test.zeros() if test.bubble else self.data.copy()

    def data_norm2(self, mesh):
        return float(self.data @ self.data)

    def control_gram(self, mesh, test, trial):
        return _dense_block(test, trial, np.eye(self.T.shape[1]))

    def with_data(self, data, delta):
        clone = copy.copy(self)
        clone.data = np.asarray(data, dtype=float)
        clone.delta = delta
        clone._cache = WeakKeyDictionary()
        return clone

    def exact_output(self, mesh, q_true):
        return self.T @ self.interpolate_control(mesh, q_true)

    def add_noise(self, clean, mesh, delta, seed):
        values = np.array(clean, dtype=float)
        if delta > 0:
            noise = np.random.default_rng(seed).standard_normal(len(values))
            values = values + delta * noise / np.linalg.norm(noise)
        return values


def solve_state(p: InverseProblem, q: np.ndarray, m: Mesh1D) -> np.ndarray:
    return p.solve_state(m, q)


def apply_F(p: InverseProblem, q: np.ndarray, m: Mesh1D) -> np.ndarray:
    return p.apply_F(m, q)


def apply_Fprime(p: InverseProblem, q: np.ndarray, u: np.ndarray, dq: np.ndarray, m: Mesh1D) -> np.ndarray:
    return p.apply_Fprime(m, q, u, dq)


def apply_Fprime_adjoint(
    p: InverseProblem, q: np.ndarray, u: np.ndarray, r: np.ndarray, m: Mesh1D
) -> np.ndarray:
    return p.apply_Fprime_adjoint(m, q, u, r)


def estimate_ctc(p: InverseProblem, q: np.ndarray, q_bar: np.ndarray, m: Mesh1D) -> float:
    """||F(q) - F(q_bar) - F'(q)(q - q_bar)|| / ||F(q) - F(q_bar)||"""
    u = p.solve_state(m, q)
    u_bar = p.solve_state(m, q_bar)
    diff = u - u_bar
    linear = p.apply_Fprime(m, q, u, q - q_bar)
    numerator = p.g_norm(m, diff - linear)
    denominator = p.g_norm(m, diff)
    if denominator == 0.0:
        if numerator <= 1e-14:
            return 0.0
        raise ValueError(
            f"Tangential cone condition violated: F(q) = F(q_bar) but remainder {numerator:.3e}"
        )
    return numerator / denominator


def check_tangential_cone(
    p: InverseProblem,
    q_bar: np.ndarray,
    m: Mesh1D,
    directions: Sequence[np.ndarray],
    scales: Sequence[float],
) -> float:
    """Largest sampled cone ratio around q_bar"""
    worst = 0.0
    for direction in directions:
        for scale in scales:
            worst = max(worst, estimate_ctc(p, q_bar + scale * direction, q_bar, m))
    logger.debug(f"Sampled tangential cone constant {worst:.4g}")
    return worst


def synthesize_data(
    p: InverseProblem, q_true: object, delta: float, seed: int, m_fine: Mesh1D
) -> object:
    """F(q_true) on the reference mesh plus noise of G-norm exactly delta"""
    if delta < 0:
        raise ValueError(f"Noise level must be nonnegative, got {delta}")
    clean = p.exact_output(m_fine, q_true)
    return p.add_noise(clean, m_fine, delta, seed)
