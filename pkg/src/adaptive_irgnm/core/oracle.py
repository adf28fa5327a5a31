"""Brute-force references for testing the adaptive solver.

Nothing here goes through the sparse assembly of :mod:`fem`: element matrices
are written out by hand and every system is solved densely.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import SubproblemError
from .gnstep import GnState, QoiBundle, eval_qoi, solve_subproblem
from .mesh import Mesh1D, refine_uniformly
from .problem import CoefficientProblem, InverseProblem

logger = logging.getLogger(__name__)

_xi, _wi = np.polynomial.legendre.leggauss(3)
_XI = 0.5 * (_xi + 1.0)
_WI = 0.5 * _wi


def dense_tikhonov(T: np.ndarray, g: np.ndarray, q0: np.ndarray, beta: float) -> np.ndarray:
    """Solve (T^T T + 1/beta I) q = T^T g + 1/beta q0"""
    T = np.asarray(T, dtype=float)
    n = T.shape[1]
    lhs = T.T @ T + np.eye(n) / beta
    rhs = T.T @ np.asarray(g, dtype=float) + np.asarray(q0, dtype=float) / beta
    try:
        return np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as e:
        raise SubproblemError(f"Singular normal equations at beta={beta}: {e}")


def dense_residual(T: np.ndarray, g: np.ndarray, q0: np.ndarray, beta: float) -> float:
    """||T q_beta - g||^2 for the Tikhonov solution q_beta"""
    q = dense_tikhonov(T, g, q0, beta)
    r = np.asarray(T) @ q - np.asarray(g)
    return float(r @ r)


def _element_mass(h: float) -> np.ndarray:
    return h / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])


def _element_stiffness(h: float) -> np.ndarray:
    return np.array([[1.0, -1.0], [-1.0, 1.0]]) / h


def _element_weighted_mass(h: float, c: tuple[float, float]) -> np.ndarray:
    """int c phi_i phi_j for linear c with nodal values c"""
    out = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(2):
                triple = h / 4.0 if i == j == k else h / 12.0
                out[i, j] += c[k] * triple
    return out


def _element_data(
    a: float, b: float, breaks: np.ndarray | None, g: Callable[[np.ndarray], np.ndarray]
) -> tuple[np.ndarray, float]:
    """Load and squared norm of g on [a, b], split at the kinks of g"""
    cuts = np.array([a, b]) if breaks is None else np.union1d([a, b], breaks[(breaks > a) & (breaks < b)])
    load = np.zeros(2)
    norm2 = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        x = lo + (hi - lo) * _XI
        values = np.broadcast_to(np.asarray(g(x), dtype=float), x.shape)
        xi = (x - a) / (b - a)
        load += np.array([np.sum(values * (1.0 - xi) * _WI), np.sum(values * xi * _WI)]) * (hi - lo)
        norm2 += float(np.sum(values**2 * _WI)) * (hi - lo)
    return load, norm2


@dataclass
class DenseSystem:
    mass: np.ndarray
    stiffness: np.ndarray
    load_g: np.ndarray
    g_norm2: float


def _assemble(p: CoefficientProblem, m: Mesh1D) -> DenseSystem:
    n = m.n_vertices
    mass = np.zeros((n, n))
    stiffness = np.zeros((n, n))
    load_g = np.zeros(n)
    g_norm2 = 0.0

    data = p.data
    g = (lambda x: data(x)) if data is not None else (lambda x: np.zeros(x.shape))
    breaks = p.data_breakpoints()

    for e in range(m.n_cells):
        a, h = m.vertices[e], m.vertices[e + 1] - m.vertices[e]
        idx = np.array([e, e + 1])
        mass[np.ix_(idx, idx)] += _element_mass(h)
        stiffness[np.ix_(idx, idx)] += _element_stiffness(h)
        load, norm2 = _element_data(a, m.vertices[e + 1], breaks, g)
        load_g[idx] += load
        g_norm2 += norm2
    return DenseSystem(mass, stiffness, load_g, g_norm2)


def _weighted(m: Mesh1D, c: np.ndarray) -> np.ndarray:
    n = m.n_vertices
    out = np.zeros((n, n))
    for e in range(m.n_cells):
        h = m.vertices[e + 1] - m.vertices[e]
        idx = np.array([e, e + 1])
        out[np.ix_(idx, idx)] += _element_weighted_mass(h, (c[e], c[e + 1]))
    return out


def dense_misfit(p: CoefficientProblem, m: Mesh1D, y: np.ndarray) -> float:
    """||y - g||^2 in L2 for a state given by its interior values"""
    sys = _assemble(p, m)
    full = np.zeros(m.n_vertices)
    full[1:-1] = y
    return float(full @ sys.mass @ full - 2.0 * full @ sys.load_g + sys.g_norm2)


def dense_kkt(
    p: CoefficientProblem,
    m: Mesh1D,
    q_old: np.ndarray,
    u_old: np.ndarray,
    beta: float,
) -> dict[str, np.ndarray]:
    """Step optimality system of the coefficient problem, assembled densely.

    Control values live on all vertices, states and multipliers on interior
    vertices.
    """
    sys = _assemble(p, m)
    inner = slice(1, m.n_vertices - 1)
    u_full = np.zeros(m.n_vertices)
    u_full[inner] = u_old
    q0 = p.prior_vector(m)

    Mq = sys.mass
    M = sys.mass[inner, inner]
    K = (sys.stiffness + _weighted(m, q_old))[inner, inner]
    B = _weighted(m, u_full)[inner, :]
    b = sys.load_g[inner]

    nq, nu = m.n_vertices, m.n_vertices - 2
    H = np.zeros((nq + 2 * nu, nq + 2 * nu))
    rhs = np.zeros(nq + 2 * nu)
    sq, sw, sv = slice(0, nq), slice(nq, nq + nu), slice(nq + nu, nq + 2 * nu)
    H[sq, sq] = 2.0 / beta * Mq
    H[sq, sv] = B.T
    H[sw, sw] = 2.0 * M
    H[sw, sv] = K.T
    H[sv, sq] = B
    H[sv, sw] = K
    rhs[sq] = 2.0 / beta * (Mq @ q0)
    rhs[sw] = 2.0 * (b - M @ u_old)
    rhs[sv] = B @ q_old
    try:
        sol = np.linalg.solve(H, rhs)
    except np.linalg.LinAlgError as e:
        raise SubproblemError(f"Singular dense KKT system: {e}")
    return {"q": sol[sq], "w": sol[sw], "v": sol[sv]}


@dataclass
class ReferenceSolution:
    mesh: Mesh1D
    qoi: QoiBundle
    state: GnState
    fine_factor: int
    provenance: dict[str, Any] = field(default_factory=dict)


def reference_qoi(
    p: InverseProblem, q_old: np.ndarray, beta: float, m: Mesh1D, fine_factor: int = 4
) -> ReferenceSolution:
    """Quantities of interest of the step re-solved on a uniformly refined mesh"""
    if fine_factor < 4 or fine_factor & (fine_factor - 1):
        raise ValueError(f"Fine factor must be a power of two >= 4, got {fine_factor}")
    fine = refine_uniformly(m, int(math.log2(fine_factor)))
    q_fine = p.control_space(m).prolong(q_old, fine)
    u_fine = p.solve_state(fine, q_fine)
    state = solve_subproblem(p, q_fine, u_fine, beta, fine)
    qoi = eval_qoi(p, state)
    return ReferenceSolution(
        mesh=fine,
        qoi=qoi,
        state=state,
        fine_factor=fine_factor,
        provenance={"coarse_vertices": m.n_vertices, "fine_vertices": fine.n_vertices},
    )


def fd_check(
    func: Callable[[np.ndarray], np.ndarray | float],
    point: np.ndarray,
    direction: np.ndarray,
    derivative: np.ndarray | float,
    steps: Sequence[float] = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6),
) -> float:
    """Best relative error of central differences against a directional derivative"""
    expected = np.atleast_1d(np.asarray(derivative, dtype=float))
    scale = max(float(np.linalg.norm(expected)), 1e-300)
    best = math.inf
    for h in steps:
        plus = np.atleast_1d(np.asarray(func(point + h * direction), dtype=float))
        minus = np.atleast_1d(np.asarray(func(point - h * direction), dtype=float))
        approx = (plus - minus) / (2.0 * h)
        best = min(best, float(np.linalg.norm(approx - expected)) / scale)
    return best


def bisect_beta(
    i_of_beta: Callable[[float], float],
    target: float,
    lo: float = 1e-8,
    hi: float = 1e8,
    rtol: float = 1e-12,
    max_iter: int = 500,
) -> float:
    """beta with i(beta) = target for a nonincreasing i, by bisection in log(beta)"""
    if i_of_beta(lo) < target or i_of_beta(hi) > target:
        raise ValueError(f"Target {target} not bracketed by beta in [{lo}, {hi}]")
    a, b = math.log(lo), math.log(hi)
    for _ in range(max_iter):
        mid = 0.5 * (a + b)
        if i_of_beta(math.exp(mid)) > target:
            a = mid
        else:
            b = mid
        if b - a <= rtol:
            break
    return math.exp(0.5 * (a + b))
