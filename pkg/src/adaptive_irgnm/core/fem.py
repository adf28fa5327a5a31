"""Piecewise-linear finite elements on hierarchical interval meshes.

Functions are stored as nodal coefficient vectors over all vertices (degree 1)
or over vertices followed by cell midpoints (degree 2). Discrete spaces
(:class:`FeSpace`) number only the free degrees of freedom: interior vertices
for homogeneous Dirichlet spaces, all vertices otherwise, or one bubble per
cell for the enrichment used by the error estimators.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.special import roots_legendre

from .mesh import Mesh1D, prolong_indices, reconstruction_stencils

logger = logging.getLogger(__name__)

_nodes, _weights = roots_legendre(3)
GAUSS_POINTS = 0.5 * (_nodes + 1.0)
GAUSS_WEIGHTS = 0.5 * _weights


@dataclass(frozen=True)
class Field:
    """Values and x-derivatives at the quadrature points, shape (cells, 3)"""

    val: np.ndarray
    der: np.ndarray

    @classmethod
    def zeros(cls, mesh: Mesh1D) -> "Field":
        z = np.zeros((mesh.n_cells, len(GAUSS_POINTS)))
        return cls(z, z)

    def __add__(self, other: "Field") -> "Field":
        return Field(self.val + other.val, self.der + other.der)

    def __sub__(self, other: "Field") -> "Field":
        return Field(self.val - other.val, self.der - other.der)


def quadrature_points(m: Mesh1D) -> tuple[np.ndarray, np.ndarray]:
    h = m.widths[:, None]
    x = m.vertices[:-1, None] + h * GAUSS_POINTS[None, :]
    w = h * GAUSS_WEIGHTS[None, :]
    return x, w


def cellwise_integrate(m: Mesh1D, values: np.ndarray) -> np.ndarray:
    _, w = quadrature_points(m)
    return np.sum(values * w, axis=1)


def overlay_points(
    m: Mesh1D, breakpoints: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gauss rule on the common refinement of m and a set of breakpoints.

    Returns the cell of m containing each overlay interval, and the points and
    weights with shape (intervals, 3). Functions that are polynomial between
    consecutive breakpoints, such as P1 data on another mesh, are integrated
    exactly against the basis of m.
    """
    breakpoints = np.asarray(breakpoints, dtype=float)
    inner = breakpoints[(breakpoints > m.a) & (breakpoints < m.b)]
    nodes = np.union1d(m.vertices, inner)
    h = np.diff(nodes)[:, None]
    x = nodes[:-1, None] + h * GAUSS_POINTS[None, :]
    w = h * GAUSS_WEIGHTS[None, :]
    centers = 0.5 * (nodes[:-1] + nodes[1:])
    cell = np.clip(np.searchsorted(m.vertices, centers, side="right") - 1, 0, m.n_cells - 1)
    return cell, x, w


def quadrature_integrate(
    m: Mesh1D,
    integrand: Callable[[np.ndarray], np.ndarray] | np.ndarray,
    breakpoints: np.ndarray | None = None,
) -> float:
    """3-point Gauss rule per cell, exact for cellwise polynomials of degree 5"""
    if breakpoints is not None:
        if not callable(integrand):
            raise ValueError("Integration over breakpoints needs a callable integrand")
        _, x, w = overlay_points(m, breakpoints)
        return float(np.sum(np.broadcast_to(integrand(x), x.shape) * w))
    if callable(integrand):
        x, _ = quadrature_points(m)
        integrand = np.broadcast_to(integrand(x), x.shape)
    return float(np.sum(cellwise_integrate(m, integrand)))


def _p1_shape(mesh: Mesh1D) -> list[Field]:
    h = mesh.widths[:, None]
    xi = np.broadcast_to(GAUSS_POINTS, (mesh.n_cells, len(GAUSS_POINTS)))
    ones = np.ones_like(xi)
    return [Field(1.0 - xi, -ones / h), Field(xi, ones / h)]


def _bubble_shape(mesh: Mesh1D) -> Field:
    h = mesh.widths[:, None]
    xi = np.broadcast_to(GAUSS_POINTS, (mesh.n_cells, len(GAUSS_POINTS)))
    return Field(4.0 * xi * (1.0 - xi), 4.0 * (1.0 - 2.0 * xi) / h)


@dataclass(frozen=True, eq=False)
class FeFunction:
    mesh: Mesh1D
    coefficients: np.ndarray
    degree: int = 1
    dirichlet: bool = False

    def __post_init__(self):
        expected = self.mesh.n_vertices + (self.mesh.n_cells if self.degree == 2 else 0)
        if self.degree not in (1, 2):
            raise ValueError(f"Unsupported degree {self.degree}")
        if len(self.coefficients) != expected:
            raise ValueError(
                f"Expected {expected} coefficients for degree {self.degree}, "
                f"got {len(self.coefficients)}"
            )
        if self.dirichlet and (self.coefficients[0] != 0 or self.coefficients[self.mesh.n_cells] != 0):
            raise ValueError("Dirichlet function with nonzero boundary values")

    @classmethod
    def interpolate(
        cls,
        mesh: Mesh1D,
        func: Callable[[np.ndarray], np.ndarray] | float,
        dirichlet: bool = False,
    ) -> "FeFunction":
        if callable(func):
            values = np.asarray(func(mesh.vertices), dtype=float)
            values = np.broadcast_to(values, mesh.vertices.shape).copy()
        else:
            values = np.full(mesh.n_vertices, float(func))
        if dirichlet:
            values[0] = values[-1] = 0.0
        return cls(mesh, values, 1, dirichlet)

    @property
    def vertex_values(self) -> np.ndarray:
        return self.coefficients[: self.mesh.n_vertices]

    @property
    def midpoint_values(self) -> np.ndarray:
        if self.degree == 2:
            return self.coefficients[self.mesh.n_vertices :]
        v = self.vertex_values
        return 0.5 * (v[:-1] + v[1:])

    def at_qp(self) -> Field:
        h = self.mesh.widths[:, None]
        xi = GAUSS_POINTS[None, :]
        left = self.vertex_values[:-1, None]
        right = self.vertex_values[1:, None]
        if self.degree == 1:
            val = left * (1.0 - xi) + right * xi
            der = np.broadcast_to((right - left) / h, val.shape)
            return Field(val, np.array(der))
        mid = self.midpoint_values[:, None]
        val = (
            left * 2.0 * (xi - 0.5) * (xi - 1.0)
            + mid * 4.0 * xi * (1.0 - xi)
            + right * 2.0 * xi * (xi - 0.5)
        )
        der = (left * (4.0 * xi - 3.0) + mid * (4.0 - 8.0 * xi) + right * (4.0 * xi - 1.0)) / h
        return Field(val, der)

    def __call__(self, x: np.ndarray | float) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.degree == 1:
            return np.interp(x, self.mesh.vertices, self.vertex_values)
        cell = np.clip(np.searchsorted(self.mesh.vertices, x, side="right") - 1, 0, self.mesh.n_cells - 1)
        xi = (x - self.mesh.vertices[cell]) / self.mesh.widths[cell]
        left = self.vertex_values[cell]
        right = self.vertex_values[cell + 1]
        mid = self.midpoint_values[cell]
        return (
            left * 2.0 * (xi - 0.5) * (xi - 1.0)
            + mid * 4.0 * xi * (1.0 - xi)
            + right * 2.0 * xi * (xi - 0.5)
        )


def l2_norm(f: FeFunction) -> float:
    values = f.at_qp().val
    return float(np.sqrt(quadrature_integrate(f.mesh, values**2)))


def h1_seminorm(f: FeFunction) -> float:
    der = f.at_qp().der
    return float(np.sqrt(quadrature_integrate(f.mesh, der**2)))


@dataclass(frozen=True, eq=False)
class FeSpace:
    mesh: Mesh1D
    dirichlet: bool = False
    bubble: bool = False

    @property
    def ndofs(self) -> int:
        if self.bubble:
            return self.mesh.n_cells
        return self.mesh.n_vertices - (2 if self.dirichlet else 0)

    @property
    def n_cells(self) -> int:
        return self.mesh.n_cells

    @cached_property
    def local_dofs(self) -> np.ndarray:
        cells = np.arange(self.mesh.n_cells)
        if self.bubble:
            return cells[:, None]
        dofs = np.stack([cells, cells + 1], axis=1)
        if self.dirichlet:
            dofs = dofs - 1
            dofs[dofs >= self.ndofs] = -1
        return dofs

    def local_basis(self) -> list[Field]:
        return [_bubble_shape(self.mesh)] if self.bubble else _p1_shape(self.mesh)

    def basis_at(self, cell: np.ndarray, x: np.ndarray) -> list[Field]:
        """Local shape functions of the given cells evaluated at points x inside them"""
        h = self.mesh.widths[cell][:, None]
        xi = (x - self.mesh.vertices[cell][:, None]) / h
        if self.bubble:
            return [Field(4.0 * xi * (1.0 - xi), 4.0 * (1.0 - 2.0 * xi) / h)]
        ones = np.ones_like(xi)
        return [Field(1.0 - xi, -ones / h), Field(xi, ones / h)]

    def bubble_space(self) -> "FeSpace":
        return FeSpace(self.mesh, self.dirichlet, bubble=True)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.ndofs)

    def field(self, vec: np.ndarray) -> Field:
        dofs = self.local_dofs
        coef = np.where(dofs >= 0, np.asarray(vec)[np.maximum(dofs, 0)], 0.0) if len(vec) else np.zeros(dofs.shape)
        val = np.zeros((self.mesh.n_cells, len(GAUSS_POINTS)))
        der = np.zeros_like(val)
        for a, phi in enumerate(self.local_basis()):
            val = val + coef[:, a, None] * phi.val
            der = der + coef[:, a, None] * phi.der
        return Field(val, der)

    def to_function(self, vec: np.ndarray) -> FeFunction:
        if self.bubble:
            coefficients = np.concatenate([np.zeros(self.mesh.n_vertices), vec])
            return FeFunction(self.mesh, coefficients, degree=2, dirichlet=self.dirichlet)
        full = np.zeros(self.mesh.n_vertices)
        if self.dirichlet:
            full[1:-1] = vec
        else:
            full[:] = vec
        return FeFunction(self.mesh, full, degree=1, dirichlet=self.dirichlet)

    def restrict(self, f: FeFunction) -> np.ndarray:
        values = np.asarray(f.vertex_values, dtype=float)
        return values[1:-1].copy() if self.dirichlet else values.copy()

    def interpolate(self, func: Callable[[np.ndarray], np.ndarray] | float) -> np.ndarray:
        return self.restrict(FeFunction.interpolate(self.mesh, func, self.dirichlet))

    def defect(self, vec: np.ndarray) -> np.ndarray:
        """Bubble coefficients of the reconstruction defect pi_h f - f"""
        return bubble_defect(self.to_function(vec))

    def prolong(self, vec: np.ndarray, fine: Mesh1D) -> np.ndarray:
        return FeSpace(fine, self.dirichlet).restrict(prolong(self.to_function(vec), fine))

    def with_mesh(self, mesh: Mesh1D) -> "FeSpace":
        return FeSpace(mesh, self.dirichlet, self.bubble)


Integrand2 = Callable[[Field, Field, np.ndarray], np.ndarray]
Integrand1 = Callable[[Field, np.ndarray], np.ndarray]


def assemble_matrix(test: FeSpace, trial: FeSpace, integrand: Integrand2) -> sp.csr_matrix:
    """Matrix with entries a(trial_j, test_i) for a pointwise integrand"""
    if test.mesh is not trial.mesh and not np.array_equal(test.mesh.vertices, trial.mesh.vertices):
        raise ValueError("Test and trial spaces live on different meshes")
    x, w = quadrature_points(test.mesh)
    rows, cols, vals = [], [], []
    for a, phi in enumerate(test.local_basis()):
        for b, psi in enumerate(trial.local_basis()):
            contrib = np.sum(integrand(psi, phi, x) * w, axis=1)
            r = test.local_dofs[:, a]
            c = trial.local_dofs[:, b]
            keep = (r >= 0) & (c >= 0)
            rows.append(r[keep])
            cols.append(c[keep])
            vals.append(np.broadcast_to(contrib, r.shape)[keep])
    matrix = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(test.ndofs, trial.ndofs),
    )
    return matrix.tocsr()


def assemble_vector(
    test: FeSpace, integrand: Integrand1, breakpoints: np.ndarray | None = None
) -> np.ndarray:
    if breakpoints is None:
        x, w = quadrature_points(test.mesh)
        cell = np.arange(test.mesh.n_cells)
        basis = test.local_basis()
    else:
        cell, x, w = overlay_points(test.mesh, breakpoints)
        basis = test.basis_at(cell, x)
    out = np.zeros(test.ndofs)
    for a, phi in enumerate(basis):
        contrib = np.sum(integrand(phi, x) * w, axis=1)
        r = test.local_dofs[cell, a]
        keep = r >= 0
        np.add.at(out, r[keep], np.broadcast_to(contrib, r.shape)[keep])
    return out


@dataclass(frozen=True, eq=False)
class AssembledOperator:
    matrix: sp.csr_matrix
    load: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def assemble_mass(m: Mesh1D, dirichlet: bool = False) -> AssembledOperator:
    space = FeSpace(m, dirichlet)
    return AssembledOperator(assemble_matrix(space, space, lambda u, v, x: u.val * v.val))


def assemble_stiffness(m: Mesh1D, dirichlet: bool = False) -> AssembledOperator:
    space = FeSpace(m, dirichlet)
    return AssembledOperator(assemble_matrix(space, space, lambda u, v, x: u.der * v.der))


def assemble_weighted_mass(m: Mesh1D, c: FeFunction, dirichlet: bool = False) -> AssembledOperator:
    if c.mesh is not m and not np.array_equal(c.mesh.vertices, m.vertices):
        raise ValueError("Weight lives on a different mesh")
    space = FeSpace(m, dirichlet)
    weight = c.at_qp().val
    return AssembledOperator(
        assemble_matrix(space, space, lambda u, v, x: weight * u.val * v.val)
    )


def prolong(f: FeFunction, fine: Mesh1D) -> FeFunction:
    if f.degree != 1:
        raise ValueError("Only piecewise-linear functions can be prolonged")
    index = prolong_indices(f.mesh, fine)
    values = np.interp(fine.vertices, f.mesh.vertices, f.vertex_values)
    values[index] = f.vertex_values
    return FeFunction(fine, values, 1, f.dirichlet)


def reconstruct_pi_h(f: FeFunction) -> FeFunction:
    """Patchwise quadratic reconstruction of a piecewise-linear function"""
    if f.degree != 1:
        raise ValueError("Reconstruction expects a piecewise-linear function")
    m = f.mesh
    start = reconstruction_stencils(m)
    x0, x1, x2 = (m.vertices[start + k] for k in range(3))
    y0, y1, y2 = (f.vertex_values[start + k] for k in range(3))
    xm = m.midpoints
    mid = (
        y0 * (xm - x1) * (xm - x2) / ((x0 - x1) * (x0 - x2))
        + y1 * (xm - x0) * (xm - x2) / ((x1 - x0) * (x1 - x2))
        + y2 * (xm - x0) * (xm - x1) / ((x2 - x0) * (x2 - x1))
    )
    return FeFunction(m, np.concatenate([f.vertex_values, mid]), degree=2, dirichlet=f.dirichlet)


def bubble_defect(f: FeFunction) -> np.ndarray:
    return reconstruct_pi_h(f).midpoint_values - f.midpoint_values
