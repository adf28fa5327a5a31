import logging
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import NestingError

logger = logging.getLogger(__name__)

CellKey = tuple[int, int, int]


def _frozen(values: Iterable[int]) -> np.ndarray:
    array = np.array(values, dtype=np.int64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class MarkSet:
    """Cells flagged for bisection"""

    indices: frozenset[int] = field(default_factory=frozenset)

    @classmethod
    def of(cls, cells: Iterable[int]) -> "MarkSet":
        return cls(frozenset(int(c) for c in cells))

    def __iter__(self) -> Iterator[int]:
        return iter(sorted(self.indices))

    def __len__(self) -> int:
        return len(self.indices)

    def __bool__(self) -> bool:
        return bool(self.indices)

    def validate(self, mesh: "Mesh1D") -> None:
        bad = [c for c in self.indices if c < 0 or c >= mesh.n_cells]
        if bad:
            raise ValueError(
                f"Invalid cell indices {sorted(bad)} for mesh with {mesh.n_cells} cells"
            )


@dataclass(frozen=True, eq=False)
class Mesh1D:
    """Hierarchical interval mesh.

    Every cell is identified by its root cell, its bisection depth and its
    position among the 2**level descendants of the root, so the refinement
    tree is implicit in the cell keys and coordinates stay dyadic.
    """

    a: float
    b: float
    n_roots: int
    root: np.ndarray
    level: np.ndarray
    position: np.ndarray
    stage: int | None = None
    vertices: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        width = (self.b - self.a) / self.n_roots
        offsets = self.root + self.position / np.power(2.0, self.level)
        left = self.a + width * offsets
        vertices = np.append(left, self.b)
        if np.any(np.diff(vertices) <= 0):
            raise ValueError("Cells must be ordered and non-degenerate")
        vertices.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)

    @property
    def n_cells(self) -> int:
        return len(self.root)

    @property
    def n_vertices(self) -> int:
        return self.n_cells + 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.vertices)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.vertices[:-1] + self.vertices[1:])

    @property
    def cells(self) -> list[tuple[int, int]]:
        return [(i, i + 1) for i in range(self.n_cells)]

    @property
    def keys(self) -> list[CellKey]:
        return list(zip(self.root.tolist(), self.level.tolist(), self.position.tolist()))

    @property
    def h_max(self) -> float:
        return float(self.widths.max())

    def parent(self, cell: int) -> CellKey | None:
        if self.level[cell] == 0:
            return None
        return (int(self.root[cell]), int(self.level[cell]) - 1, int(self.position[cell]) // 2)

    def with_stage(self, stage: int) -> "Mesh1D":
        return replace(self, stage=stage)

    def refine(self, marks: MarkSet | Iterable[int]) -> "Mesh1D":
        return refine(self, marks)

    def to_text(self) -> str:
        lines = [f"# cells {self.n_cells}"]
        lines.extend(repr(float(x)) for x in self.vertices)
        return "\n".join(lines) + "\n"


def uniform_mesh(a: float, b: float, n_cells: int) -> Mesh1D:
    if not a < b:
        raise ValueError(f"Interval bounds must satisfy a < b, got ({a}, {b})")
    if n_cells < 2 or n_cells % 2:
        raise ValueError(
            f"Root mesh needs an even number of at least 2 cells, got {n_cells}"
        )
    return Mesh1D(
        a=float(a),
        b=float(b),
        n_roots=n_cells,
        root=_frozen(range(n_cells)),
        level=_frozen([0] * n_cells),
        position=_frozen([0] * n_cells),
    )


def refine(m: Mesh1D, marks: MarkSet | Iterable[int]) -> Mesh1D:
    if not isinstance(marks, MarkSet):
        marks = MarkSet.of(marks)
    marks.validate(m)
    if not marks:
        return m

    root: list[int] = []
    level: list[int] = []
    position: list[int] = []
    for cell, (r, lev, pos) in enumerate(m.keys):
        if cell in marks.indices:
            root += [r, r]
            level += [lev + 1, lev + 1]
            position += [2 * pos, 2 * pos + 1]
        else:
            root.append(r)
            level.append(lev)
            position.append(pos)

    fine = Mesh1D(
        a=m.a,
        b=m.b,
        n_roots=m.n_roots,
        root=_frozen(root),
        level=_frozen(level),
        position=_frozen(position),
        stage=m.stage,
    )
    logger.debug(f"Refined {len(marks)} of {m.n_cells} cells -> {fine.n_cells} cells")
    return fine


def refine_uniformly(m: Mesh1D, times: int = 1) -> Mesh1D:
    for _ in range(times):
        m = refine(m, range(m.n_cells))
    return m


def prolong_indices(coarse: Mesh1D, fine: Mesh1D) -> np.ndarray:
    """Index of every coarse vertex in the fine vertex array"""
    if coarse.a != fine.a or coarse.b != fine.b or coarse.n_roots != fine.n_roots:
        raise NestingError("Meshes do not share the same root partition")
    index = np.searchsorted(fine.vertices, coarse.vertices)
    index = np.clip(index, 0, fine.n_vertices - 1)
    if not np.array_equal(fine.vertices[index], coarse.vertices):
        missing = coarse.vertices[fine.vertices[index] != coarse.vertices]
        raise NestingError(
            f"Fine mesh is not a refinement of the coarse mesh (missing {missing[:5].tolist()})"
        )
    return index


def _partner_sides(m: Mesh1D) -> tuple[np.ndarray, np.ndarray]:
    """Partner cell of every leaf (-1 if refined away) and the side it lies on"""
    if m.n_roots % 2:
        raise ValueError(
            f"Patch structure needs an even number of root cells, got {m.n_roots}"
        )
    lookup = {key: i for i, key in enumerate(m.keys)}
    partner = np.full(m.n_cells, -1, dtype=np.int64)
    side = np.zeros(m.n_cells, dtype=np.int64)
    for i, (r, lev, pos) in enumerate(m.keys):
        if lev == 0:
            key = (r ^ 1, 0, 0)
            side[i] = 1 if r % 2 == 0 else -1
        else:
            key = (r, lev, pos ^ 1)
            side[i] = 1 if pos % 2 == 0 else -1
        partner[i] = lookup.get(key, -1)
    return partner, side


def patches(m: Mesh1D) -> list[tuple[int, ...]]:
    """Partition of the cells into reconstruction patches.

    Sibling leaves (or adjacent root pairs) form a patch. A leaf whose partner
    has been refined joins the patch of its neighbour inside the partner's
    subtree.
    """
    partner, side = _partner_sides(m)
    group = list(range(m.n_cells))

    def find(i: int) -> int:
        while group[i] != i:
            group[i] = group[group[i]]
            i = group[i]
        return i

    def union(i: int, j: int) -> None:
        ri, rj = find(i), find(j)
        if ri != rj:
            group[max(ri, rj)] = min(ri, rj)

    for i in range(m.n_cells):
        union(i, int(partner[i]) if partner[i] >= 0 else i + int(side[i]))

    members: dict[int, list[int]] = {}
    for i in range(m.n_cells):
        members.setdefault(find(i), []).append(i)
    return [tuple(cells) for _, cells in sorted(members.items())]


def reconstruction_stencils(m: Mesh1D) -> np.ndarray:
    """First of the three consecutive vertices each cell is reconstructed from"""
    partner, side = _partner_sides(m)
    cells = np.arange(m.n_cells)
    start = np.where(partner >= 0, np.minimum(cells, partner), np.where(side > 0, cells, cells - 1))
    return start


def write_mesh(m: Mesh1D, path: str | Path) -> None:
    try:
        Path(path).write_text(m.to_text())
    except OSError as e:
        raise RuntimeError(f"Failed to write mesh to {path}: {e}")
