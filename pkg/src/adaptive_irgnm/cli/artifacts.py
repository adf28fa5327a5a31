import csv
import json
import logging
import math
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any

import numpy as np

from .. import __version__
from ..core.irgnm import IterationRecord, RunReport
from ..core.mesh import Mesh1D

logger = logging.getLogger(__name__)

ITERATION_HEADER = (
    "k",
    "beta",
    "I1h",
    "I2h",
    "I3h",
    "I4h",
    "eta1",
    "eta2",
    "eta3",
    "eta4",
    "dofs_h1",
    "dofs_h2",
    "dofs_h3",
    "dofs_h4",
    "q_norm",
    "condA_rounds",
    "condC_rounds",
)

BETA_TRACE_HEADER = ("k", "inner_step", "beta", "i_h", "iprime_h", "eta_i", "eta_iprime", "dofs", "refined")


def _cell(value: Any) -> str:
    if value is None:
        return "NA"
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (float, np.floating)):
        return repr(float(value)) if math.isfinite(value) else "NA"
    return str(value)


def jsonable(value: Any) -> Any:
    """Replace numpy scalars and non-finite floats by plain JSON values"""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    return value


def write_rows(path: Path, header: Sequence[str], rows: Iterable[dict[str, Any]]) -> None:
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_cell(row.get(name)) for name in header])
    except OSError as e:
        raise RuntimeError(f"Failed to write {path}: {e}")
    logger.debug(f"Wrote {path}")


def write_iterations(path: Path, records: Sequence[IterationRecord]) -> None:
    write_rows(path, ITERATION_HEADER, (r.to_row() for r in records))


def write_beta_trace(path: Path, records: Sequence[IterationRecord]) -> None:
    rows = (
        {"k": r.k, **{name: getattr(step, name) for name in BETA_TRACE_HEADER[1:]}}
        for r in records
        for step in r.beta_trace
    )
    write_rows(path, BETA_TRACE_HEADER, rows)


def write_function(path: Path, mesh: Mesh1D, values: np.ndarray) -> None:
    """(vertex, value) pairs; interior-only vectors get zero boundary values"""
    values = np.asarray(values, dtype=float)
    if values.size == mesh.n_vertices - 2:
        values = np.concatenate(([0.0], values, [0.0]))
    if values.size != mesh.n_vertices:
        raise ValueError(f"Cannot dump {values.size} values on {mesh.n_vertices} vertices")
    write_rows(path, ("vertex", "value"), ({"vertex": x, "value": v} for x, v in zip(mesh.vertices, values)))


def write_summary(path: Path, summary: dict[str, Any], config: dict[str, Any]) -> None:
    document = {"version": __version__, **summary, "config": config}
    try:
        path.write_text(json.dumps(jsonable(document), indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise RuntimeError(f"Failed to write {path}: {e}")
    logger.debug(f"Wrote {path}")


def write_run(
    out_dir: Path,
    report: RunReport,
    config: dict[str, Any],
    extra: dict[str, Any] | None = None,
) -> dict[str, Path]:
    """Iteration table, beta trace and summary of a (possibly partial) run"""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "iterations": out_dir / "iterations.csv",
        "beta_trace": out_dir / "beta_trace.csv",
        "summary": out_dir / "summary.json",
    }
    write_iterations(paths["iterations"], report.records)
    write_beta_trace(paths["beta_trace"], report.records)
    write_summary(paths["summary"], {**report.to_dict(), **(extra or {})}, config)
    return paths
