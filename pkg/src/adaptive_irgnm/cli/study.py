import logging
import math
from dataclasses import replace
from typing import Any

import numpy as np
from rich.table import Table

from ..core.config import Benchmark, ProblemConfig, build_problem, get_function
from ..core.dwr import estimate_all
from ..core.errors import ConfigError, ConfigValidationError, IrgnmError, IterationError
from ..core.gnstep import eval_qoi, nonlinear_state, solve_subproblem
from ..core.irgnm import RunReport, run, validate_config
from ..core.mesh import Mesh1D, uniform_mesh
from ..core.misfit import QuadraticPenalty, RateFunction, bregman_distance, rate_bound
from ..core.oracle import reference_qoi
from ..core.problem import CoefficientProblem
from ..core.regparam import initial_beta
from .artifacts import write_rows, write_summary
from .run import console, load_config, output_dir, print_error

logger = logging.getLogger(__name__)

RATE_HEADER = ("delta", "error", "bregman", "rate_bound", "k_star", "total_dofs", "stop_reason")

ESTIMATOR_HEADER = ("cells", "dofs") + tuple(
    f"{name}{i}" for i in range(1, 5) for name in ("I_h", "I_ref", "eta", "effectivity")
)


def fit_slope(xs: list[float], ys: list[float]) -> float | None:
    """Least-squares slope of log(y) against log(x) over positive pairs"""
    pairs = [(x, y) for x, y in zip(xs, ys) if x > 0 and y > 0]
    if len(pairs) < 2:
        return None
    lx, ly = np.log([p[0] for p in pairs]), np.log([p[1] for p in pairs])
    return float(np.polyfit(lx, ly, 1)[0])


def theoretical_slope(rate: RateFunction) -> float | None:
    if rate.kind != "holder":
        return None
    return 2.0 * rate.exponent / (2.0 * rate.exponent + 1.0)


def rate_row(bench: Benchmark, report: RunReport, rate: RateFunction, delta: float) -> dict[str, Any]:
    src = bench.source
    assert src is not None and report.q is not None
    diff = report.q - src.q_true
    R = QuadraticPenalty(src.q0, scale=0.5)
    return {
        "delta": delta,
        "error": float(np.linalg.norm(diff)),
        "bregman": bregman_distance(R, report.q, src.q_true, R.subgradient(src.q_true)),
        "rate_bound": rate_bound(rate, delta, src.s_norm),
        "k_star": report.k_star,
        "total_dofs": None if report.mesh is None else report.mesh.n_vertices,
        "stop_reason": report.stop_reason,
    }


def cmd_rate_study(args) -> int:
    manager = load_config(args)
    if manager is None:
        return 2
    try:
        cfg, pcfg, study = manager.run, manager.problem, manager.study
        validate_config(cfg)
        rate = RateFunction(pcfg.source_kind, pcfg.source_exponent)
    except ConfigValidationError as e:
        print_error(str(e), title="Constants violated")
        return 1
    except (TypeError, ValueError) as e:
        print_error(str(e), title="Config")
        return 2
    if pcfg.kind != "dense":
        print_error("Rate studies need a dense problem with a manufactured source", title="Config")
        return 2

    out = output_dir(manager)
    manager.save(out / "config.ini")
    rows: list[dict[str, Any]] = []
    deltas = sorted(study.deltas, reverse=True)

    for delta in deltas:
        rcfg = replace(cfg, delta=delta)
        bench = build_problem(pcfg, rcfg)
        try:
            report = run(bench.problem, rcfg, bench.mesh, bench.q_start)
        except IterationError as e:
            write_rows(out / "rates.csv", RATE_HEADER, rows)
            write_summary(out / "rate_summary.json", {"partial": True, "failed_delta": delta}, manager.to_dict())
            print_error(f"delta={delta:g}: {e}", title="Rate study aborted")
            return 1
        rows.append(rate_row(bench, report, rate, delta))
        logger.info(f"delta={delta:g}: error={rows[-1]['error']:.4e}, k*={report.k_star}")

    slope = fit_slope([r["delta"] for r in rows], [r["error"] for r in rows])
    write_rows(out / "rates.csv", RATE_HEADER, rows)
    write_summary(
        out / "rate_summary.json",
        {"slope": slope, "theoretical_slope": theoretical_slope(rate), "rows": rows, "partial": False},
        manager.to_dict(),
    )

    table = Table(title="Rate study")
    for name in ("delta", "error", "rate_bound", "k_star"):
        table.add_column(name, justify="right")
    for r in rows:
        table.add_row(f"{r['delta']:.1e}", f"{r['error']:.4e}", f"{r['rate_bound']:.4e}", str(r["k_star"]))
    console.print(table)
    console.print(f"[green]✅ Fitted slope: {'NA' if slope is None else f'{slope:.3f}'}[/green]")
    return 0


def _start_on(bench: Benchmark, pcfg: ProblemConfig, m: Mesh1D) -> np.ndarray:
    p = bench.problem
    if isinstance(p, CoefficientProblem):
        start = get_function(pcfg.start) if pcfg.start else p.prior
        return p.interpolate_control(m, start)
    return bench.q_start.copy()


def _effectivity(eta: float, i_h: float, i_ref: float) -> float | None:
    error = i_ref - i_h
    if eta == 0.0 or error == 0.0:
        return None
    return eta / error


def cmd_estimator_study(args) -> int:
    manager = load_config(args)
    if manager is None:
        return 2
    try:
        cfg, pcfg, study = manager.run, manager.problem, manager.study
        bench = build_problem(pcfg, cfg, study=study)
    except (ConfigError, TypeError, ValueError) as e:
        print_error(str(e), title="Config")
        return 2

    out = output_dir(manager)
    manager.save(out / "config.ini")
    p = bench.problem
    levels = sorted(study.levels)
    beta = initial_beta(p, uniform_mesh(0.0, 1.0, levels[-1]), cfg.beta_search())
    rows: list[dict[str, Any]] = []

    try:
        for n in levels:
            m = uniform_mesh(0.0, 1.0, n)
            q_old = _start_on(bench, pcfg, m)
            u_old = p.solve_state(m, q_old)
            state = solve_subproblem(p, q_old, u_old, beta, m)
            u = nonlinear_state(p, state)
            qoi = eval_qoi(p, state, u).to_dict()
            etas = estimate_all(p, state, u).values()
            ref = reference_qoi(p, q_old, beta, m, fine_factor=study.fine_factor).qoi.to_dict()

            row: dict[str, Any] = {"cells": n, "dofs": m.n_vertices}
            for i in range(1, 5):
                i_h, i_ref, eta = qoi[f"i{i}"], ref[f"i{i}"], etas[f"eta{i}"]
                row.update(
                    {
                        f"I_h{i}": i_h,
                        f"I_ref{i}": i_ref,
                        f"eta{i}": eta,
                        f"effectivity{i}": _effectivity(eta, i_h, i_ref),
                    }
                )
            rows.append(row)
            logger.info(f"{n} cells: etas {etas}")
    except IrgnmError as e:
        write_rows(out / "estimators.csv", ESTIMATOR_HEADER, rows)
        print_error(str(e), title="Estimator study aborted")
        return 1

    summary: dict[str, Any] = {"beta": beta, "fine_factor": study.fine_factor, "partial": False}
    for i in range(1, 5):
        effs = [r[f"effectivity{i}"] for r in rows if r[f"effectivity{i}"] is not None]
        summary[f"median_effectivity{i}"] = float(np.median(effs)) if effs else None
        summary[f"eta{i}_slope"] = fit_slope(
            [float(r["dofs"]) for r in rows], [abs(r[f"eta{i}"]) for r in rows]
        )
    write_rows(out / "estimators.csv", ESTIMATOR_HEADER, rows)
    write_summary(out / "estimator_summary.json", summary, manager.to_dict())

    table = Table(title=f"Estimator effectivity (beta = {beta:.4e})")
    table.add_column("dofs", justify="right")
    for i in range(1, 5):
        table.add_column(f"eta{i} / err", justify="right")
    for r in rows:
        cells = [str(r["dofs"])]
        for i in range(1, 5):
            eff = r[f"effectivity{i}"]
            cells.append("NA" if eff is None or not math.isfinite(eff) else f"{eff:.3f}")
        table.add_row(*cells)
    console.print(table)
    return 0
