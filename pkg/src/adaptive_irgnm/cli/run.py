import logging
from pathlib import Path
from typing import Any

from rich.console import Console
from rich.markup import escape
from rich.panel import Panel
from rich.table import Table

from ..core.config import Benchmark, ConfigManager, build_problem
from ..core.errors import ConfigError, ConfigValidationError, IterationError
from ..core.irgnm import RunReport, audit_theorem1, check_constants, run, validate_config
from ..core.mesh import write_mesh
from ..core.problem import CoefficientProblem
from .artifacts import write_function, write_run

logger = logging.getLogger(__name__)

console = Console()
err_console = Console(stderr=True)


def print_error(message: str, title: str = "Error"):
    err_console.print(Panel(f"[red]Error: {escape(message)}[/red]", title=title, border_style="red"))


def load_config(args) -> ConfigManager | None:
    """Read the config file and apply command-line overrides; None on parse errors"""
    try:
        manager = ConfigManager(args.config)
    except (ConfigError, RuntimeError) as e:
        print_error(str(e), title="Config")
        return None
    manager.override("run", seed=args.seed)
    manager.override("study", output_dir=args.out, fine_factor=args.fine_factor)
    return manager


def output_dir(manager: ConfigManager) -> Path:
    path = Path(manager.study.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_validate(args) -> int:
    manager = load_config(args)
    if manager is None:
        return 2
    try:
        cfg = manager.run
    except TypeError as e:
        print_error(str(e), title="Config")
        return 2

    violations = check_constants(cfg)
    if violations:
        print_error("\n".join(str(v) for v in violations), title="Constants violated")
        return 1

    dc = validate_config(cfg)
    table = Table(title="Derived constants")
    table.add_column("Constant", style="cyan")
    table.add_column("Value", style="white")
    for name, value in dc.to_dict().items():
        table.add_row(name, f"{value:.4g}")
    console.print(table)
    console.print("[green]✅ All constant conditions hold[/green]")
    return 0


def _run_extras(bench: Benchmark, report: RunReport, manager: ConfigManager) -> dict[str, Any]:
    extra: dict[str, Any] = {"problem": bench.description}
    if report.mesh is None or report.q is None:
        return extra
    p, m = bench.problem, report.mesh
    q_true = p.interpolate_control(m, bench.q_true)
    extra["q_error"] = p.q_norm(m, report.q - q_true)
    if bench.source is not None:
        rows = audit_theorem1(report, bench.source.q_true, p, manager.run)
        extra["audit_violations"] = sum(1 for r in rows if r.violated)
    return extra


def _dump_functions(out: Path, bench: Benchmark, report: RunReport) -> None:
    p = bench.problem
    if not isinstance(p, CoefficientProblem):
        logger.warning("Function dumps are only written for the coefficient problem")
        return
    if report.mesh is None or report.q is None:
        return
    m = report.mesh
    write_function(out / "q.csv", m, report.q)
    write_function(out / "q_true.csv", m, p.interpolate_control(m, bench.q_true))
    write_function(out / "u.csv", m, p.solve_state(m, report.q))
    write_mesh(m, out / "mesh.txt")


def _summary_table(report: RunReport) -> Table:
    table = Table(title=f"IRGNM run (stop: {report.stop_reason})")
    for name in ("k", "beta", "I2h", "I3h", "I4h", "dofs_h4"):
        table.add_column(name, justify="right")
    for rec in report.records:
        row = rec.to_row()
        table.add_row(
            str(row["k"]),
            f"{row['beta']:.4e}",
            f"{row['I2h']:.4e}",
            f"{row['I3h']:.4e}",
            f"{row['I4h']:.4e}",
            str(row["dofs_h4"]),
        )
    return table


def cmd_run(args) -> int:
    manager = load_config(args)
    if manager is None:
        return 2
    try:
        cfg, pcfg = manager.run, manager.problem
        validate_config(cfg)
        bench = build_problem(pcfg, cfg)
    except ConfigValidationError as e:
        print_error(str(e), title="Constants violated")
        return 1
    except (ConfigError, TypeError, ValueError) as e:
        print_error(str(e), title="Config")
        return 2

    out = output_dir(manager)
    manager.save(out / "config.ini")
    config = manager.to_dict()

    try:
        report = run(bench.problem, cfg, bench.mesh, bench.q_start)
    except IterationError as e:
        partial = e.report if isinstance(e.report, RunReport) else None
        if partial is not None:
            write_run(out, partial, config, _run_extras(bench, partial, manager))
        print_error(str(e), title=f"Step {e.step} failed")
        return 1

    paths = write_run(out, report, config, _run_extras(bench, report, manager))
    if getattr(args, "dump_functions", False):
        _dump_functions(out, bench, report)

    console.print(_summary_table(report))
    console.print(
        f"[green]✅ k* = {report.k_star}, final I3 = {report.final_i3h:.4e} "
        f"(threshold {report.threshold:.4e})[/green]"
    )
    console.print(f"[dim]Artifacts: {paths['summary'].parent}[/dim]")
    return 0
