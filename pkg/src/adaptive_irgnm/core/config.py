import logging
import re
import types
from collections.abc import Callable
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Union, get_args, get_origin

try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import numpy as np

from .errors import ConfigError
from .mesh import Mesh1D, uniform_mesh
from .misfit import RateFunction, SourceCondition, manufacture_source
from .problem import CoefficientProblem, DenseLinearProblem, InverseProblem, synthesize_data
from .regparam import BetaSearchConfig

logger = logging.getLogger(__name__)

FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "zero": lambda x: np.zeros_like(x),
    "one": lambda x: np.ones_like(x),
    "ten": lambda x: np.full_like(x, 10.0),
    "sine": lambda x: np.sin(np.pi * x),
    "smooth": lambda x: 1.0 + 0.5 * np.sin(2.0 * np.pi * x),
    "bump": lambda x: 1.0 + 0.5 * np.exp(-50.0 * (x - 0.5) ** 2),
    "parabola": lambda x: 4.0 * x * (1.0 - x),
}


def get_function(name: str) -> Callable[[np.ndarray], np.ndarray]:
    try:
        return FUNCTIONS[name]
    except KeyError:
        raise ConfigError(f"Unknown function {name!r} (known: {', '.join(sorted(FUNCTIONS))})")


@dataclass
class RunConfig:
    tau: float = 10.0
    theta_lower: float = 0.1
    theta_upper: float = 0.2
    tau_beta: float = 2.0
    tau_beta_tilde: float = 1.0
    c_tc: float = 0.1
    c1: float = 0.1
    c2: float = 0.7
    c3: float = 0.5
    r0: float = 0.0  # slack r^k = r0 * rho_r^k
    rho_r: float = 0.5
    marking_fraction: float = 0.5
    max_newton_steps: int = 30
    max_beta_steps: int = 50
    max_refinements: int = 20
    max_dofs: int = 20000
    eta_i_fraction: float = 0.25
    eta_iprime_fraction: float = 0.5
    beta_init: float | None = None
    delta: float = 0.01
    seed: int = 0

    def beta_search(self) -> BetaSearchConfig:
        return BetaSearchConfig(
            tau_beta=self.tau_beta,
            tau_beta_tilde=self.tau_beta_tilde,
            theta_lower=self.theta_lower,
            theta_upper=self.theta_upper,
            beta_init=self.beta_init,
            max_newton_steps=self.max_beta_steps,
            eta_i_fraction=self.eta_i_fraction,
            eta_iprime_fraction=self.eta_iprime_fraction,
        )

    def slack(self, k: int) -> float:
        return self.r0 * self.rho_r**k

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Self:
        return cls(**data)


@dataclass
class ProblemConfig:
    kind: str = "coefficient"  # coefficient | dense
    cells: int = 16
    source: str = "ten"
    exact: str = "smooth"
    prior: str = "one"
    start: str | None = None  # defaults to the prior
    q_lower_bound: float = -4.0
    fine_factor: int = 4  # data mesh vs the largest working mesh
    size: int = 20
    operator: str = "diagonal"  # diagonal | integration
    decay: float = 1.0
    source_kind: str = "holder"
    source_exponent: float = 0.5
    source_scale: float = 1.0
    source_decay: float = 0.0  # weight k**-source_decay on the k-th singular vector

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Self:
        return cls(**data)


@dataclass
class StudyConfig:
    deltas: list[float] = field(default_factory=lambda: [1e-1, 1e-2, 1e-3, 1e-4])
    levels: list[int] = field(default_factory=lambda: [8, 16, 32, 64, 128, 256])
    fine_factor: int = 4
    output_dir: str = "results"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Self:
        return cls(**data)


SECTIONS: dict[str, type] = {"problem": ProblemConfig, "run": RunConfig, "study": StudyConfig}


def _coerce(raw: str, typ: Any) -> Any:
    if get_origin(typ) in (Union, types.UnionType):
        if raw.lower() in ("none", ""):
            return None
        typ = next(a for a in get_args(typ) if a is not type(None))
    if get_origin(typ) is list:
        (item,) = get_args(typ)
        return [_coerce(part.strip(), item) for part in raw.split(",") if part.strip()]
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    return raw


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, list):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ConfigManager:
    """Plain-text configuration with [problem], [run] and [study] sections"""

    def __init__(self, config_path: str | Path | None = None):
        self.config_path = Path(config_path) if config_path else None
        self.config_data: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
        if self.config_path is not None:
            self.load_config()

    def load_config(self) -> None:
        assert self.config_path is not None
        try:
            content = self.config_path.read_text()
        except OSError as e:
            raise RuntimeError(f"Failed to load config from {self.config_path}: {e}")
        self._parse(content)

    def _parse(self, content: str) -> None:
        path = str(self.config_path)
        section: str | None = None
        known: dict[str, Any] = {}

        for lineno, line in enumerate(content.split("\n"), start=1):
            line = line.strip()

            # Skip comments and empty lines
            if not line or line.startswith(("#", ";")):
                continue

            header = re.fullmatch(r"\[\s*([\w-]+)\s*\]", line)
            if header:
                section = header.group(1).lower()
                if section not in SECTIONS:
                    raise ConfigError(f"Unknown section [{section}]", path, lineno)
                known = {f.name: f.type for f in fields(SECTIONS[section])}
                continue

            match = re.fullmatch(r"([\w-]+)\s*=\s*(.*)", line)
            if not match:
                raise ConfigError(f"Cannot parse line {line!r}", path, lineno)
            if section is None:
                raise ConfigError("Key outside of any section", path, lineno)

            key = match.group(1).lower().replace("-", "_")
            if key not in known:
                raise ConfigError(f"Unknown key {key!r} in [{section}]", path, lineno)
            raw = match.group(2).split(" #")[0].strip()
            try:
                self.config_data[section][key] = _coerce(raw, known[key])
            except ValueError:
                raise ConfigError(f"Invalid value {raw!r} for {key}", path, lineno)

    @property
    def run(self) -> RunConfig:
        return RunConfig.from_dict(self.config_data["run"])

    @property
    def problem(self) -> ProblemConfig:
        return ProblemConfig.from_dict(self.config_data["problem"])

    @property
    def study(self) -> StudyConfig:
        return StudyConfig.from_dict(self.config_data["study"])

    def override(self, section: str, **values: Any) -> None:
        for key, value in values.items():
            if value is not None:
                self.config_data[section][key] = value

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {
            "problem": self.problem.to_dict(),
            "run": self.run.to_dict(),
            "study": self.study.to_dict(),
        }

    def to_text(self) -> str:
        blocks = []
        for name, values in self.to_dict().items():
            lines = [f"[{name}]"] + [f"{key} = {_format(value)}" for key, value in values.items()]
            blocks.append("\n".join(lines))
        return "\n\n".join(blocks) + "\n"

    def save(self, path: str | Path) -> None:
        try:
            Path(path).write_text(self.to_text())
        except OSError as e:
            raise RuntimeError(f"Failed to save config to {path}: {e}")


@dataclass
class Benchmark:
    problem: InverseProblem
    mesh: Mesh1D
    q_start: np.ndarray
    q_true: object
    source: SourceCondition | None = None
    description: str = ""


def _dense_operator(pcfg: ProblemConfig) -> np.ndarray:
    n = pcfg.size
    if pcfg.operator == "diagonal":
        return np.diag(np.arange(1, n + 1, dtype=float) ** (-pcfg.decay))
    if pcfg.operator == "integration":
        return np.tril(np.ones((n, n))) / n
    raise ConfigError(f"Unknown dense operator {pcfg.operator!r}")


def data_cells(pcfg: ProblemConfig, rcfg: RunConfig, study: StudyConfig | None = None) -> int:
    """Cells of the data mesh, fine_factor times finer than the largest working mesh.

    The largest working mesh is bounded by the adaptive dof budget and, for
    estimator studies, by the uniformly refined reference meshes. The count is
    a power-of-two multiple of the initial mesh so both stay nested.
    """
    largest = max(pcfg.cells, rcfg.max_dofs)
    if study is not None and study.levels:
        largest = max(largest, max(study.levels) * study.fine_factor)
    cells = pcfg.cells
    while cells < pcfg.fine_factor * largest:
        cells *= 2
    return cells


def source_element(T: np.ndarray, pcfg: ProblemConfig) -> np.ndarray:
    """Source element of norm source_scale in the right singular basis of T.

    A decay of 1/2 spreads the weight over the whole spectrum, so the Hoelder
    source condition holds but no stronger one does and the rate stays sharp.
    """
    _, _, vt = np.linalg.svd(T)
    weights = np.arange(1, T.shape[1] + 1, dtype=float) ** (-pcfg.source_decay)
    return vt.T @ (pcfg.source_scale / np.linalg.norm(weights) * weights)


def build_problem(
    pcfg: ProblemConfig,
    rcfg: RunConfig,
    seed: int | None = None,
    study: StudyConfig | None = None,
) -> Benchmark:
    """Synthetic benchmark with noisy data of norm exactly delta"""
    seed = rcfg.seed if seed is None else seed
    m0 = uniform_mesh(0.0, 1.0, pcfg.cells)

    if pcfg.kind == "coefficient":
        exact = get_function(pcfg.exact)
        clean = CoefficientProblem(
            source=get_function(pcfg.source),
            prior=get_function(pcfg.prior),
            exact=exact,
            q_lower_bound=pcfg.q_lower_bound,
        )
        fine = uniform_mesh(0.0, 1.0, data_cells(pcfg, rcfg, study))
        logger.debug(f"Synthesizing data on {fine.n_cells} cells")
        data = synthesize_data(clean, exact, rcfg.delta, seed, fine)
        p = clean.with_data(data, rcfg.delta)
        start = get_function(pcfg.start) if pcfg.start else clean.prior
        return Benchmark(
            problem=p,
            mesh=m0,
            q_start=p.interpolate_control(m0, start),
            q_true=exact,
            description=f"coefficient problem, q_true={pcfg.exact}, f={pcfg.source}",
        )

    if pcfg.kind == "dense":
        T = _dense_operator(pcfg)
        rate = RateFunction(pcfg.source_kind, pcfg.source_exponent)
        source = manufacture_source(T, rate, source_element(T, pcfg))
        clean = DenseLinearProblem(T, prior=source.q0, exact=source.q_true)
        data = synthesize_data(clean, source.q_true, rcfg.delta, seed, m0)
        p = clean.with_data(data, rcfg.delta)
        return Benchmark(
            problem=p,
            mesh=m0,
            q_start=source.q0.copy(),
            q_true=source.q_true,
            source=source,
            description=f"dense {pcfg.operator} operator, n={pcfg.size}, {pcfg.source_kind} source",
        )

    raise ConfigError(f"Unknown problem kind {pcfg.kind!r}")
