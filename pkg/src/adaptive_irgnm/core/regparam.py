"""Inexact Newton search for the regularization parameter of a Gauss-Newton step."""

import logging
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from typing import Any

try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import numpy as np

from .dwr import DorflerRefiner, Estimate, eta2, eta_iprime
from .errors import BetaSearchError
from .gnstep import GnState, i_prime_beta, solve_subproblem
from .mesh import Mesh1D
from .problem import InverseProblem

logger = logging.getLogger(__name__)

Refiner = Callable[[Mesh1D, np.ndarray], Mesh1D | None]


@dataclass
class BetaSearchConfig:
    tau_beta: float = 2.0
    tau_beta_tilde: float = 1.0
    theta_lower: float = 0.1
    theta_upper: float = 0.2
    beta_init: float | None = None  # None: 1 / ||g||^2
    max_newton_steps: int = 50
    eta_i_fraction: float = 0.25
    eta_iprime_fraction: float = 0.5

    @property
    def theta_mid(self) -> float:
        return 0.5 * (self.theta_lower + self.theta_upper)

    def validate(self) -> None:
        if not 0 < self.theta_lower <= self.theta_upper < 0.5:
            raise ValueError(
                f"Need 0 < theta_lower <= theta_upper < 1/2, got "
                f"({self.theta_lower}, {self.theta_upper})"
            )
        if not max(1.0, self.tau_beta_tilde) < self.tau_beta:
            raise ValueError(
                f"Need max(1, tau_beta_tilde) < tau_beta, got "
                f"tau_beta={self.tau_beta}, tau_beta_tilde={self.tau_beta_tilde}"
            )
        if self.beta_init is not None and not self.beta_init > 0:
            raise ValueError(f"Initial beta must be positive, got {self.beta_init}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Self:
        return cls(**data)


@dataclass(frozen=True)
class BetaStep:
    inner_step: int
    beta: float
    i_h: float
    iprime_h: float
    eta_i: float
    eta_iprime: float
    dofs: int
    refined: bool = False


@dataclass
class BetaSearchResult:
    beta: float
    state: GnState
    mesh: Mesh1D
    q_old: np.ndarray
    u_old: np.ndarray
    i3h: float
    i3h_initial: float
    i_h: float
    iprime_h: float
    newton_steps: int = 0
    refinements: int = 0
    budget_exhausted: bool = False
    history: list[BetaStep] = field(default_factory=list)


def window(i3h: float, cfg: BetaSearchConfig) -> tuple[float, float]:
    """Acceptance interval for I_2 around the Newton target theta_mid * I_3"""
    delta_beta2 = cfg.theta_mid * i3h / cfg.tau_beta**2
    lower = cfg.theta_lower * i3h
    upper = min(cfg.theta_upper * i3h, (cfg.tau_beta**2 + cfg.tau_beta_tilde**2 / 2) * delta_beta2)
    return lower, upper


def _targets(i3h: float, cfg: BetaSearchConfig) -> tuple[float, float, float, float]:
    target = cfg.theta_mid * i3h
    lower, upper = window(i3h, cfg)
    return target, math.sqrt(target) / cfg.tau_beta, lower, upper


def accuracy_requirements(
    i_h: float,
    iprime_h: float,
    eta_i: float,
    eta_iprime: float,
    delta_beta: float,
    cfg: BetaSearchConfig,
) -> bool:
    ok_i = abs(eta_i) <= cfg.eta_i_fraction * cfg.tau_beta_tilde**2 * delta_beta**2
    ok_iprime = abs(eta_iprime) <= cfg.eta_iprime_fraction * abs(iprime_h)
    return ok_i and ok_iprime


def estimate_i_and_iprime_error(p: InverseProblem, state: GnState) -> tuple[Estimate, Estimate]:
    return eta2(p, state), eta_iprime(p, state)


def prolong_iterate(
    p: InverseProblem, q_old: np.ndarray, u_old: np.ndarray, coarse: Mesh1D, fine: Mesh1D
) -> tuple[np.ndarray, np.ndarray]:
    """Prolong q_old exactly and re-solve its state on the finer mesh"""
    q = p.control_space(coarse).prolong(q_old, fine)
    u0 = p.state_space(coarse).prolong(u_old, fine)
    return q, p.solve_state(fine, q, u0=u0)


def initial_beta(p: InverseProblem, m: Mesh1D, cfg: BetaSearchConfig) -> float:
    if cfg.beta_init is not None:
        return cfg.beta_init
    g2 = p.obs_norm2(m)
    return 1.0 / g2 if g2 > 0 else 1.0


def _next_beta(beta: float, r: float, iprime: float, lo: float, hi: float, stalled: bool) -> float:
    newton = beta - r / iprime
    if not stalled and lo < newton < hi:
        return newton
    if math.isinf(hi):
        return 10.0 * max(beta, lo)
    if lo <= 0.0:
        return hi / 10.0
    return math.sqrt(lo * hi)


def select_beta(
    p: InverseProblem,
    q_old: np.ndarray,
    u_old: np.ndarray,
    i3h: float,
    cfg: BetaSearchConfig,
    m: Mesh1D,
    refiner: Refiner | None = None,
    beta_start: float | None = None,
) -> BetaSearchResult:
    """Find beta with theta_lower * I_3 <= I_2(beta) <= theta_upper * I_3.

    Newton steps on r(beta) = I_2(beta) - theta_mid * I_3 are safeguarded by a
    bracket; the mesh is refined whenever the estimated errors in I_2 or its
    derivative are too large relative to the target.
    """
    if not i3h > 0:
        raise ValueError(f"Reference misfit I3 must be positive, got {i3h}")
    if refiner is None:
        refiner = DorflerRefiner()

    i3h_initial = i3h
    target, delta_beta, lower, upper = _targets(i3h, cfg)

    beta = beta_start if beta_start is not None else initial_beta(p, m, cfg)
    lo, hi = 0.0, math.inf
    history: list[BetaStep] = []
    newton_steps = refinements = 0
    budget_exhausted = False
    last_r = math.inf

    while True:
        state = solve_subproblem(p, q_old, u_old, beta, m)
        i_h = p.misfit(m, state.w + state.u_old)
        iprime = i_prime_beta(p, state)
        est_i, est_ip = estimate_i_and_iprime_error(p, state)

        while not budget_exhausted and not accuracy_requirements(
            i_h, iprime, est_i.value, est_ip.value, delta_beta, cfg
        ):
            i_tol = cfg.eta_i_fraction * cfg.tau_beta_tilde**2 * delta_beta**2
            failing = est_i if abs(est_i.value) > i_tol else est_ip
            fine = refiner(m, failing.indicators)
            if fine is None:
                budget_exhausted = True
                logger.warning(f"Refinement budget reached during beta search at beta={beta:.6g}")
                break
            q_old, u_old = prolong_iterate(p, q_old, u_old, m, fine)
            m = fine
            i3h = p.misfit(m, u_old)
            target, delta_beta, lower, upper = _targets(i3h, cfg)
            refinements += 1
            state = solve_subproblem(p, q_old, u_old, beta, m)
            i_h = p.misfit(m, state.w + state.u_old)
            iprime = i_prime_beta(p, state)
            est_i, est_ip = estimate_i_and_iprime_error(p, state)
            history.append(
                BetaStep(newton_steps, beta, i_h, iprime, est_i.value, est_ip.value, m.n_vertices, True)
            )

        history.append(
            BetaStep(newton_steps, beta, i_h, iprime, est_i.value, est_ip.value, m.n_vertices)
        )
        logger.debug(
            f"beta={beta:.6g} i_h={i_h:.6g} i'_h={iprime:.6g} "
            f"window=[{lower:.6g}, {upper:.6g}] vertices={m.n_vertices}"
        )

        if lower <= i_h <= upper:
            break
        if newton_steps >= cfg.max_newton_steps:
            raise BetaSearchError(
                f"No admissible beta after {newton_steps} Newton steps (last i_h={i_h:.6g})",
                history=history,
            )
        if iprime >= 0:
            raise BetaSearchError(
                f"Nondescending residual at beta={beta:.6g} (i'_h={iprime:.3e})", history=history
            )

        r = i_h - target
        if r > 0:
            lo = max(lo, beta)
        else:
            hi = min(hi, beta)
        stalled = abs(r) >= last_r
        last_r = abs(r)
        beta = _next_beta(beta, r, iprime, lo, hi, stalled)
        newton_steps += 1

    logger.info(f"Selected beta={beta:.6g} after {newton_steps} Newton steps, {refinements} refinements")
    return BetaSearchResult(
        beta=beta,
        state=state,
        mesh=m,
        q_old=q_old,
        u_old=u_old,
        i3h=i3h,
        i3h_initial=i3h_initial,
        i_h=i_h,
        iprime_h=iprime,
        newton_steps=newton_steps,
        refinements=refinements,
        budget_exhausted=budget_exhausted,
        history=history,
    )
