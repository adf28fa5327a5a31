"""General data misfits, penalties and convergence-rate utilities.

A Tikhonov step may use a general misfit S(y, g) and a convex penalty R(q)
instead of the squared Hilbert norms. The subproblem is then solved by a
proximal gradient method on a dense affine model of the linearized forward
map. Source conditions and rate bounds for the regularized solutions live
here as well.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.optimize import brentq

from .errors import ConvergenceError
from .mesh import Mesh1D
from .problem import DenseLinearProblem, InverseProblem

logger = logging.getLogger(__name__)


class MisfitS(Protocol):
    c_S: float

    def __call__(self, y: np.ndarray, y_ref: np.ndarray) -> float: ...

    def gradient(self, y: np.ndarray, y_ref: np.ndarray) -> np.ndarray: ...


class PenaltyR(Protocol):
    def __call__(self, q: np.ndarray) -> float: ...

    def subgradient(self, q: np.ndarray) -> np.ndarray: ...

    def prox(self, z: np.ndarray, t: float) -> np.ndarray:
        """argmin_x 1/2 ||x - z||^2 + t R(x)"""
        ...


@dataclass(frozen=True)
class QuadraticMisfit:
    """S(y, y_ref) = ||y - y_ref||_G^2"""

    gram: np.ndarray | None = None
    c_S: float = 2.0

    def _apply(self, r: np.ndarray) -> np.ndarray:
        return r if self.gram is None else self.gram @ r

    def __call__(self, y: np.ndarray, y_ref: np.ndarray) -> float:
        r = np.asarray(y) - np.asarray(y_ref)
        return max(float(r @ self._apply(r)), 0.0)

    def gradient(self, y: np.ndarray, y_ref: np.ndarray) -> np.ndarray:
        return 2.0 * self._apply(np.asarray(y) - np.asarray(y_ref))


def _soft(z: np.ndarray, threshold: float) -> np.ndarray:
    return np.sign(z) * np.maximum(np.abs(z) - threshold, 0.0)


@dataclass(frozen=True)
class QuadraticPenalty:
    """R(q) = scale * ||q - q0||^2"""

    q0: np.ndarray
    scale: float = 0.5

    def __call__(self, q: np.ndarray) -> float:
        d = np.asarray(q) - self.q0
        return self.scale * float(d @ d)

    def subgradient(self, q: np.ndarray) -> np.ndarray:
        return 2.0 * self.scale * (np.asarray(q) - self.q0)

    def prox(self, z: np.ndarray, t: float) -> np.ndarray:
        s = 2.0 * self.scale * t
        return (np.asarray(z) + s * self.q0) / (1.0 + s)


@dataclass(frozen=True)
class L1Penalty:
    lam: float = 1.0

    def __call__(self, q: np.ndarray) -> float:
        return self.lam * float(np.sum(np.abs(q)))

    def subgradient(self, q: np.ndarray) -> np.ndarray:
        return self.lam * np.sign(q)

    def prox(self, z: np.ndarray, t: float) -> np.ndarray:
        return _soft(np.asarray(z), t * self.lam)


@dataclass(frozen=True)
class ElasticNetPenalty:
    """R(q) = scale * ||q - q0||^2 + lam * ||q||_1"""

    q0: np.ndarray
    lam: float = 1.0
    scale: float = 0.5

    def __call__(self, q: np.ndarray) -> float:
        d = np.asarray(q) - self.q0
        return self.scale * float(d @ d) + self.lam * float(np.sum(np.abs(q)))

    def subgradient(self, q: np.ndarray) -> np.ndarray:
        return 2.0 * self.scale * (np.asarray(q) - self.q0) + self.lam * np.sign(q)

    def prox(self, z: np.ndarray, t: float) -> np.ndarray:
        s = 2.0 * self.scale * t
        return _soft((np.asarray(z) + s * self.q0) / (1.0 + s), t * self.lam / (1.0 + s))


def bregman_distance(R: PenaltyR, q: np.ndarray, q_bar: np.ndarray, xi_bar: np.ndarray) -> float:
    """R(q) - R(q_bar) - <xi_bar, q - q_bar> for xi_bar in the subdifferential at q_bar"""
    return R(q) - R(q_bar) - float(np.dot(xi_bar, np.asarray(q) - np.asarray(q_bar)))


@dataclass(frozen=True)
class AffineModel:
    """y(q) = J q + offset, the linearization F(q_old) + F'(q_old)(q - q_old)"""

    J: np.ndarray
    offset: np.ndarray

    def __call__(self, q: np.ndarray) -> np.ndarray:
        return self.J @ q + self.offset

    @classmethod
    def linearize(cls, p: InverseProblem, m: Mesh1D, q_old: np.ndarray) -> "AffineModel":
        u_old = p.solve_state(m, q_old)
        n = p.control_space(m).ndofs
        J = np.column_stack([p.apply_Fprime(m, q_old, u_old, e) for e in np.eye(n)])
        return cls(J, u_old - J @ q_old)


@dataclass
class SubproblemSolution:
    q: np.ndarray
    objective: float
    iterations: int
    residuals: list[float] = field(default_factory=list)


def solve_general_subproblem(
    model: AffineModel,
    g: np.ndarray,
    S: MisfitS,
    R: PenaltyR,
    beta: float,
    q_init: np.ndarray | None = None,
    accelerate: bool = True,
    tol: float = 1e-10,
    max_iter: int = 20000,
) -> SubproblemSolution:
    """min_q S(J q + offset, g) + 1/beta R(q) by proximal gradient steps"""
    if not beta > 0:
        raise ValueError(f"Regularization parameter must be positive, got {beta}")

    def smooth(q: np.ndarray) -> float:
        return S(model(q), g)

    def grad(q: np.ndarray) -> np.ndarray:
        return model.J.T @ S.gradient(model(q), g)

    x = np.zeros(model.J.shape[1]) if q_init is None else np.array(q_init, dtype=float)
    y = x.copy()
    t_momentum = 1.0
    L = 1.0
    residuals: list[float] = []

    for it in range(1, max_iter + 1):
        fy, gy = smooth(y), grad(y)
        while True:
            x_new = R.prox(y - gy / L, 1.0 / (L * beta))
            d = x_new - y
            if smooth(x_new) <= fy + gy @ d + 0.5 * L * (d @ d) + 1e-15 * abs(fy):
                break
            L *= 2.0
        residual = L * float(np.linalg.norm(d))
        residuals.append(residual)
        if accelerate:
            t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_momentum**2))
            y = x_new + (t_momentum - 1.0) / t_next * (x_new - x)
            t_momentum = t_next
        else:
            y = x_new
        x = x_new
        if residual <= tol:
            objective = smooth(x) + R(x) / beta
            logger.debug(f"Proximal gradient converged in {it} iterations (objective {objective:.6g})")
            return SubproblemSolution(x, objective, it, residuals)

    raise ConvergenceError(
        f"Proximal gradient did not converge in {max_iter} iterations "
        f"(last residual {residuals[-1]:.3e})",
        residuals=residuals,
    )


def select_beta_bisection(
    model: AffineModel,
    g: np.ndarray,
    S: MisfitS,
    R: PenaltyR,
    i3h: float,
    theta_lower: float,
    theta_upper: float,
    beta_start: float = 1.0,
    max_steps: int = 200,
) -> tuple[float, SubproblemSolution]:
    """beta with theta_lower * I_3 <= S(y(q_beta), g) <= theta_upper * I_3 by bisection in log(beta)"""
    if not i3h > 0:
        raise ValueError(f"Reference misfit I3 must be positive, got {i3h}")
    lower, upper = theta_lower * i3h, theta_upper * i3h
    lo, hi = 0.0, math.inf
    beta = beta_start
    q_init = None
    for _ in range(max_steps):
        sol = solve_general_subproblem(model, g, S, R, beta, q_init=q_init)
        i_h = S(model(sol.q), g)
        if lower <= i_h <= upper:
            return beta, sol
        if i_h > upper:
            lo = beta
        else:
            hi = beta
        beta = 10.0 * beta if math.isinf(hi) else (hi / 10.0 if lo == 0.0 else math.sqrt(lo * hi))
        q_init = sol.q
    raise ConvergenceError(f"No admissible beta after {max_steps} bisection steps")


@dataclass(frozen=True)
class RateFunction:
    """Index function f of a source condition q - q0 = f(F'* F') s"""

    kind: str = "holder"
    exponent: float = 0.5

    def __post_init__(self):
        if self.kind not in ("holder", "log"):
            raise ValueError(f"Unknown rate function kind {self.kind!r}")
        if not self.exponent > 0:
            raise ValueError(f"Rate exponent must be positive, got {self.exponent}")

    @property
    def domain_max(self) -> float:
        return math.exp(-1.0) if self.kind == "log" else math.inf

    def __call__(self, lam: np.ndarray | float) -> np.ndarray:
        lam = np.asarray(lam, dtype=float)
        if np.any(lam < 0) or np.any(lam > self.domain_max):
            raise ValueError(f"Argument outside the domain (0, {self.domain_max}] of {self.kind} rate")
        if self.kind == "holder":
            return lam**self.exponent
        out = np.zeros_like(lam)
        pos = lam > 0
        out[pos] = (-np.log(lam[pos])) ** (-self.exponent)
        return out

    def theta(self, lam: np.ndarray | float) -> np.ndarray:
        return self(lam) * np.sqrt(np.asarray(lam, dtype=float))

    def _invert(self, func: Callable[[float], float], t: float) -> float:
        if t < 0:
            raise ValueError(f"Cannot invert at negative value {t}")
        if t == 0:
            return 0.0
        hi = min(1.0, self.domain_max)
        while func(hi) < t:
            if math.isfinite(self.domain_max) or hi > 1e300:
                raise ValueError(f"Value {t} outside the range of the {self.kind} rate")
            hi *= 2.0
        return brentq(lambda lam: func(lam) - t, 0.0, hi, xtol=1e-300, rtol=1e-13)

    def theta_inverse(self, t: float) -> float:
        return self._invert(lambda lam: float(self.theta(lam)), t)

    def phi(self, t: float) -> float:
        """Inverse of f^2"""
        return self._invert(lambda lam: float(self(lam)) ** 2, t)

    def phi_is_convex(self, samples: Sequence[float]) -> bool:
        ts = sorted(samples)
        values = [self.phi(t) for t in ts]
        for i in range(len(ts) - 1):
            mid = 0.5 * (ts[i] + ts[i + 1])
            if self.phi(mid) > 0.5 * (values[i] + values[i + 1]) + 1e-12:
                return False
        return True


def rate_bound(f: RateFunction, delta: float, s_norm: float, c_bar: float = 1.0) -> float:
    """c_bar^2 delta^2 / Theta^-1(c_bar delta / (2 ||s||))"""
    if not delta > 0:
        raise ValueError(f"Noise level must be positive, got {delta}")
    if not s_norm > 0:
        raise ValueError(f"Source element norm must be positive, got {s_norm}")
    lam = f.theta_inverse(c_bar * delta / (2.0 * s_norm))
    return c_bar**2 * delta**2 / lam


def rate_bound_via_f(f: RateFunction, delta: float, s_norm: float, c_bar: float = 1.0) -> float:
    """4 ||s||^2 f^2(Theta^-1(c_bar delta / (2 ||s||)))"""
    lam = f.theta_inverse(c_bar * delta / (2.0 * s_norm))
    return 4.0 * s_norm**2 * float(f(lam)) ** 2


def rate_scaling_holds(f: RateFunction, C: float, ts: Sequence[float], tol: float = 1e-12) -> bool:
    """f(Theta^-1(C t)) <= max(sqrt(C), 1) f(Theta^-1(t)) on the sampled t"""
    factor = max(math.sqrt(C), 1.0)
    for t in ts:
        lhs = float(f(f.theta_inverse(C * t)))
        rhs = factor * float(f(f.theta_inverse(t)))
        if lhs > rhs + tol * max(1.0, abs(rhs)):
            return False
    return True


@dataclass(frozen=True)
class SourceCondition:
    q_true: np.ndarray
    q0: np.ndarray
    s: np.ndarray

    @property
    def s_norm(self) -> float:
        return float(np.linalg.norm(self.s))


def manufacture_source(
    p: DenseLinearProblem | np.ndarray, f: RateFunction, s: np.ndarray, q0: np.ndarray | None = None
) -> SourceCondition:
    """q_true = q0 + f(T^T T) s by spectral calculus"""
    T = p.T if isinstance(p, DenseLinearProblem) else np.asarray(p, dtype=float)
    if q0 is None:
        q0 = p.prior.copy() if isinstance(p, DenseLinearProblem) else np.zeros(T.shape[1])
    eigvals, eigvecs = np.linalg.eigh(T.T @ T)
    eigvals = np.clip(eigvals, 0.0, None)
    s = np.asarray(s, dtype=float)
    q_true = q0 + eigvecs @ (f(eigvals) * (eigvecs.T @ s))
    return SourceCondition(q_true=q_true, q0=np.asarray(q0, dtype=float), s=s)


@dataclass
class Assumption1Report:
    samples: int
    symmetry_gap: float
    zero_gap: float
    convexity_margin: float
    c_S_estimate: float
    c_S_declared: float

    @property
    def passed(self) -> dict[str, bool]:
        return {
            "symmetry": self.symmetry_gap <= 1e-12,
            "identity": self.zero_gap <= 1e-12,
            "convexity": self.convexity_margin >= -1e-12,
            "quasi_triangle": self.c_S_estimate <= self.c_S_declared + 1e-12,
        }


def check_assumption1(
    S: MisfitS,
    sampler: Callable[[np.random.Generator], np.ndarray],
    n: int,
    seed: int = 0,
) -> Assumption1Report:
    """Sampled checks of symmetry, S(y,y) = 0, convexity and the quasi-triangle inequality"""
    if n < 1:
        raise ValueError(f"Need at least one sample, got {n}")
    rng = np.random.default_rng(seed)
    symmetry = zero = 0.0
    convexity = math.inf
    c_S = 0.0
    for _ in range(n):
        y, y_mid, y_ref = sampler(rng), sampler(rng), sampler(rng)
        s_far = S(y, y_ref)
        symmetry = max(symmetry, abs(s_far - S(y_ref, y)))
        zero = max(zero, abs(S(y, y)))
        lam = rng.uniform()
        combo = S(lam * y + (1 - lam) * y_mid, y_ref)
        convexity = min(convexity, lam * s_far + (1 - lam) * S(y_mid, y_ref) - combo)
        denominator = S(y, y_mid) + S(y_mid, y_ref)
        if denominator > 0:
            c_S = max(c_S, s_far / denominator)
    return Assumption1Report(n, symmetry, zero, convexity, c_S, S.c_S)


@dataclass(frozen=True)
class VariationalReport:
    constant: float
    samples: int
    skipped: int


def check_variational_inequality(
    R: PenaltyR,
    p: InverseProblem,
    q_true: np.ndarray,
    samples: Sequence[np.ndarray],
    m: Mesh1D,
) -> VariationalReport:
    """Smallest c with <xi, q_true - q> <= c D(q, q_true)^(1/2) ||F(q) - F(q_true)|| on the samples"""
    xi = R.subgradient(q_true)
    y_true = p.apply_F(m, q_true)
    constant = 0.0
    skipped = 0
    for q in samples:
        lhs = float(np.dot(xi, q_true - q))
        bregman = max(bregman_distance(R, q, q_true, xi), 0.0)
        denominator = math.sqrt(bregman) * p.g_norm(m, p.apply_F(m, q) - y_true)
        if denominator <= 0.0:
            skipped += 1
            continue
        constant = max(constant, lhs / denominator)
    return VariationalReport(constant, len(samples), skipped)
