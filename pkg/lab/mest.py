"""M-estimation on a trajectory.

M_n(alpha) = (1/n) sum_k F(alpha, X_{k-1}, X_k), with companions M'_n and M''_n built from
F' and F''. An M-estimator is any alpha_hat with M_n(alpha_hat) <= min_A M_n + c_n.
Sums go through math.fsum so the result does not depend on reduction order.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from lab import theory
from lab.chain import Trajectory
from lab.errors import DegenerateDataError, NumericalError, ParameterDomainError

log = logging.getLogger("MEst")

GRID_POINTS = 512
GOLDEN_TOL = 1e-10
CLOSED_FORM_AGREEMENT = 1e-8
DEFAULT_B_DOMAIN = (0.01, 0.99)

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
INV_PHI_SQUARED = (3.0 - math.sqrt(5.0)) / 2.0


@dataclass(frozen=True)
class Criterion:
    """F, F', F'' as vectorized callables (alpha, x, y) -> array, on the open interval `domain`."""

    F: Callable
    F_prime: Callable
    F_second: Callable
    domain: tuple[float, float]

    def check(self, alpha: float) -> None:
        lo, hi = self.domain
        if not lo < alpha < hi:
            raise ParameterDomainError("alpha", f"{alpha!r} outside the open interval ({lo}, {hi})")


@dataclass(frozen=True)
class EstimationResult:
    alpha_hat: float
    criterion_value: float
    m_prime_at_hat: float
    c_n_used: float
    iterations: int
    grid_minimum: float
    closed_form: float | None = None

    def to_row(self, theta_id: str, n: int, seed: int, estimator: str) -> dict:
        return {
            "theta_id": theta_id,
            "n": int(n),
            "seed": int(seed),
            "estimator": estimator,
            "alpha_hat": self.alpha_hat,
            "criterion_value": self.criterion_value,
            "m_prime_at_hat": self.m_prime_at_hat,
        }


def _mean(values, n: int) -> float:
    return math.fsum(np.asarray(values, dtype=float).reshape(-1).tolist()) / n


def _empirical(fn: Callable, crit: Criterion, traj: Trajectory, alpha: float) -> float:
    crit.check(alpha)
    if traj.n < 1:
        raise ParameterDomainError("n", "trajectory needs at least one transition")
    x, y = traj.prev, traj.curr
    vals = np.broadcast_to(np.asarray(fn(alpha, x, y), dtype=float), x.shape)
    return _mean(vals, traj.n)


def criterion_value(crit: Criterion, traj: Trajectory, alpha: float) -> float:
    return _empirical(crit.F, crit, traj, alpha)


def m_prime(crit: Criterion, traj: Trajectory, alpha: float) -> float:
    return _empirical(crit.F_prime, crit, traj, alpha)


def m_second(crit: Criterion, traj: Trajectory, alpha: float) -> float:
    return _empirical(crit.F_second, crit, traj, alpha)


def least_squares_criterion(domain: tuple[float, float] = (-1.0, 1.0)) -> Criterion:
    """F(rho, x, y) = (y - rho x)^2."""
    return Criterion(
        F=lambda r, x, y: np.square(y - r * x),
        F_prime=lambda r, x, y: -2.0 * x * (y - r * x),
        F_second=lambda r, x, y: 2.0 * np.square(x),
        domain=domain,
    )


def eta(b, r: float, v: float, x, y):
    """eta_k(b, r, v) = (X_k - r X_{k-1})^2 - v (1 - r^2 - b) - b X_{k-1}^2"""
    return np.square(y - r * x) - v * (1.0 - r * r - b) - b * np.square(x)


def arch_criterion(r: float, v: float, domain: tuple[float, float] = DEFAULT_B_DOMAIN) -> Criterion:
    """T_n(b; r, v) as an M-criterion in b."""
    return Criterion(
        F=lambda b, x, y: np.square(eta(b, r, v, x, y)),
        F_prime=lambda b, x, y: 2.0 * (v - np.square(x)) * eta(b, r, v, x, y),
        F_second=lambda b, x, y: 2.0 * np.square(v - np.square(x)),
        domain=domain,
    )


# ---------------------------------------------------------------------------
# Grid scan + golden-section refinement
# ---------------------------------------------------------------------------
def _checked(objective: Callable, alpha: float) -> float:
    value = float(objective(alpha))
    if not math.isfinite(value):
        raise NumericalError(f"criterion is not finite at alpha={alpha!r}", alpha=alpha)
    return value


def grid_golden(
    objective: Callable,
    lo: float,
    hi: float,
    *,
    c_n: float = 0.0,
    grid_points: int = GRID_POINTS,
    tol: float = GOLDEN_TOL,
    grid_objective: Callable | None = None,
) -> tuple[float, float, float, int]:
    """Minimize a scalar objective on [lo, hi].

    `grid_objective`, when given, evaluates the whole scan grid in one vectorized call.

    Returns (alpha, value, grid_minimum, iterations). The returned value never exceeds the
    grid minimum, so value <= grid_minimum + c_n holds for every c_n >= 0.
    """
    if not (math.isfinite(lo) and math.isfinite(hi)) or not lo < hi:
        raise ParameterDomainError("domain", f"bounded interval required, got ({lo}, {hi})")
    if c_n < 0.0:
        raise ParameterDomainError("c_n", f"tolerance must be >= 0, got {c_n}")
    grid_points = max(int(grid_points), 3)
    step = (hi - lo) / grid_points
    grid = lo + step * (np.arange(grid_points) + 0.5)
    if grid_objective is not None:
        values = np.asarray(grid_objective(grid), dtype=float)
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            alpha = float(grid[bad[0]])
            raise NumericalError(f"criterion is not finite at alpha={alpha!r}", alpha=alpha)
    else:
        values = np.array([_checked(objective, float(a)) for a in grid])
    j = int(np.argmin(values))
    grid_min = float(values[j])
    best_a, best_v = float(grid[j]), grid_min

    a = max(lo, best_a - step)
    b = min(hi, best_a + step)
    h = b - a
    c = a + INV_PHI_SQUARED * h
    d = a + INV_PHI * h
    yc = _checked(objective, c)
    yd = _checked(objective, d)
    iterations = 0
    while h > tol:
        if c_n > 0.0 and abs(yc - yd) <= c_n and max(yc, yd) - min(best_v, yc, yd) <= c_n:
            break
        iterations += 1
        if yc < yd:
            b, d, yd = d, c, yc
            h = INV_PHI * h
            c = a + INV_PHI_SQUARED * h
            yc = _checked(objective, c)
        else:
            a, c, yc = c, d, yd
            h = INV_PHI * h
            d = a + INV_PHI * h
            yd = _checked(objective, d)
        for pt, val in ((c, yc), (d, yd)):
            if val < best_v:
                best_a, best_v = pt, val
    log.debug("grid_golden on [%g, %g]: alpha=%.12g after %d iterations", lo, hi, best_a, iterations)
    return best_a, best_v, grid_min, iterations


def minimize(
    crit: Criterion,
    traj: Trajectory,
    c_n: float = 0.0,
    *,
    grid_points: int = GRID_POINTS,
    tol: float = GOLDEN_TOL,
) -> EstimationResult:
    lo, hi = crit.domain
    alpha, value, grid_min, iterations = grid_golden(
        lambda a: criterion_value(crit, traj, a),
        lo,
        hi,
        c_n=c_n,
        grid_points=grid_points,
        tol=tol,
    )
    return EstimationResult(
        alpha_hat=alpha,
        criterion_value=value,
        m_prime_at_hat=m_prime(crit, traj, alpha),
        c_n_used=float(c_n),
        iterations=iterations,
        grid_minimum=grid_min,
    )


# ---------------------------------------------------------------------------
# Closed-form estimators of the AR(1)-ARCH(1) example
# ---------------------------------------------------------------------------
def rho_hat(traj: Trajectory) -> float:
    """Least squares: sum X_k X_{k-1} / sum X_{k-1}^2."""
    den = math.fsum(np.square(traj.prev).tolist())
    if den == 0.0:
        raise DegenerateDataError("sum of X_{k-1}^2 is zero; rho_hat is undefined")
    return math.fsum((traj.curr * traj.prev).tolist()) / den


def tau_hat_sq(traj: Trajectory) -> float:
    if traj.n < 1:
        raise ParameterDomainError("n", "trajectory needs at least one transition")
    return _mean(np.square(traj.curr), traj.n)


def rho_consistency_terms(traj: Trajectory) -> tuple[float, float, float]:
    """(Delta_1, Delta_2, rho_hat - rho0) with rho_hat - rho0 = (Delta_1 - rho0 Delta_2) / (Delta_2 + E_pi[X^2])."""
    if traj.theta is None:
        raise ParameterDomainError("theta", "trajectory carries no model parameters")
    rho0 = traj.theta.rho0
    m2 = 0.5 * theory.m_of_theta(traj.theta)
    d1 = _mean(traj.curr * traj.prev - rho0 * m2, traj.n)
    d2 = _mean(np.square(traj.prev) - m2, traj.n)
    return d1, d2, (d1 - rho0 * d2) / (d2 + m2)


def _b_moments(traj: Trajectory, r: float, v: float) -> tuple[float, float, float]:
    """(S_cc, S_cw, S_ww) with eta_k(b) = c_k + b w_k, w_k = v - X_{k-1}^2."""
    prev2 = np.square(traj.prev)
    c = np.square(traj.curr - r * traj.prev) - v * (1.0 - r * r)
    w = v - prev2
    n = traj.n
    return _mean(c * c, n), _mean(c * w, n), _mean(w * w, n)


def b_hat(
    traj: Trajectory,
    rho_plug: float,
    tausq_plug: float,
    b_domain: tuple[float, float] = DEFAULT_B_DOMAIN,
    *,
    grid_points: int = GRID_POINTS,
    tol: float = GOLDEN_TOL,
) -> EstimationResult:
    """Two-step estimator: argmin over [m_b, M_b] of M_n(b) = T_n(b; rho_plug, tausq_plug)."""
    if not (math.isfinite(rho_plug) and math.isfinite(tausq_plug)):
        raise ParameterDomainError("plug-in", f"plug-ins must be finite, got ({rho_plug}, {tausq_plug})")
    lo, hi = float(b_domain[0]), float(b_domain[1])
    if not 0.0 < lo < hi < 1.0:
        raise ParameterDomainError("b_domain", f"0 < m_b < M_b < 1 required, got ({lo}, {hi})")
    s_cc, s_cw, s_ww = _b_moments(traj, rho_plug, tausq_plug)
    if s_ww == 0.0:
        raise DegenerateDataError("sum of (tau_hat^2 - X_{k-1}^2)^2 is zero; b_hat is undefined")

    vertex = -s_cw / s_ww
    floor = s_cc - s_cw * s_cw / s_ww
    # T_n = floor + s_ww (b - vertex)^2; only the excess over the floor is searched.
    def objective(b):
        return s_ww * (b - vertex) ** 2

    alpha, _, grid_min, iterations = grid_golden(
        objective,
        lo,
        hi,
        grid_objective=objective,
        grid_points=grid_points,
        tol=tol,
    )
    if lo < vertex < hi and abs(alpha - vertex) > CLOSED_FORM_AGREEMENT:
        raise NumericalError(
            f"b_hat refinement {alpha!r} disagrees with the closed form {vertex!r}", alpha=alpha
        )
    value = floor + objective(alpha)
    return EstimationResult(
        alpha_hat=alpha,
        criterion_value=value,
        m_prime_at_hat=2.0 * (s_cw + alpha * s_ww),
        c_n_used=0.0,
        iterations=iterations,
        grid_minimum=floor + grid_min,
        closed_form=vertex,
    )


def b_error_closed_form(traj: Trajectory, rho_plug: float, tausq_plug: float, b0: float) -> float:
    """Unconstrained minimizer minus b0: -sum w_k eta_k(b0) / sum w_k^2, w_k = tau^2 - X_{k-1}^2."""
    w = tausq_plug - np.square(traj.prev)
    num = math.fsum((w * eta(b0, rho_plug, tausq_plug, traj.prev, traj.curr)).tolist())
    den = math.fsum(np.square(w).tolist())
    if den == 0.0:
        raise DegenerateDataError("sum of (tau_hat^2 - X_{k-1}^2)^2 is zero")
    return -num / den


@dataclass(frozen=True)
class V3Decomposition:
    m_prime: float
    a_n: float
    delta1: float
    delta2: float
    delta3: float
    b_n: float
    b_n_closed: float

    @property
    def abs_m_prime(self) -> float:
        return abs(self.m_prime)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["abs_m_prime"] = self.abs_m_prime
        return out


def v3_residual(traj: Trajectory, rho_plug: float, tausq_plug: float, b_hat_value: float) -> V3Decomposition:
    """M'_n(b_hat) at the true (rho0, tau0^2) and its split A_n + Delta_1n + Delta_2n + Delta_3n."""
    if traj.theta is None:
        raise ParameterDomainError("theta", "trajectory carries no model parameters")
    rho0 = traj.theta.rho0
    tau0 = 0.5 * theory.m_of_theta(traj.theta)
    n = traj.n
    x, y = traj.prev, traj.curr
    b = float(b_hat_value)
    w0 = tau0 - np.square(x)

    m_p = 2.0 * _mean(w0 * eta(b, rho0, tau0, x, y), n)
    a_n = 2.0 * _mean(w0 * eta(b, rho_plug, tausq_plug, x, y), n)
    delta = rho_plug - rho0
    d1 = 4.0 * delta * _mean(w0 * (y - rho0 * x) * x, n)
    d2 = -2.0 * delta * delta * _mean(w0 * np.square(x), n)
    shift = tausq_plug * (1.0 - rho_plug ** 2 - b) - tau0 * (1.0 - rho0 ** 2 - b)
    d3 = 2.0 * shift * _mean(w0, n)

    parts = (a_n, d1, d2, d3)
    total = math.fsum(parts)
    scale = math.fsum(abs(p) for p in parts) or 1.0
    if abs(m_p - total) > 1e-9 * max(scale, abs(m_p)):
        raise NumericalError(f"decomposition mismatch: M'={m_p!r} vs parts sum {total!r}")

    b_n = 2.0 * (tausq_plug - tau0) * _mean(eta(b, rho_plug, tausq_plug, x, y), n)
    b_n_closed = 2.0 * (tausq_plug - tau0) * (b + rho_plug ** 2) * traj.x[-1] ** 2 / n
    return V3Decomposition(m_p, a_n, d1, d2, d3, b_n, b_n_closed)


def rho_m_prime(traj: Trajectory, rho: float) -> float:
    """M'_n of the least-squares criterion, with no domain restriction."""
    crit = least_squares_criterion((-math.inf, math.inf))
    return m_prime(crit, traj, rho)
