"""Closed-form ground truth for the AR(1)-ARCH(1) example.

m2 = a0 / (1 - rho0^2 - b0) is the stationary second moment and m(theta) = 2 m2 the
limit of M''_n(rho0). m4 solves the squared recursion

    m4 = rho0^4 m4 + 6 rho0^2 (a0 m2 + b0 m4) + E[eps^4] (a0^2 + 2 a0 b0 m2 + b0^2 m4)

for symmetric innovations; higher even moments follow the same binomial expansion.
"""

import logging
import math
from dataclasses import asdict, dataclass

from scipy.special import comb

from lab.chain import ModelParams
from lab.errors import MomentOrderError, NumericalError, ParameterDomainError

log = logging.getLogger("Theory")


@dataclass(frozen=True)
class TheoryReport:
    m_theta: float
    m2: float
    m4: float
    sigma1_sq: float
    tau: float
    sigma2_sq_lower: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FirstOrderScale:
    """Asymptotic size of n M'_n(b_hat) at the true nuisance values, split by plug-in term."""

    delta1: float
    delta2: float
    delta3: float
    s_rho: float
    s_xi: float
    s_tau: float

    @property
    def total(self) -> float:
        return self.delta1 + self.delta2 + self.delta3

    def to_dict(self) -> dict:
        out = asdict(self)
        out["total"] = self.total
        return out


def _second_moment_gap(theta: ModelParams) -> float:
    gap = 1.0 - theta.rho0 ** 2 - theta.b0
    if gap <= 0.0:
        raise ParameterDomainError("b0", f"rho0^2 + b0 < 1 required (1 - rho0^2 - b0 = {gap:.6g})")
    return gap


def fourth_moment_gap(theta: ModelParams) -> float:
    """1 - rho0^4 - 6 rho0^2 b0 - E[eps^4] b0^2; positive iff m4 is finite."""
    kurt = theta.innovation.fourth_moment
    return 1.0 - theta.rho0 ** 4 - 6.0 * theta.rho0 ** 2 * theta.b0 - kurt * theta.b0 ** 2


def m_of_theta(theta: ModelParams) -> float:
    return 2.0 * theta.a0 / _second_moment_gap(theta)


def stationary_moments(theta: ModelParams) -> tuple[float, float]:
    rho, a, b = theta.rho0, theta.a0, theta.b0
    m2 = a / _second_moment_gap(theta)
    gap4 = fourth_moment_gap(theta)
    if gap4 <= 0.0:
        kurt = theta.innovation.fourth_moment
        raise ParameterDomainError(
            "b0",
            f"fourth-moment condition 1 - rho0^4 - 6 rho0^2 b0 - {kurt:g} b0^2 > 0 fails ({gap4:.6g})",
        )
    kurt = theta.innovation.fourth_moment
    m4 = (6.0 * rho * rho * a * m2 + kurt * (a * a + 2.0 * a * b * m2)) / gap4
    return m2, m4


def even_moments(theta: ModelParams, order: int) -> list[float]:
    """[E X^0, E X^2, ..., E X^order] under the stationary law.

    E[X'^2j] expands (rho0 x + sigma(x) eps)^2j; the x^2j coefficient is
    g_j = E[(rho0 + sqrt(b0) eps)^2j] and the moment is finite iff g_j < 1.
    """
    order = int(order)
    if order < 0 or order % 2:
        raise ParameterDomainError("order", f"even moment order expected, got {order}")
    rho, a, b = theta.rho0, theta.a0, theta.b0
    law = theta.innovation
    m = [1.0]
    for j in range(1, order // 2 + 1):
        g, rest = 0.0, 0.0
        for h in range(j + 1):
            coef = comb(2 * j, 2 * h, exact=True) * rho ** (2 * j - 2 * h) * law.even_moment(2 * h)
            g += coef * b ** h
            for l in range(h):
                rest += coef * comb(h, l, exact=True) * a ** (h - l) * b ** l * m[j - h + l]
        if g >= 1.0:
            raise MomentOrderError(f"E[X^{2 * j}] is infinite for {theta.theta_id} (coefficient {g:.6g} >= 1)")
        m.append(rest / (1.0 - g))
    return m


def sigma1_sq(theta: ModelParams) -> float:
    """Long-run variance of F'(rho0, X_{k-1}, X_k) = -2 X_{k-1} sigma(X_{k-1}) eps_k."""
    m2, m4 = stationary_moments(theta)
    value = 4.0 * (theta.a0 * m2 + theta.b0 * m4)
    if value < 4.0 * theta.a0 * m2 * (1.0 - 1e-12) or value < 4.0 * theta.a0 ** 2 * (1.0 - 1e-12):
        raise NumericalError(f"sigma1^2 = {value!r} below 4 a0 max(a0, E[X^2]) for {theta.theta_id}")
    return value


def sigma2_structure(theta: ModelParams) -> tuple[float, float]:
    """(v11, ratio) with v11 = Var(2 X^2) and v_{k,l} = ratio * v_{k,l-1}, ratio = rho0^2 + b0."""
    m2, m4 = stationary_moments(theta)
    v11 = 4.0 * (m4 - m2 * m2)
    ratio = theta.rho0 ** 2 + theta.b0
    if not v11 > 0.0:
        raise MomentOrderError(f"v_11 = 4 (m4 - m2^2) = {v11!r} is not positive for {theta.theta_id}")
    return v11, ratio


def sigma2_sq(theta: ModelParams) -> float:
    """Long-run variance of F''(rho0, .) = 2 X^2 implied by the geometric v recursion."""
    v11, ratio = sigma2_structure(theta)
    return v11 * (1.0 + ratio) / (1.0 - ratio)


def tau(theta: ModelParams) -> float:
    return math.sqrt(sigma1_sq(theta)) / m_of_theta(theta)


def b_first_order_scale(theta: ModelParams) -> FirstOrderScale:
    """Constants C with n |Delta_jn| <= C_j log n whenever every standardized plug-in error is
    below sqrt(log n).

    With U = sqrt(n)(rho_hat - rho0) ~ N(0, tau^2), V = n^{-1/2} sum (tau0^2 - X_{k-1}^2) e_k X_{k-1}
    and W = sqrt(n)(tau_hat^2 - tau0^2) ~ N(0, sigma2^2 / 4):

        n Delta_1n = 4 U V
        n Delta_2n = -2 U^2 E[(tau0^2 - X^2) X^2] + o(1)
        n Delta_3n = -2 W ((1 - rho0^2 - b0) W - 2 rho0 tau0^2 U) + o(1)

    while n A_n = -n B_n vanishes. Needs E[X^8] < infinity.
    """
    rho, a, b = theta.rho0, theta.a0, theta.b0
    _, m2, m4, m6, m8 = even_moments(theta, 8)
    s_rho = tau(theta)
    s_tau = 0.5 * math.sqrt(sigma2_sq(theta))
    s_xi = math.sqrt(m2 * m2 * (a * m2 + b * m4) - 2.0 * m2 * (a * m4 + b * m6) + a * m6 + b * m8)
    scale = FirstOrderScale(
        delta1=4.0 * s_rho * s_xi,
        delta2=2.0 * s_rho * s_rho * (m4 - m2 * m2),
        delta3=2.0 * s_tau * (s_tau * (1.0 - rho * rho - b) + 2.0 * abs(rho) * m2 * s_rho),
        s_rho=s_rho,
        s_xi=s_xi,
        s_tau=s_tau,
    )
    log.debug("%s: first-order scale %s", theta.theta_id, scale)
    return scale


def theory_report(theta: ModelParams) -> TheoryReport:
    m2, m4 = stationary_moments(theta)
    s1 = sigma1_sq(theta)
    m = m_of_theta(theta)
    report = TheoryReport(
        m_theta=m,
        m2=m2,
        m4=m4,
        sigma1_sq=s1,
        tau=math.sqrt(s1) / m,
        sigma2_sq_lower=sigma2_sq(theta),
    )
    log.debug("%s: %s", theta.theta_id, report)
    return report
