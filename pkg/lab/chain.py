"""AR(1)-ARCH(1) chain: model types, reproducible simulation, drift/minorization audit.

X_k = rho0 * X_{k-1} + sigma(X_{k-1}; a0, b0) * eps_k,   sigma^2(x; a, b) = a + b x^2,
started from X_0 = 0.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from lab.errors import MomentOrderError, NumericalError, ParameterDomainError
from lab.longrun import batch_means_variance

log = logging.getLogger("Chain")

GAUSSIAN = "standard_gaussian"
STUDENT = "scaled_student"

MASK64 = (1 << 64) - 1
TAIL_MASS = 1e-10
QUAD_TOL = 1e-8
DEFAULT_S_GRID = (1.0, 2.0, 5.0, 10.0, 20.0, 50.0)
# |x| ladder for Q V / V; both signs are evaluated.
DRIFT_X_LADDER = (
    0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 7.5, 10.0, 15.0, 20.0,
    30.0, 50.0, 75.0, 100.0, 200.0, 500.0, 1000.0,
)
MINORIZATION_U_POINTS = 201
MINORIZATION_X_POINTS = 41


# ---------------------------------------------------------------------------
# Innovation law
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class InnovationLaw:
    """Mean-zero, unit-variance innovation density with a sampler."""

    kind: str = GAUSSIAN
    df: int | None = None

    def __post_init__(self):
        if self.kind == GAUSSIAN:
            if self.df is not None:
                raise ParameterDomainError("df", "only scaled_student takes degrees of freedom")
        elif self.kind == STUDENT:
            if self.df is None or int(self.df) != self.df or self.df <= 12:
                raise ParameterDomainError("df", f"scaled_student needs an integer df > 12, got {self.df!r}")
            object.__setattr__(self, "df", int(self.df))
        else:
            raise ParameterDomainError("kind", f"unknown innovation law {self.kind!r}")

    @classmethod
    def gaussian(cls) -> "InnovationLaw":
        return cls(GAUSSIAN)

    @classmethod
    def student(cls, df: int) -> "InnovationLaw":
        return cls(STUDENT, df)

    @property
    def scale(self) -> float:
        """Factor that brings a Student variable to unit variance."""
        if self.kind == GAUSSIAN:
            return 1.0
        return math.sqrt((self.df - 2) / self.df)

    @property
    def fourth_moment(self) -> float:
        if self.kind == GAUSSIAN:
            return 3.0
        return 3.0 * (self.df - 2) / (self.df - 4)

    def even_moment(self, k: int) -> float:
        """E[eps^k] for even k; odd moments vanish by symmetry."""
        k = int(k)
        if k < 0 or k % 2:
            raise ParameterDomainError("k", f"even moment order expected, got {k}")
        if self.kind == STUDENT and self.df <= k:
            raise MomentOrderError(f"scaled_student(df={self.df}) has no finite moment of order {k}")
        value = 1.0
        for i in range(1, k // 2 + 1):
            if self.kind == GAUSSIAN:
                value *= 2 * i - 1
            else:
                # E[T^2i] / E[T^2(i-1)] = df (2i - 1) / (df - 2i), times the unit-variance scale
                value *= (2 * i - 1) * (self.df - 2) / (self.df - 2 * i)
        return value

    def pdf(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == GAUSSIAN:
            return np.exp(-0.5 * y * y) / math.sqrt(2.0 * math.pi)
        s = self.scale
        return stats.t.pdf(y / s, self.df) / s

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == GAUSSIAN:
            return rng.standard_normal(size)
        return rng.standard_t(self.df, size) * self.scale

    def check_moment(self, p: float) -> None:
        if self.kind == STUDENT and self.df <= p:
            raise MomentOrderError(
                f"scaled_student(df={self.df}) has no finite moment of order p={p}; need df > p"
            )

    def tail_cutoff(self, p: float, tail_mass: float = TAIL_MASS) -> float:
        """T such that the two tails of (1+|y|)^p f(y) beyond [-T, T] carry < tail_mass."""
        self.check_moment(p)
        target = 0.5 * tail_mass
        if self.kind == GAUSSIAN:
            # d/dy log((1+y)^p phi(y)) <= p/(1+T) - T on y >= T, so the tail is bounded
            # by (1+T)^p phi(T) / (T - p/(1+T)).
            t = 2.0
            while True:
                rate = t - p / (1.0 + t)
                if rate > 0:
                    log_bound = p * math.log1p(t) - 0.5 * t * t - 0.5 * math.log(2.0 * math.pi) - math.log(rate)
                    if log_bound < math.log(target):
                        return t
                t += 0.5
        # (1+y)^p <= (2y)^p for y >= 1 and the t-density is bounded by its power tail.
        s, df = self.scale, self.df
        c = stats.t.pdf(0.0, df)
        log_k = (
            p * math.log(2.0) + math.log(c) - math.log(s)
            + 0.5 * (df + 1) * math.log(s * s * df) - math.log(df - p)
        )
        log_t = (log_k - math.log(target)) / (df - p)
        return max(1.0, math.exp(log_t))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "df": self.df}


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ModelParams:
    rho0: float
    a0: float
    b0: float
    innovation: InnovationLaw = field(default_factory=InnovationLaw)
    p: float = 7.0

    def __post_init__(self):
        for name in ("rho0", "a0", "b0", "p"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ParameterDomainError(name, f"must be finite, got {value!r}")
            object.__setattr__(self, name, value)
        if not abs(self.rho0) < 1.0:
            raise ParameterDomainError("rho0", f"|rho0| < 1 required, got {self.rho0}")
        if not self.a0 > 0.0:
            raise ParameterDomainError("a0", f"a0 > 0 required, got {self.a0}")
        if not 0.0 <= self.b0 < 1.0:
            raise ParameterDomainError("b0", f"b0 in [0, 1) required, got {self.b0}")
        if not self.rho0 ** 2 + self.b0 < 1.0:
            raise ParameterDomainError(
                "b0", f"rho0^2 + b0 < 1 required, got {self.rho0 ** 2 + self.b0:.6g}"
            )
        if self.p < 1.0:
            raise ParameterDomainError("p", f"moment order must be >= 1, got {self.p}")
        self.innovation.check_moment(self.p)

    @property
    def theta_id(self) -> str:
        return f"r{self.rho0:+.3f}_a{self.a0:.3f}_b{self.b0:.3f}"

    def sigma(self, x):
        return np.sqrt(self.a0 + self.b0 * np.square(x))

    def to_dict(self) -> dict:
        return {
            "rho0": self.rho0,
            "a0": self.a0,
            "b0": self.b0,
            "p": self.p,
            "innovation": self.innovation.to_dict(),
        }


def _levels(lo: float, hi: float, count: int) -> list[float]:
    if count <= 1 or lo == hi:
        return [0.5 * (lo + hi)]
    return [float(v) for v in np.linspace(lo, hi, count)]


@dataclass(frozen=True)
class ParamBox:
    """Compact parameter box with its finite evaluation grid."""

    rho_bar: float
    m_a: float
    M_a: float
    m_b: float
    M_b: float
    p: float = 7.0
    innovation: InnovationLaw = field(default_factory=InnovationLaw)
    grid: tuple[ModelParams, ...] = ()

    def __post_init__(self):
        if not 0.0 < self.rho_bar < 1.0:
            raise ParameterDomainError("rho_bar", f"must lie in (0, 1), got {self.rho_bar}")
        if not 0.0 < self.m_a < self.M_a:
            raise ParameterDomainError("m_a", f"0 < m_a < M_a required, got ({self.m_a}, {self.M_a})")
        if not 0.0 < self.m_b < self.M_b < 1.0:
            raise ParameterDomainError("m_b", f"0 < m_b < M_b < 1 required, got ({self.m_b}, {self.M_b})")
        for theta in self.grid:
            if not (abs(theta.rho0) <= self.rho_bar + 1e-12
                    and self.m_a - 1e-12 <= theta.a0 <= self.M_a + 1e-12
                    and self.m_b - 1e-12 <= theta.b0 <= self.M_b + 1e-12):
                raise ParameterDomainError("grid", f"{theta.theta_id} lies outside the box")

    @classmethod
    def lattice(
        cls,
        rho_bar: float,
        m_a: float,
        M_a: float,
        m_b: float,
        M_b: float,
        *,
        p: float = 7.0,
        innovation: InnovationLaw | None = None,
        n_rho: int = 5,
        n_a: int = 3,
        n_b: int = 3,
    ) -> "ParamBox":
        """Box with an n_rho x n_a x n_b lattice grid; points violating rho^2 + b < 1 are skipped."""
        innovation = innovation or InnovationLaw()
        grid = []
        for rho in _levels(-rho_bar, rho_bar, n_rho):
            for a in _levels(m_a, M_a, n_a):
                for b in _levels(m_b, M_b, n_b):
                    if rho * rho + b >= 1.0:
                        log.debug("skipping grid point rho=%g b=%g (rho^2 + b >= 1)", rho, b)
                        continue
                    grid.append(ModelParams(rho, a, b, innovation, p))
        return cls(rho_bar, m_a, M_a, m_b, M_b, p, innovation, tuple(grid))

    def center(self) -> ModelParams:
        return ModelParams(0.0, 0.5 * (self.m_a + self.M_a), 0.5 * (self.m_b + self.M_b), self.innovation, self.p)

    def to_dict(self) -> dict:
        return {
            "rho_bar": self.rho_bar,
            "m_a": self.m_a,
            "M_a": self.M_a,
            "m_b": self.m_b,
            "M_b": self.M_b,
            "p": self.p,
            "innovation": self.innovation.to_dict(),
            "grid": [theta.theta_id for theta in self.grid],
        }


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Trajectory:
    x: np.ndarray
    seed: int | None = None
    theta: ModelParams | None = None

    def __post_init__(self):
        arr = np.array(self.x, dtype=float)
        if arr.ndim != 1 or arr.size < 1:
            raise ParameterDomainError("x", "trajectory must be a non-empty 1-D sequence")
        arr.setflags(write=False)
        object.__setattr__(self, "x", arr)

    @classmethod
    def from_values(cls, values, theta: ModelParams | None = None) -> "Trajectory":
        return cls(np.asarray(values, dtype=float), None, theta)

    @property
    def n(self) -> int:
        return self.x.size - 1

    @property
    def prev(self) -> np.ndarray:
        """X_0 .. X_{n-1}"""
        return self.x[:-1]

    @property
    def curr(self) -> np.ndarray:
        """X_1 .. X_n"""
        return self.x[1:]

    def innovations(self) -> np.ndarray:
        """Recover eps_k = (X_k - rho0 X_{k-1}) / sigma(X_{k-1})."""
        if self.theta is None:
            raise ParameterDomainError("theta", "trajectory carries no model parameters")
        return (self.curr - self.theta.rho0 * self.prev) / self.theta.sigma(self.prev)


def derive_stream_seed(master_seed: int, replication_index: int) -> int:
    """64-bit stream key for one replication; depends only on (master_seed, index)."""
    ss = np.random.SeedSequence(entropy=int(master_seed) & MASK64, spawn_key=(int(replication_index) & MASK64,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def innovation_stream(law: InnovationLaw, seed: int, n: int) -> np.ndarray:
    """The innovations eps_1..eps_n that simulate() consumes for this seed."""
    rng = np.random.Generator(np.random.Philox(key=int(seed) & MASK64))
    return law.sample(rng, int(n))


def simulate_with_innovations(theta: ModelParams, eps, *, x0: float = 0.0, seed: int | None = None) -> Trajectory:
    eps = np.asarray(eps, dtype=float).reshape(-1)
    if not np.all(np.isfinite(eps)):
        raise ParameterDomainError("eps", "innovations must be finite")
    rho, a, b = theta.rho0, theta.a0, theta.b0
    x = np.empty(eps.size + 1)
    prev = float(x0)
    x[0] = prev
    for k, e in enumerate(eps.tolist(), start=1):
        prev = rho * prev + math.sqrt(a + b * prev * prev) * e
        x[k] = prev
    return Trajectory(x, seed, theta)


def simulate(theta: ModelParams, n: int, seed: int) -> Trajectory:
    if int(n) < 1:
        raise ParameterDomainError("n", f"path length must be >= 1, got {n}")
    eps = innovation_stream(theta.innovation, seed, n)
    return simulate_with_innovations(theta, eps, seed=int(seed) & MASK64)


def simulate_batch(theta: ModelParams, n: int, seeds) -> np.ndarray:
    """Rows are bitwise equal to simulate(theta, n, seed).x for each seed."""
    seeds = [int(s) for s in seeds]
    if int(n) < 1:
        raise ParameterDomainError("n", f"path length must be >= 1, got {n}")
    if not seeds:
        return np.empty((0, int(n) + 1))
    eps = np.stack([innovation_stream(theta.innovation, s, n) for s in seeds], axis=1)
    rho, a, b = theta.rho0, theta.a0, theta.b0
    paths = np.zeros((int(n) + 1, len(seeds)))
    for k in range(1, int(n) + 1):
        prev = paths[k - 1]
        paths[k] = rho * prev + np.sqrt(a + b * prev * prev) * eps[k - 1]
    return np.ascontiguousarray(paths.T)


def transition_density(theta: ModelParams, x, u):
    """q_theta(x, u) = f((u - rho0 x) / sigma(x)) / sigma(x), broadcast over x and u."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    s = theta.sigma(x)
    dens = theta.innovation.pdf((u - theta.rho0 * x) / s) / s
    if not np.all(np.isfinite(dens)):
        raise NumericalError(f"non-finite transition density for {theta.theta_id}")
    return dens


def stationary_second_moment(theta: ModelParams, n: int, seed: int, *, burn_in: int = 0) -> tuple[float, float]:
    """Long-path mean of X_k^2 and its batch-means standard error."""
    traj = simulate(theta, int(n) + int(burn_in), seed)
    sq = np.square(traj.x[int(burn_in) + 1:])
    mean = math.fsum(sq.tolist()) / sq.size
    se = math.sqrt(batch_means_variance(sq) / sq.size)
    return mean, se


# ---------------------------------------------------------------------------
# Drift / minorization audit
# ---------------------------------------------------------------------------
@dataclass
class DriftReport:
    iota: float
    varrho: float
    s: float | None
    varsigma: float | None
    minorization_mass: float
    verdict: dict

    @property
    def passed(self) -> bool:
        return bool(self.verdict.get("overall", False))

    def to_dict(self) -> dict:
        return {
            "iota": self.iota,
            "varrho": self.varrho,
            "s": self.s,
            "varsigma": self.varsigma,
            "minorization_mass": self.minorization_mass,
            "verdict": dict(self.verdict),
        }


def _quad(func, lo: float, hi: float, *, tol: float, points=None) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        res = integrate.quad(func, lo, hi, epsabs=tol, epsrel=1e-10, limit=500, points=points, full_output=1)
    value, abserr = res[0], res[1]
    if not math.isfinite(value) or (len(res) > 3 and abserr > max(tol, 1e-9 * abs(value))):
        message = res[3] if len(res) > 3 else "non-finite result"
        raise NumericalError(f"quadrature on [{lo:g}, {hi:g}] did not converge: {message}")
    return value


def _ladder_points(hi: float) -> list[float]:
    pts, edge = [], 1.0
    while edge < hi:
        pts.append(edge)
        edge *= 10.0
    return pts


def abs_moment_integral(law: InnovationLaw, p: float, *, tol: float = QUAD_TOL) -> float:
    """Integral of (1 + |y|)^p f(y) dy over the truncated support [-T, T]."""
    law.check_moment(p)
    t = law.tail_cutoff(p)
    log.debug("moment integral: p=%g law=%s truncation T=%.4g", p, law.kind, t)
    half = _quad(lambda y: (1.0 + y) ** p * float(law.pdf(y)), 0.0, t, tol=0.5 * tol, points=_ladder_points(t))
    return 2.0 * half


def _iota(box: ParamBox, p: float, tol: float) -> float:
    base = (box.rho_bar + math.sqrt(box.M_b)) ** p
    return base * abs_moment_integral(box.innovation, p, tol=tol)


def check_iota(box: ParamBox, *, tol: float = QUAD_TOL) -> float:
    iota = _iota(box, box.p, tol)
    log.info("iota = %.6g (%s)", iota, "pass" if iota < 1.0 else "fail")
    return iota


def drift_ratio(theta: ModelParams, x: float, p: float, *, tol: float = QUAD_TOL) -> tuple[float, float]:
    """(Q_theta V(x), Q_theta V(x) / V(x)) for V(x) = (1 + |x|)^p."""
    law = theta.innovation
    t = law.tail_cutoff(p)
    centre = theta.rho0 * x
    s = float(theta.sigma(x))
    kink = -centre / s
    points = [kink] if -t < kink < t else None
    qv = _quad(lambda y: (1.0 + abs(centre + s * y)) ** p * float(law.pdf(y)), -t, t, tol=tol, points=points)
    return qv, qv / (1.0 + abs(x)) ** p


def minorization_mass(box: ParamBox, s: float) -> float:
    """Mass over S = [-s, s] of m(du) = m_a^{-1} delta(u) du, delta(u) = inf_{x in S, theta} f(...)."""
    u = np.linspace(-s, s, MINORIZATION_U_POINTS)
    xs = np.linspace(-s, s, MINORIZATION_X_POINTS)
    delta = np.full(u.shape, np.inf)
    for theta in box.grid:
        sig = theta.sigma(xs)[:, None]
        dens = theta.innovation.pdf((u[None, :] - theta.rho0 * xs[:, None]) / sig)
        delta = np.minimum(delta, dens.min(axis=0))
    return float(integrate.trapezoid(delta, u) / box.m_a)


def check_drift(box: ParamBox, p: float | None = None, s_grid=DEFAULT_S_GRID, *, tol: float = QUAD_TOL) -> DriftReport:
    p = float(box.p if p is None else p)
    iota = _iota(box, p, tol)
    varrho = 0.5 * (iota + 1.0)
    verdict = {"iota": iota < 1.0, "drift": False, "varsigma": False, "minorization": False, "overall": False}
    if iota >= 1.0:
        log.info("drift check skipped: iota = %.6g >= 1", iota)
        return DriftReport(iota, varrho, None, None, 0.0, verdict)
    if not box.grid:
        raise ParameterDomainError("grid", "box grid is empty")

    xs = np.array(sorted({sign * v for v in DRIFT_X_LADDER for sign in (-1.0, 1.0)}))
    qv = np.empty((len(box.grid), xs.size))
    ratio = np.empty_like(qv)
    for i, theta in enumerate(box.grid):
        for j, x in enumerate(xs):
            qv[i, j], ratio[i, j] = drift_ratio(theta, float(x), p, tol=tol)

    chosen = None
    for s in sorted(float(v) for v in s_grid):
        outer = np.abs(xs) > s
        if not outer.any():
            continue
        worst = float(ratio[:, outer].max())
        log.debug("s=%g: sup QV/V beyond S = %.6g (varrho=%.6g)", s, worst, varrho)
        if worst <= varrho:
            chosen = s
            break
    if chosen is None:
        log.info("drift check failed: no small-set radius in %s reaches varrho=%.6g", list(s_grid), varrho)
        return DriftReport(iota, varrho, None, None, 0.0, verdict)

    varsigma = float(qv[:, np.abs(xs) <= chosen].max())
    mass = minorization_mass(box, chosen)
    verdict.update(
        drift=True,
        varsigma=math.isfinite(varsigma),
        minorization=mass > 0.0,
    )
    verdict["overall"] = all(verdict[k] for k in ("iota", "drift", "varsigma", "minorization"))
    log.info(
        "drift check %s: iota=%.4g varrho=%.4g s=%g varsigma=%.4g mass=%.4g",
        "passed" if verdict["overall"] else "failed", iota, varrho, chosen, varsigma, mass,
    )
    return DriftReport(iota, varrho, chosen, varsigma, mass, verdict)
