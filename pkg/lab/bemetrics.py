"""Monte Carlo Berry-Esseen measurements.

Every replication r simulates a fresh path of length n from X_0 = 0 with the stream key
derive_stream_seed(master_seed, r). Replications are grouped into fixed chunks by index and
mapped over a thread pool; results are reassembled in index order and sorted, so every
number produced here is independent of the thread count.
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import ndtr
from scipy.stats import kstwo

from lab import mest, spectral, theory
from lab.chain import ModelParams, ParamBox, Trajectory, derive_stream_seed, simulate, simulate_batch
from lab.errors import DataQualityError, DegenerateDataError, MomentOrderError, ParameterDomainError
from lab.longrun import batch_means_variance

log = logging.getLogger("BE")

ESTIMATORS = ("rho", "b")
CHUNK_SIZE = 250
FALLBACK_TAG = 0x5EED_FA11_BAC4_0001
SCALE_TAG = 0x5EED_5CA1_E000_0002
MAX_FALLBACK_SHARE = 0.01
RHO_FOC_THRESHOLD = 1e-9
SCALE_PATH_MIN = 100_000
# D_n below the FLOOR_LEVEL quantile of the exact-normal Kolmogorov statistic is Monte Carlo noise
FLOOR_LEVEL = 0.99


@dataclass(frozen=True)
class StandardizedSample:
    theta_id: str
    n: int
    values: np.ndarray = field(repr=False)
    R: int
    master_seed: int
    kind: str = ""
    scale: float = 1.0
    fallbacks: int = 0
    bound_hits: int = 0
    rep_index: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        raw = np.asarray(self.values, dtype=float).reshape(-1)
        order = np.argsort(raw, kind="stable")
        reps = order if self.rep_index is None else np.asarray(self.rep_index, dtype=np.int64).reshape(-1)[order]
        arr = raw[order]
        for a in (arr, reps):
            a.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "rep_index", reps)
        object.__setattr__(self, "R", int(arr.size))

    @classmethod
    def from_values(cls, values, theta_id: str = "synthetic", n: int = 0, master_seed: int = 0) -> "StandardizedSample":
        return cls(theta_id, int(n), values, 0, int(master_seed))


@dataclass(frozen=True)
class BECurve:
    points: tuple
    theta_scope: str
    estimator: str
    R: int
    slope: float = math.nan
    intercept: float = math.nan
    correction: str = "none"

    def __post_init__(self):
        if self.correction not in ("none", "log"):
            raise ParameterDomainError("correction", f"expected none|log, got {self.correction!r}")
        pts = tuple(sorted((int(n), float(d)) for n, d in self.points))
        for n, d in pts:
            if not 0.0 <= d <= 1.0:
                raise ParameterDomainError("D", f"distance {d!r} at n={n} outside [0, 1]")
        object.__setattr__(self, "points", pts)

    @property
    def ns(self) -> np.ndarray:
        return np.array([n for n, _ in self.points], dtype=float)

    @property
    def distances(self) -> np.ndarray:
        return np.array([d for _, d in self.points], dtype=float)

    def stability_ratio(self) -> float:
        """max/min of sqrt(n) D_n over the ladder."""
        scaled = np.sqrt(self.ns) * self.distances
        if scaled.size == 0 or scaled.min() <= 0.0:
            return math.inf
        return float(scaled.max() / scaled.min())

    def to_rows(self) -> list[dict]:
        return [
            {
                "scope": self.theta_scope,
                "estimator": self.estimator,
                "n": n,
                "R": self.R,
                "D": d,
                "slope": self.slope,
                "intercept": self.intercept,
                "correction": self.correction,
            }
            for n, d in self.points
        ]


@dataclass(frozen=True)
class ConditionAudit:
    v3_freq: float
    v6_freq: float
    r_n_used: float
    d_used: float
    estimator: str = ""
    theta_id: str = ""
    n: int = 0
    R: int = 0
    v3_freq_log_rate: float = math.nan
    term_medians: dict = field(default_factory=dict)
    first_order_scale: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "theta_id": self.theta_id,
            "estimator": self.estimator,
            "n": self.n,
            "R": self.R,
            "v3_freq": self.v3_freq,
            "v6_freq": self.v6_freq,
            "r_n_used": self.r_n_used,
            "d_used": self.d_used,
            "v3_freq_log_rate": self.v3_freq_log_rate,
            "term_medians": dict(self.term_medians),
            "first_order_scale": dict(self.first_order_scale),
        }


@dataclass(frozen=True)
class SupDistance:
    value: float
    argmax: str
    per_theta: dict

    def __float__(self) -> float:
        return self.value


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------
def gaussian_cdf(u):
    """Standard normal CDF through erfc; scalar in, float out."""
    out = ndtr(u)
    return float(out) if np.ndim(out) == 0 else out


def kolmogorov_distance(sample) -> float:
    """sup_u |F_R(u) - Gamma(u)| evaluated exactly at the jumps of the empirical CDF."""
    values = sample.values if isinstance(sample, StandardizedSample) else np.sort(np.asarray(sample, dtype=float).reshape(-1))
    R = values.size
    if R < 1:
        raise ParameterDomainError("R", "Kolmogorov distance of an empty sample")
    g = ndtr(values)
    i = np.arange(1, R + 1, dtype=float)
    upper = np.abs(i / R - g)
    lower = np.abs((i - 1.0) / R - g)
    return float(max(upper.max(), lower.max()))


def kolmogorov_floor(R: int, level: float | None = None) -> float:
    """Distance an exactly normal sample of size R shows anyway: the mean of the one-sample
    Kolmogorov statistic, or its `level` quantile."""
    R = int(R)
    if R < 1:
        raise ParameterDomainError("R", f"replication count must be >= 1, got {R}")
    if level is None:
        return float(kstwo.mean(R))
    if not 0.0 < level < 1.0:
        raise ParameterDomainError("level", f"must lie in (0, 1), got {level}")
    return float(kstwo.ppf(level, R))


def resolved_points(curve: "BECurve", level: float = FLOOR_LEVEL) -> tuple:
    """Points of the curve whose D_n rises above the `level` noise quantile for its R."""
    if curve.R < 1:
        return tuple(curve.points)
    floor = kolmogorov_floor(curve.R, level)
    return tuple((n, d) for n, d in curve.points if d > floor)


# ---------------------------------------------------------------------------
# Replication engine
# ---------------------------------------------------------------------------
def _chunks(R: int) -> list[range]:
    return [range(start, min(start + CHUNK_SIZE, R)) for start in range(0, R, CHUNK_SIZE)]


def _run_chunk(theta: ModelParams, n: int, master_seed: int, per_path: Callable, idx: range) -> tuple[list, int]:
    seeds = [derive_stream_seed(master_seed, i) for i in idx]
    paths = simulate_batch(theta, n, seeds)
    out = []
    fallbacks = 0
    for i, seed, row in zip(idx, seeds, paths):
        try:
            out.append(per_path(Trajectory(row, seed, theta)))
        except DegenerateDataError as e:
            fallbacks += 1
            retry_seed = derive_stream_seed(int(master_seed) ^ FALLBACK_TAG, i)
            log.debug("replication %d degenerate (%s); resampling with tagged seed", i, e)
            try:
                out.append(per_path(simulate(theta, n, retry_seed)))
            except DegenerateDataError as e2:
                raise DataQualityError(f"replication {i} degenerate after resampling: {e2}") from e2
    return out, fallbacks


def replicate(
    theta: ModelParams,
    n: int,
    R: int,
    master_seed: int,
    per_path: Callable,
    *,
    threads: int | None = None,
) -> tuple[list, int]:
    """Apply per_path to R replications; returns (results in replication order, fallback count)."""
    n, R = int(n), int(R)
    if n < 1:
        raise ParameterDomainError("n", f"path length must be >= 1, got {n}")
    if R < 1:
        raise ParameterDomainError("R", f"replication count must be >= 1, got {R}")
    workers = max(1, int(threads or os.cpu_count() or 1))
    chunks = _chunks(R)
    if workers == 1 or len(chunks) == 1:
        parts = [_run_chunk(theta, n, master_seed, per_path, idx) for idx in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda idx: _run_chunk(theta, n, master_seed, per_path, idx), chunks))
    results = [r for part, _ in parts for r in part]
    fallbacks = sum(f for _, f in parts)
    if fallbacks:
        log.info("%s n=%d: %d of %d replications resampled", theta.theta_id, n, fallbacks, R)
    if fallbacks > MAX_FALLBACK_SHARE * R:
        raise DataQualityError(f"{fallbacks} of {R} replications were degenerate (> {MAX_FALLBACK_SHARE:.0%})")
    return results, fallbacks


def _estimator(kind: str, b_domain: tuple[float, float]) -> Callable:
    """per_path returning (alpha_hat, stopped at a bound of the search domain)."""
    if kind == "rho":
        return lambda traj: (mest.rho_hat(traj), False)
    if kind == "b":
        lo, hi = b_domain

        def estimate_b(traj):
            fit = mest.b_hat(traj, mest.rho_hat(traj), mest.tau_hat_sq(traj), b_domain)
            return fit.alpha_hat, not lo < fit.closed_form < hi

        return estimate_b
    raise ParameterDomainError("estimator", f"expected one of {ESTIMATORS}, got {kind!r}")


def _true_value(theta: ModelParams, kind: str) -> float:
    return theta.rho0 if kind == "rho" else theta.b0


# ---------------------------------------------------------------------------
# Standardized samples
# ---------------------------------------------------------------------------
def standardized_estimator_sample(
    theta: ModelParams,
    n: int,
    R: int,
    master_seed: int,
    estimator: str,
    *,
    b_domain: tuple[float, float] = mest.DEFAULT_B_DOMAIN,
    scale: float | None = None,
    threads: int | None = None,
) -> StandardizedSample:
    """Sorted sqrt(n) (alpha_hat - alpha0) / scale.

    For rho the default scale is tau(theta) = sigma1 / m. For b no closed-form scale exists and
    the default is the sample standard deviation of sqrt(n) (b_hat - b0) itself.
    """
    estimate = _estimator(estimator, b_domain)
    alpha0 = _true_value(theta, estimator)
    fits, fallbacks = replicate(theta, n, R, master_seed, estimate, threads=threads)
    estimates = np.array([alpha for alpha, _ in fits], dtype=float)
    bound_hits = sum(1 for _, at_bound in fits if at_bound)
    if bound_hits:
        log.warning("%s %s n=%d: %d of %d replications stopped at a bound of %s",
                    theta.theta_id, estimator, n, bound_hits, R, tuple(b_domain))
    raw = math.sqrt(n) * (estimates - alpha0)
    if scale is None:
        if estimator == "rho":
            scale = theory.tau(theta)
        else:
            scale = float(np.std(raw, ddof=1)) if raw.size > 1 else 1.0
    if not scale > 0.0:
        raise DegenerateDataError(f"standardizing scale is {scale!r} for {estimator} at n={n}")
    return StandardizedSample(
        theta.theta_id, int(n), raw / scale, int(R), int(master_seed), estimator, float(scale), fallbacks, bound_hits
    )


def additive_scale(theta: ModelParams, functional: str, master_seed: int, n: int = 0) -> float:
    """sigma(theta) for the named centered functional."""
    if functional == "Fprime":
        return math.sqrt(theory.sigma1_sq(theta))
    if functional == "Xsq_centered":
        return 0.5 * math.sqrt(theory.sigma2_sq(theta))
    if functional == "Fsecond_centered":
        length = max(SCALE_PATH_MIN, 50 * int(n))
        traj = simulate(theta, length, derive_stream_seed(int(master_seed) ^ SCALE_TAG, 0))
        xi = spectral.fsecond_centered_functional(theta)
        return math.sqrt(batch_means_variance(xi(traj.prev, traj.curr)))
    raise ParameterDomainError("functional", f"unknown functional {functional!r}")


def standardized_additive_sample(
    theta: ModelParams,
    n: int,
    R: int,
    master_seed: int,
    functional,
    *,
    scale: float | None = None,
    threads: int | None = None,
) -> StandardizedSample:
    """Sorted S_n / (sigma sqrt(n)) with S_n = sum_k xi(X_{k-1}, X_k).

    `functional` is a name from spectral.FUNCTIONALS or a callable xi(x, y); a callable
    needs an explicit scale.
    """
    if callable(functional):
        xi, name = functional, getattr(functional, "__name__", "custom")
        if scale is None:
            raise ParameterDomainError("scale", "a custom functional needs an explicit scale")
    else:
        if functional not in spectral.FUNCTIONALS:
            raise ParameterDomainError("functional", f"unknown functional {functional!r}")
        xi, name = spectral.FUNCTIONALS[functional](theta), functional
        if scale is None:
            scale = additive_scale(theta, functional, master_seed, n)
    if not scale > 0.0:
        raise DegenerateDataError(f"standardizing scale is {scale!r} for {name}")

    def partial_sum(traj: Trajectory) -> float:
        terms = np.broadcast_to(np.asarray(xi(traj.prev, traj.curr), dtype=float), traj.prev.shape)
        return math.fsum(terms.tolist())

    sums, fallbacks = replicate(theta, n, R, master_seed, partial_sum, threads=threads)
    values = np.asarray(sums, dtype=float) / (scale * math.sqrt(n))
    return StandardizedSample(theta.theta_id, int(n), values, int(R), int(master_seed), name, float(scale), fallbacks)


def _sample(theta, n, R, master_seed, kind, *, scale=None, threads=None, b_domain=mest.DEFAULT_B_DOMAIN):
    if kind in ESTIMATORS:
        return standardized_estimator_sample(
            theta, n, R, master_seed, kind, b_domain=b_domain, scale=scale, threads=threads
        )
    return standardized_additive_sample(theta, n, R, master_seed, kind, scale=scale, threads=threads)


def _inside_b_domain(thetas, estimator: str, b_domain: tuple[float, float]) -> list:
    """For b, drop parameters whose b0 is not interior to the search domain."""
    if estimator != "b":
        return list(thetas)
    lo, hi = b_domain
    kept = [t for t in thetas if lo < t.b0 < hi]
    for t in thetas:
        if not lo < t.b0 < hi:
            log.warning("%s: b0 outside the open b domain %s, skipped", t.theta_id, tuple(b_domain))
    if not kept:
        raise ParameterDomainError("b_domain", f"no grid point has b0 inside {tuple(b_domain)}")
    return kept


def uniform_sup_distance(
    box: ParamBox,
    n: int,
    R: int,
    master_seed: int,
    estimator: str,
    *,
    threads: int | None = None,
    b_domain: tuple[float, float] = mest.DEFAULT_B_DOMAIN,
) -> SupDistance:
    """max over the box grid of the Kolmogorov distance, with the maximizing theta."""
    if not box.grid:
        raise ParameterDomainError("grid", "parameter grid is empty")
    per_theta = {}
    for theta in _inside_b_domain(box.grid, estimator, b_domain):
        sample = _sample(theta, n, R, master_seed, estimator, threads=threads, b_domain=b_domain)
        per_theta[theta.theta_id] = kolmogorov_distance(sample)
    argmax = max(per_theta, key=per_theta.get)
    log.info("n=%d %s: sup D=%.4f at %s", n, estimator, per_theta[argmax], argmax)
    return SupDistance(per_theta[argmax], argmax, per_theta)


# ---------------------------------------------------------------------------
# Rate curves
# ---------------------------------------------------------------------------
def rate_fit(curve: BECurve) -> tuple[float, float]:
    """OLS of log D_n on log n; with correction=log the response is log(D_n sqrt(n) / log n)."""
    if len(curve.points) < 3:
        raise ParameterDomainError("points", f"rate fit needs >= 3 points, got {len(curve.points)}")
    ns, ds = curve.ns, curve.distances
    if np.any(ds <= 0.0):
        n0 = int(ns[np.argmax(ds <= 0.0)])
        raise DegenerateDataError(f"D_n = 0 at n={n0}: the fit is degenerate, increase R")
    x = np.log(ns)
    if curve.correction == "log":
        if np.any(ns <= 1.0):
            raise ParameterDomainError("n", "log correction needs n > 1")
        y = np.log(ds * np.sqrt(ns) / np.log(ns))
    else:
        y = np.log(ds)
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


def _fitted(curve: BECurve) -> BECurve:
    try:
        slope, intercept = rate_fit(curve)
    except (DegenerateDataError, ParameterDomainError) as e:
        log.warning("%s/%s: no rate fit (%s)", curve.theta_scope, curve.estimator, e)
        return curve
    return replace(curve, slope=slope, intercept=intercept)


def be_curve(
    target,
    n_ladder,
    R: int,
    master_seed: int,
    estimator: str,
    *,
    threads: int | None = None,
    b_domain: tuple[float, float] = mest.DEFAULT_B_DOMAIN,
    on_sample: Callable[[StandardizedSample], None] | None = None,
) -> list[BECurve]:
    """One fitted curve per theta plus, for a ParamBox, the grid-sup curve (scope "sup").

    For b the scale is calibrated once per theta as the sample sd at the largest n and reused
    down the ladder; those curves carry correction=log.
    """
    if isinstance(target, ParamBox):
        if not target.grid:
            raise ParameterDomainError("grid", "parameter grid is empty")
        thetas = _inside_b_domain(target.grid, estimator, b_domain)
    else:
        thetas = [target]
    ladder = sorted({int(n) for n in n_ladder})
    if not ladder:
        raise ParameterDomainError("n_ladder", "ladder is empty")
    correction = "log" if estimator == "b" else "none"

    curves = []
    by_n: dict[int, list[float]] = {n: [] for n in ladder}
    for theta in thetas:
        scale = None
        points = []
        for n in reversed(ladder):
            sample = _sample(theta, n, R, master_seed, estimator, scale=scale, threads=threads, b_domain=b_domain)
            if estimator == "b" and scale is None:
                scale = sample.scale
                log.debug("%s: self-normalized b scale %.6g from n=%d", theta.theta_id, scale, n)
            if on_sample is not None:
                on_sample(sample)
            d = kolmogorov_distance(sample)
            points.append((n, d))
            by_n[n].append(d)
            log.debug("%s %s n=%d: D=%.5f", theta.theta_id, estimator, n, d)
        curve = _fitted(BECurve(tuple(points), theta.theta_id, estimator, int(R), correction=correction))
        log.info("%s %s: slope %.3f", theta.theta_id, estimator, curve.slope)
        curves.append(curve)
    if len(thetas) > 1:
        sup = BECurve(tuple((n, max(ds)) for n, ds in by_n.items()), "sup", estimator, int(R), correction=correction)
        curves.append(_fitted(sup))
    return curves


# ---------------------------------------------------------------------------
# Condition audits
# ---------------------------------------------------------------------------
def audit_conditions(
    theta: ModelParams,
    n: int,
    R: int,
    master_seed: int,
    estimator: str,
    r_n: float | None = None,
    d: float = 0.25,
    *,
    b_domain: tuple[float, float] = mest.DEFAULT_B_DOMAIN,
    threads: int | None = None,
) -> ConditionAudit:
    """Frequencies of |M'_n(alpha_hat)| >= r_n and |alpha_hat - alpha0| >= d.

    M'_n is the criterion at the true nuisance values. For rho r_n defaults to the first-order
    threshold 1e-9. For b, n M'_n(b_hat) stays of order one: the plug-in terms Delta_1n..Delta_3n
    do not vanish at scale n. The default threshold is therefore C(theta) log(n) / n with
    C = theory.b_first_order_scale(theta).total, and the frequency at the bare log(n) / n is
    reported alongside as v3_freq_log_rate together with the median size of each term at scale n.
    """
    if estimator not in ESTIMATORS:
        raise ParameterDomainError("estimator", f"expected one of {ESTIMATORS}, got {estimator!r}")
    n = int(n)
    if n < 2:
        raise ParameterDomainError("n", f"audit needs n >= 2, got {n}")
    scale = None
    if estimator == "b":
        try:
            scale = theory.b_first_order_scale(theta)
        except MomentOrderError:
            if r_n is None:
                raise
            log.warning("%s: E[X^8] is infinite, no first-order scale for b", theta.theta_id)
    if r_n is None or r_n <= 0.0:
        if estimator == "b":
            if r_n is not None:
                raise ParameterDomainError("r_n", f"must be > 0 for b, got {r_n}")
            r_n = scale.total * math.log(n) / n
        else:
            r_n = RHO_FOC_THRESHOLD
    if not d > 0.0:
        raise ParameterDomainError("d", f"must be > 0, got {d}")
    alpha0 = _true_value(theta, estimator)

    def residual(traj: Trajectory) -> tuple:
        rho = mest.rho_hat(traj)
        if estimator == "rho":
            return rho, abs(mest.rho_m_prime(traj, rho)), None
        tausq = mest.tau_hat_sq(traj)
        b = mest.b_hat(traj, rho, tausq, b_domain).alpha_hat
        parts = mest.v3_residual(traj, rho, tausq, b)
        return b, parts.abs_m_prime, parts

    fits, _ = replicate(theta, n, R, master_seed, residual, threads=threads)
    alphas = np.array([a for a, _, _ in fits])
    resid = np.array([r for _, r, _ in fits])
    medians = {}
    log_rate_freq = math.nan
    if estimator == "b":
        log_rate_freq = float(np.mean(resid >= math.log(n) / n))
        for term in ("m_prime", "a_n", "delta1", "delta2", "delta3"):
            medians[term] = float(np.median([abs(getattr(p, term)) for _, _, p in fits]) * n)
    audit = ConditionAudit(
        v3_freq=float(np.mean(resid >= r_n)),
        v6_freq=float(np.mean(np.abs(alphas - alpha0) >= d)),
        r_n_used=float(r_n),
        d_used=float(d),
        estimator=estimator,
        theta_id=theta.theta_id,
        n=n,
        R=int(R),
        v3_freq_log_rate=log_rate_freq,
        term_medians=medians,
        first_order_scale=scale.to_dict() if scale is not None else {},
    )
    log.info("%s %s n=%d: v3 %.4f, v6 %.4f", theta.theta_id, estimator, n, audit.v3_freq, audit.v6_freq)
    if medians:
        log.debug("%s b n=%d: median n|term| %s", theta.theta_id, n, medians)
    return audit
