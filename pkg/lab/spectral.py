"""Discretized Fourier kernels Q_theta(t)(x, dy) = exp(i t xi(x, y)) Q_theta(x, dy).

The kernel is restricted to a uniform grid on [-L, L] with trapezoid weights. Rows are
renormalized at t = 0 so that the truncated operator is stochastic and lambda(0) = 1; the
same row scaling is reused for every t. The asymptotic variance of S_n = sum xi(X_{k-1}, X_k)
is read off as -lambda''(0).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from lab import theory
from lab.chain import ModelParams, transition_density
from lab.errors import GapFailureError, NumericalError, ParameterDomainError

log = logging.getLogger("Spectral")

DEFAULT_NODES = 401
TRUNCATION_WIDTHS = 12.0
POWER_TOL = 1e-12
POWER_MAX_ITER = 20000
BASE_STEP = 1e-2
DOUBLING_AGREEMENT = 0.02
RESIDUAL_TOL = 1e-6


@dataclass(frozen=True)
class GridSpec:
    L: float
    N: int
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @classmethod
    def uniform(cls, L: float, N: int) -> "GridSpec":
        N = int(N)
        if N < 3 or N % 2 == 0:
            raise ParameterDomainError("N", f"node count must be odd and >= 3, got {N}")
        if not L > 0.0:
            raise ParameterDomainError("L", f"truncation half-width must be positive, got {L}")
        nodes = np.linspace(-L, L, N)
        h = 2.0 * L / (N - 1)
        weights = np.full(N, h)
        weights[0] = weights[-1] = 0.5 * h
        return cls(float(L), N, nodes, weights)

    @classmethod
    def for_theta(cls, theta: ModelParams, N: int = DEFAULT_NODES, L: float | None = None) -> "GridSpec":
        if L is None:
            L = TRUNCATION_WIDTHS * math.sqrt(0.5 * theory.m_of_theta(theta))
        return cls.uniform(L, N)

    def doubled(self) -> "GridSpec":
        """Same spacing on twice the half-width."""
        return GridSpec.uniform(2.0 * self.L, 2 * self.N - 1)

    def to_dict(self) -> dict:
        return {"L": self.L, "N": self.N}


@dataclass(frozen=True)
class FourierOperator:
    matrix: np.ndarray = field(repr=False)
    t: float
    row_renormalized: bool
    grid: GridSpec


@dataclass(frozen=True)
class PowerIterationResult:
    value: complex
    vector: np.ndarray = field(repr=False)
    iterations: int
    residual: float


@dataclass(frozen=True)
class SpectralReport:
    lambda0: complex
    lambda_prime0: complex
    sigma_sq: float
    t_step: float
    grid: GridSpec
    converged: bool

    @property
    def sigma_sq_positive(self) -> bool:
        return self.sigma_sq > 0.0

    def to_dict(self) -> dict:
        return {
            "lambda0": {"re": self.lambda0.real, "im": self.lambda0.imag},
            "lambda_prime0": {"re": self.lambda_prime0.real, "im": self.lambda_prime0.imag},
            "sigma_sq": self.sigma_sq,
            "t_step": self.t_step,
            "grid": self.grid.to_dict(),
            "converged": self.converged,
            "sigma_sq_positive": self.sigma_sq_positive,
        }


# ---------------------------------------------------------------------------
# Functionals xi(x, y)
# ---------------------------------------------------------------------------
def fprime_functional(theta: ModelParams) -> Callable:
    """F'(rho0, x, y) = -2 x (y - rho0 x); centered under pi_theta."""
    rho = theta.rho0
    return lambda x, y: -2.0 * x * (y - rho * x)


def fsecond_centered_functional(theta: ModelParams) -> Callable:
    """F''(rho0, x, y) - m(theta) = 2 x^2 - m(theta)."""
    m = theory.m_of_theta(theta)
    return lambda x, y: 2.0 * np.square(x) - m


def xsq_centered_functional(theta: ModelParams) -> Callable:
    """X_k^2 - tau0^2."""
    tau0 = 0.5 * theory.m_of_theta(theta)
    return lambda x, y: np.square(y) - tau0


FUNCTIONALS = {
    "Fprime": fprime_functional,
    "Fsecond_centered": fsecond_centered_functional,
    "Xsq_centered": xsq_centered_functional,
}


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------
def _base_kernel(theta: ModelParams, grid: GridSpec, renormalize: bool) -> np.ndarray:
    x = grid.nodes
    kernel = transition_density(theta, x[:, None], x[None, :]) * grid.weights[None, :]
    if renormalize:
        mass = kernel.sum(axis=1)
        if np.any(mass <= 0.0) or not np.all(np.isfinite(mass)):
            raise NumericalError(f"kernel row mass vanished on the grid for {theta.theta_id}")
        kernel = kernel / mass[:, None]
    return kernel


def build_operator(
    theta: ModelParams,
    xi: Callable,
    t: float,
    grid: GridSpec,
    *,
    renormalize: bool = True,
) -> FourierOperator:
    kernel = _base_kernel(theta, grid, renormalize)
    x = grid.nodes
    phase_arg = np.broadcast_to(np.asarray(xi(x[:, None], x[None, :]), dtype=float), kernel.shape)
    if not np.all(np.isfinite(phase_arg)):
        raise NumericalError("functional is not finite on the grid")
    matrix = kernel * np.exp(1j * float(t) * phase_arg)
    return FourierOperator(matrix, float(t), renormalize, grid)


def power_iteration(
    matrix: np.ndarray,
    *,
    tol: float = POWER_TOL,
    max_iter: int = POWER_MAX_ITER,
    v0: np.ndarray | None = None,
) -> PowerIterationResult:
    """Dominant eigenpair by power iteration; stops when successive Rayleigh quotients differ < tol."""
    a = np.asarray(matrix, dtype=complex)
    v = np.ones(a.shape[0], dtype=complex) if v0 is None else np.asarray(v0, dtype=complex).copy()
    v /= np.linalg.norm(v)
    previous = None
    for it in range(1, int(max_iter) + 1):
        w = a @ v
        lam = complex(np.vdot(v, w))
        norm = np.linalg.norm(w)
        if norm == 0.0:
            raise GapFailureError("iterate collapsed to zero")
        v = w / norm
        if previous is not None and abs(lam - previous) < tol:
            residual = float(np.linalg.norm(a @ v - lam * v))
            if residual > RESIDUAL_TOL * max(1.0, abs(lam)):
                raise GapFailureError(f"Rayleigh quotient settled at {lam} but the residual is {residual:.3e}")
            return PowerIterationResult(lam, v, it, residual)
        previous = lam
    raise GapFailureError(f"power iteration did not converge in {max_iter} iterations")


def dominant_eigenvalue(op: FourierOperator, tol: float = POWER_TOL, *, max_iter: int = POWER_MAX_ITER) -> complex:
    try:
        result = power_iteration(op.matrix, tol=tol, max_iter=max_iter)
    except GapFailureError as e:
        raise GapFailureError(f"t={op.t:g}: {e}; t is likely outside the perturbation regime") from e
    log.debug("t=%g: lambda=%s after %d iterations (residual %.2e)", op.t, result.value, result.iterations, result.residual)
    return result.value


def characteristic_function(op: FourierOperator, n: int, start: float = 0.0) -> complex:
    """mu(K(t)^n 1) with mu the point mass at the grid node nearest `start`."""
    i0 = int(np.argmin(np.abs(op.grid.nodes - start)))
    v = np.ones(op.grid.N, dtype=complex)
    for _ in range(int(n)):
        v = op.matrix @ v
    return complex(v[i0])


def _stencil(theta, xi, grid, h, tol, max_iter) -> tuple[complex, complex, float]:
    lam = {
        k: dominant_eigenvalue(build_operator(theta, xi, k * h, grid), tol, max_iter=max_iter)
        for k in (-2, -1, 0, 1, 2)
    }
    d1 = (lam[-2] - 8.0 * lam[-1] + 8.0 * lam[1] - lam[2]) / (12.0 * h)
    d2 = (-lam[2] + 16.0 * lam[1] - 30.0 * lam[0] + 16.0 * lam[-1] - lam[-2]) / (12.0 * h * h)
    return lam[0], d1, -d2.real


def spectral_report(
    theta: ModelParams,
    xi: Callable,
    grid: GridSpec | None = None,
    t_step: float | None = None,
    *,
    tol: float = POWER_TOL,
    max_iter: int = POWER_MAX_ITER,
) -> SpectralReport:
    grid = grid or GridSpec.for_theta(theta)
    if t_step is None:
        h = BASE_STEP
        _, _, sigma_sq = _stencil(theta, xi, grid, h, tol, max_iter)
        if sigma_sq > 1e-12:
            h = BASE_STEP / math.sqrt(sigma_sq)
    else:
        h = float(t_step)
    lam0, d1, sigma_sq = _stencil(theta, xi, grid, h, tol, max_iter)

    _, _, sigma_fine = _stencil(theta, xi, grid.doubled(), h, tol, max_iter)
    if sigma_sq != 0.0:
        converged = abs(sigma_fine - sigma_sq) / abs(sigma_sq) < DOUBLING_AGREEMENT
    else:
        converged = sigma_fine == 0.0
    if sigma_sq < 0.0:
        log.warning("%s: lambda''(0) gives sigma^2=%.6g < 0; the grid or step does not resolve the curvature",
                    theta.theta_id, sigma_sq)
    if not converged:
        log.info("%s: grid doubling moved sigma^2 from %.6g to %.6g", theta.theta_id, sigma_sq, sigma_fine)
    log.info(
        "%s: lambda(0)=%.12g lambda'(0)=%.3e sigma^2=%.6g (h=%.3g, N=%d, L=%.3g)",
        theta.theta_id, lam0.real, abs(d1), sigma_sq, h, grid.N, grid.L,
    )
    return SpectralReport(lam0, d1, sigma_sq, h, grid, converged)


# ---------------------------------------------------------------------------
# Debug dumps: 16-byte header (N:uint64, t:float64) then row-major complex pairs
# ---------------------------------------------------------------------------
_HEADER = np.dtype([("N", "<u8"), ("t", "<f8")])


def dump_operator(op: FourierOperator, path) -> None:
    header = np.array([(op.grid.N, op.t)], dtype=_HEADER)
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(op.matrix, dtype="<c16").tobytes())
    log.debug("dumped %dx%d operator at t=%g to %s", op.grid.N, op.grid.N, op.t, path)


def load_operator(path) -> tuple[np.ndarray, float]:
    """Returns (matrix, t) from a dump_operator file."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size < _HEADER.itemsize:
        raise NumericalError(f"{path}: truncated operator header")
    header = np.frombuffer(raw[:_HEADER.itemsize].tobytes(), dtype=_HEADER)[0]
    n = int(header["N"])
    body = np.frombuffer(raw[_HEADER.itemsize:].tobytes(), dtype="<c16")
    if body.size != n * n:
        raise NumericalError(f"{path}: expected {n * n} entries, found {body.size}")
    return body.reshape(n, n).copy(), float(header["t"])
