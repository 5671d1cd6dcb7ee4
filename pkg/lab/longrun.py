"""Long-run variance of a stationary series by non-overlapping batch means."""

import math

import numpy as np

from lab.errors import ParameterDomainError


def batch_means_variance(series, batch_size: int | None = None, size: str = "sqroot") -> float:
    """Non-overlapping batch means estimate of lim Var(sum)/n."""
    y = np.asarray(series, dtype=float).reshape(-1)
    length = y.size
    if batch_size is None:
        if size == "sqroot":
            batch_size = int(math.floor(math.sqrt(length)))
        elif size == "cuberoot":
            batch_size = int(math.floor(length ** (1.0 / 3.0)))
        else:
            raise ParameterDomainError("size", f"expected sqroot|cuberoot, got {size!r}")
    batch_size = int(batch_size)
    if batch_size < 1:
        raise ParameterDomainError("batch_size", f"must be >= 1, got {batch_size}")
    a = length // batch_size
    if a < 2:
        raise ParameterDomainError("series", f"{length} values give fewer than 2 batches of {batch_size}")
    means = y[: a * batch_size].reshape(a, batch_size).mean(axis=1)
    return float(batch_size * np.var(means, ddof=1))
