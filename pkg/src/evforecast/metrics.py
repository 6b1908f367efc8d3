"""Regression error metrics and the two-sided Mann-Whitney U test."""
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError, ShapeError

EXACT_MAX_N = 16


@dataclass
class MetricsReport:
    mape: float  # percent, over rows with nonzero actuals
    mse: float
    rmse: float
    mae: float
    n: int
    n_excluded: int = 0  # rows dropped from MAPE because actual == 0

    def to_dict(self):
        return asdict(self)


def metrics(actual, predicted):
    y = np.asarray(actual, dtype=np.float64).reshape(-1)
    yhat = np.asarray(predicted, dtype=np.float64).reshape(-1)
    if y.shape != yhat.shape:
        raise ShapeError("metrics", y.shape, yhat.shape)
    if y.size == 0:
        raise DataError("metrics of an empty sample")
    err = y - yhat
    nz = y != 0
    if not nz.any():
        raise DataError("MAPE undefined: every actual value is zero")
    mape = 100.0 * float(np.mean(np.abs(err[nz]) / np.abs(y[nz])))
    mse = float(np.mean(err * err))
    return MetricsReport(mape, mse, math.sqrt(mse), float(np.mean(np.abs(err))),
                         int(y.size), int((~nz).sum()))


@dataclass
class MannWhitneyResult:
    u_statistic: float
    p_value: float
    method: str  # "exact" or "normal-approximation"
    n1: int
    n2: int
    alpha: float = 0.05

    @property
    def reject(self):
        return self.p_value < self.alpha

    def to_dict(self):
        d = asdict(self)
        d["reject"] = self.reject
        return d


def midranks(values):
    """1-based ranks with ties sharing their average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(values.size)
    i = 0
    n = values.size
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def u_distribution(n1, n2):
    """Exact counts of U over all C(n1+n2, n1) rank assignments.

    Returns a list where entry u is the number of arrangements with U == u,
    built with the recurrence f(n1, n2, u) = f(n1-1, n2, u-n2) + f(n1, n2-1, u).
    """
    # table[j][u] holds f(i, j, u) for the current i
    table = [[1] for _ in range(n2 + 1)]  # i = 0: only u = 0
    for i in range(1, n1 + 1):
        new = [[1]]  # j = 0: only u = 0
        for j in range(1, n2 + 1):
            prev_i = table[j]  # f(i-1, j, .)
            prev_j = new[j - 1]  # f(i, j-1, .)
            size = i * j + 1
            row = [0] * size
            for u, c in enumerate(prev_j):
                row[u] += c
            for u, c in enumerate(prev_i):
                row[u + j] += c
            new.append(row)
        table = new
    return table[n2]


def _exact_p(u, n1, n2):
    counts = u_distribution(n1, n2)
    total = sum(counts)
    k = int(round(u))
    lower = sum(counts[:k + 1])
    upper = sum(counts[k:])
    return min(1.0, 2.0 * min(lower, upper) / total)


def mann_whitney(a, b, alpha=0.05, method="auto"):
    """Two-sided Mann-Whitney U test of ``a`` against ``b``.

    ``U`` is the statistic of ``a``. With ``method="auto"`` the exact null
    distribution is used when there are no ties and ``n1 + n2 <= 16``;
    otherwise the normal approximation with tie-corrected variance and a
    continuity correction.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    n1, n2 = a.size, b.size
    if n1 == 0 or n2 == 0:
        raise DataError("Mann-Whitney needs two non-empty samples")
    pooled = np.concatenate([a, b])
    ranks = midranks(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    has_ties = np.unique(pooled).size < pooled.size
    if method == "auto":
        method = "exact" if (not has_ties and n1 + n2 <= EXACT_MAX_N) else "normal-approximation"
    if method == "exact":
        if has_ties:
            raise ValueError("exact Mann-Whitney p-value requires tie-free samples")
        p = _exact_p(u, n1, n2)
    elif method == "normal-approximation":
        p = _normal_p(u, n1, n2, pooled)
    else:
        raise ValueError(f"unknown method {method!r}")
    return MannWhitneyResult(u, p, method, n1, n2, alpha)


def _normal_p(u, n1, n2, pooled):
    n = n1 + n2
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(counts.astype(np.float64) ** 3 - counts))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1))) if n > 1 else 0.0
    if var <= 0:
        return 1.0
    z = max(abs(u - n1 * n2 / 2.0) - 0.5, 0.0) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))
