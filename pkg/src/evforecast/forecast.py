"""Point forecasts and Monte Carlo dropout intervals."""
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .lstm import predict

DEFAULT_PASSES = 100


class DegenerateIntervalWarning(UserWarning):
    pass


@dataclass
class IntervalForecast:
    """Per-timestep interval statistics from ``n_passes`` stochastic passes.

    Arrays are indexed by timestep; ``raw_samples`` (optional) has shape
    ``(n_steps, n_passes)``. All values are in kWh.
    """

    mean: np.ndarray
    sigma: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_passes: int
    k: float = 1.0
    raw_samples: np.ndarray = None

    def __len__(self):
        return self.mean.shape[0]

    def bounds(self, k):
        return self.mean - k * self.sigma, self.mean + k * self.sigma


def interval_from_samples(samples, k=1.0, keep_samples=True):
    """Mean, population standard deviation and mean +- k sigma bounds.

    ``samples`` is ``(n_steps, N)`` or a single sample set ``(N,)``.
    """
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim == 1:
        s = s[None, :]
    n = s.shape[1]
    if n < 1:
        raise ValueError("need at least one sample per timestep")
    mean = s.sum(axis=1) / n
    sigma = np.sqrt(((s - mean[:, None]) ** 2).sum(axis=1) / n)
    # identical passes: keep the value itself rather than a rounded sum/N
    flat = np.all(s == s[:, :1], axis=1)
    mean[flat] = s[flat, 0]
    sigma[flat] = 0.0
    return IntervalForecast(mean, sigma, mean - k * sigma, mean + k * sigma, n, float(k),
                            s if keep_samples else None)


def _check_compatible(model, ds, stats):
    if model.n_features != ds.f:
        raise ShapeError("model/dataset features", (model.n_features,), (ds.f,))
    if stats is None:
        raise DataError("normalisation statistics are required for kWh output")
    if model.norm_id and model.norm_id != stats.identifier:
        raise DataError(f"model was trained with normalisation {model.norm_id}, "
                        f"dataset uses {stats.identifier}")


def predict_point(model, ds, stats=None):
    """One deterministic pass per sample, dropout off; kWh."""
    stats = stats if stats is not None else ds.stats
    _check_compatible(model, ds, stats)
    return stats.inverse_target(predict(model, ds.inputs))


def predict_interval(model, ds, n_passes=DEFAULT_PASSES, k=1.0, rng=None, stats=None,
                     keep_samples=False):
    """Monte Carlo dropout interval per sample.

    Each pass runs the whole dataset with fresh dropout masks; passes are
    accumulated in index order so results are bitwise reproducible.
    """
    if n_passes < 2:
        raise ValueError(f"n_passes must be >= 2, got {n_passes}")
    stats = stats if stats is not None else ds.stats
    _check_compatible(model, ds, stats)
    if model.dropout_p <= 0:
        warnings.warn("model has no dropout; intervals collapse to the point forecast",
                      DegenerateIntervalWarning, stacklevel=2)
        point = stats.inverse_target(predict(model, ds.inputs))
        samples = np.repeat(point[:, None], n_passes, axis=1)
        return interval_from_samples(samples, k, keep_samples)
    rng = rng if rng is not None else np.random.default_rng([model.rng_seed, 2])
    samples = np.empty((len(ds), n_passes))
    for p in range(n_passes):
        samples[:, p] = predict(model, ds.inputs, dropout_active=True, rng=rng)
    return interval_from_samples(stats.inverse_target(samples), k, keep_samples)


@dataclass
class PicpReport:
    k: float
    coverage: float
    n: int


def picp(forecast, actuals, k=None):
    """Share of actuals inside ``mean +- k sigma`` (bounds inclusive)."""
    actuals = np.asarray(actuals, dtype=np.float64)
    if actuals.shape != forecast.mean.shape:
        raise ShapeError("picp", forecast.mean.shape, actuals.shape)
    k = forecast.k if k is None else float(k)
    lo, hi = forecast.bounds(k)
    inside = (actuals >= lo) & (actuals <= hi)
    n = actuals.shape[0]
    return PicpReport(k, float(inside.sum() / n) if n else float("nan"), n)
