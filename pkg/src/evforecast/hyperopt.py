"""Sequential model-based search over the discrete LSTM hyperparameter grid.

After a block of uniformly random trials, each new point is the unevaluated
grid point with the highest expected improvement under a Gaussian-process
surrogate fit to log validation MSE over one-hot encoded hyperparameters.
The grid is small (864 points), so acquisition is evaluated exhaustively.
"""
import itertools
import json
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import ConfigError, TrainingDivergenceError
from .lstm import AdamState, TrainReport, build_model, train

DEFAULT_BUDGET = 80
DEFAULT_EPOCHS = 150


@dataclass(frozen=True)
class SearchSpace:
    batch_size: tuple = (32, 64, 128)
    window_size: tuple = (12, 24, 48, 72)
    hidden_layers: tuple = (1, 2, 3)
    hidden_neurons: tuple = (64, 128)
    learning_rate: tuple = (1e-4, 1e-3, 1e-2)
    dropout_p: tuple = (0.0, 0.05, 0.1, 0.15)

    @property
    def dimensions(self):
        return ("batch_size", "window_size", "hidden_layers", "hidden_neurons",
                "learning_rate", "dropout_p")

    def points(self):
        """Every grid point as a dict, in lexicographic order."""
        values = [sorted(getattr(self, d)) for d in self.dimensions]
        return [dict(zip(self.dimensions, combo)) for combo in itertools.product(*values)]

    @property
    def size(self):
        return math.prod(len(getattr(self, d)) for d in self.dimensions)

    def encode(self, point):
        parts = []
        for d in self.dimensions:
            choices = sorted(getattr(self, d))
            onehot = [0.0] * len(choices)
            onehot[choices.index(point[d])] = 1.0
            parts.extend(onehot)
        return np.array(parts)

    def to_dict(self):
        return {d: list(getattr(self, d)) for d in self.dimensions}


@dataclass
class TrialRecord:
    index: int
    hyperparams: dict
    seed: int
    val_mse: float
    val_mape: float
    train_report: TrainReport = field(default_factory=TrainReport)
    wall_time: float = 0.0
    val_mse_interval: float = None
    val_mape_interval: float = None
    model: object = field(default=None, repr=False, compare=False)

    def to_dict(self, timing=True):
        d = {"index": self.index, "hyperparams": self.hyperparams, "seed": self.seed,
             "val_mse": _json_float(self.val_mse), "val_mape": _json_float(self.val_mape),
             "val_mse_interval": _json_float(self.val_mse_interval),
             "val_mape_interval": _json_float(self.val_mape_interval),
             "train_report": self.train_report.to_dict()}
        if timing:
            d["wall_time"] = self.wall_time
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["index"], d["hyperparams"], d["seed"], _from_json_float(d["val_mse"]),
                   _from_json_float(d["val_mape"]), TrainReport.from_dict(d["train_report"]),
                   d.get("wall_time", 0.0), _from_json_float(d.get("val_mse_interval")),
                   _from_json_float(d.get("val_mape_interval")))


def _json_float(v):
    if v is None:
        return None
    return v if math.isfinite(v) else str(v)


def _from_json_float(v):
    return float(v) if v is not None else None


def trial_seed(master_seed, index):
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


class LstmObjective:
    """Train one model per hyperparameter point on a prepared dataset.

    Validation MSE/MAPE are in kWh with dropout off. When ``interval_passes``
    is positive and the point has dropout, the interval-mean metrics are
    recorded as well.
    """

    def __init__(self, prepared, epochs=DEFAULT_EPOCHS, interval_passes=0, clip_norm=5.0,
                 slide=1, keep_model=False):
        self.prepared = prepared
        self.epochs = epochs
        self.interval_passes = interval_passes
        self.clip_norm = clip_norm
        self.slide = slide
        self.keep_model = keep_model
        self._windows = {}

    def windows(self, w):
        if w not in self._windows:
            self._windows[w] = self.prepared.windows(w, self.slide)
        return self._windows[w]

    def __call__(self, hp, seed):
        from .forecast import predict_interval, predict_point
        from .metrics import metrics
        tr, va, _ = self.windows(hp["window_size"])
        model = build_model(tr.f, hp["hidden_neurons"], hp["hidden_layers"], hp["dropout_p"],
                            seed=seed, norm_id=self.prepared.stats.identifier)
        try:
            report = train(model, tr, va, batch_size=hp["batch_size"], epochs=self.epochs,
                           adam=AdamState(hp["learning_rate"]), clip_norm=self.clip_norm)
        except TrainingDivergenceError:
            return {"val_mse": math.inf, "val_mape": math.inf, "train_report": TrainReport()}
        point = metrics(va.target_kwh, predict_point(model, va))
        out = {"val_mse": point.mse, "val_mape": point.mape, "train_report": report}
        if self.interval_passes and model.dropout_p > 0:
            fc = predict_interval(model, va, self.interval_passes,
                                  rng=np.random.default_rng([seed, 3]))
            iv = metrics(va.target_kwh, fc.mean)
            out["val_mse_interval"] = iv.mse
            out["val_mape_interval"] = iv.mape
        if self.keep_model:
            out["model"] = model
        return out


def _run_trial(objective, index, hp, seed):
    t0 = time.perf_counter()
    res = objective(dict(hp), seed)
    rec = TrialRecord(index, dict(hp), seed, float(res["val_mse"]), float(res["val_mape"]),
                      res.get("train_report", TrainReport()), time.perf_counter() - t0,
                      res.get("val_mse_interval"), res.get("val_mape_interval"), res.get("model"))
    return rec


class GaussianSurrogate:
    """GP regression with a squared-exponential kernel on one-hot vectors."""

    def __init__(self, length_scale=math.sqrt(3.0), noise=1e-4):
        self.length_scale = length_scale
        self.noise = noise

    def _kernel(self, A, B):
        d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
        return np.exp(-np.maximum(d2, 0.0) / (2.0 * self.length_scale ** 2))

    def fit(self, X, y):
        self.X = X
        self.mu = float(np.mean(y))
        self.scale = float(np.std(y)) or 1.0
        z = (y - self.mu) / self.scale
        K = self._kernel(X, X) + self.noise * np.eye(len(X))
        self.L = np.linalg.cholesky(K)
        self.alpha = np.linalg.solve(self.L.T, np.linalg.solve(self.L, z))
        return self

    def predict(self, Xs):
        Ks = self._kernel(Xs, self.X)
        mean = Ks @ self.alpha
        v = np.linalg.solve(self.L, Ks.T)
        var = np.maximum(1.0 - (v * v).sum(0), 1e-12)
        return mean * self.scale + self.mu, np.sqrt(var) * self.scale


def expected_improvement(mean, sd, best, xi=0.01):
    """EI for minimisation."""
    imp = best - mean - xi
    z = imp / sd
    return imp * norm.cdf(z) + sd * norm.pdf(z)


def _objective_values(trials):
    y = np.array([t.val_mse for t in trials], dtype=np.float64)
    finite = np.isfinite(y) & (y > 0)
    logs = np.full(y.shape, np.nan)
    logs[finite] = np.log(y[finite])
    worst = np.nanmax(logs) + 1.0 if finite.any() else 0.0
    logs[~finite] = worst
    return logs


def propose(space, trials, candidates, q=1, encoded=None):
    """Indices into ``candidates`` of the ``q`` highest-EI points (ties: lowest index).

    ``encoded`` optionally holds the candidates' one-hot rows.
    """
    X = np.array([space.encode(t.hyperparams) for t in trials])
    y = _objective_values(trials)
    gp = GaussianSurrogate().fit(X, y)
    Xc = encoded if encoded is not None else np.array([space.encode(c) for c in candidates])
    mean, sd = gp.predict(Xc)
    ei = expected_improvement(mean, sd, float(np.min(y)))
    order = np.lexsort((np.arange(len(ei)), -ei))
    return [int(i) for i in order[:q]]


def _point_key(space, point):
    return tuple(point[d] for d in space.dimensions)


def rank_key(space):
    def key(trial):
        v = trial.val_mse
        return (v if math.isfinite(v) else math.inf, _point_key(space, trial.hyperparams))
    return key


def _read_log(path):
    if not path or not os.path.exists(path):
        return None, []
    header, records = None, []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                break  # torn final line from an interrupted run
            if obj.get("type") == "header":
                header = obj
            else:
                records.append(TrialRecord.from_dict(obj))
    return header, records


def tune(space=None, budget=DEFAULT_BUDGET, data=None, seed=0, objective=None, epochs=DEFAULT_EPOCHS,
         interval_passes=0, workers=1, log_path=None, keep_models=False, log_timing=True):
    """Search ``space`` for the lowest validation MSE.

    ``objective(hyperparams, seed) -> dict`` defaults to training an LSTM on
    the prepared dataset ``data``. Returns ``(best, trials)``. With
    ``log_path`` every finished trial is appended as a JSON line and a rerun
    resumes from the log; ``log_timing=False`` leaves wall times out of it
    so the file is reproducible byte for byte.
    """
    space = space or SearchSpace()
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    if budget > space.size:
        warnings.warn(f"budget {budget} exceeds the {space.size}-point space; clamped", stacklevel=2)
        budget = space.size
    if objective is None:
        if data is None:
            raise ConfigError("tune needs either prepared data or an objective")
        objective = LstmObjective(data, epochs=epochs, interval_passes=interval_passes,
                                  keep_model=keep_models)
    points = space.points()
    encoded = np.array([space.encode(p) for p in points])
    rng = np.random.default_rng([seed, 7])
    n_init = min(budget, max(8, budget // 10))
    init_idx = [int(i) for i in rng.choice(len(points), size=n_init, replace=False)]

    header = {"type": "header", "master_seed": seed, "budget": budget, "space": space.to_dict()}
    logged_header, logged = _read_log(log_path)
    if logged_header is not None and (logged_header["master_seed"] != seed
                                      or logged_header["space"] != header["space"]):
        raise ConfigError(f"{log_path} belongs to a different search; remove it or change the path")
    if log_path and logged_header is None:
        with open(log_path, "w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")

    trials = []
    evaluated = set()

    def run_batch(batch):
        # batch: list of (index, point); results are appended in index order
        todo, results = [], {}
        for index, hp in batch:
            if index < len(logged):
                rec = logged[index]
                if _point_key(space, rec.hyperparams) != _point_key(space, hp):
                    raise ConfigError(f"{log_path}: trial {index} does not match the replayed search")
                results[index] = rec
            else:
                todo.append((index, hp))
        if workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futs = [pool.submit(_run_trial, objective, i, hp, trial_seed(seed, i)) for i, hp in todo]
                for (i, _), fut in zip(todo, futs):
                    results[i] = fut.result()
        else:
            for i, hp in todo:
                results[i] = _run_trial(objective, i, hp, trial_seed(seed, i))
        for index, _ in batch:
            rec = results[index]
            trials.append(rec)
            evaluated.add(_point_key(space, rec.hyperparams))
            if log_path and index >= len(logged):
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(rec.to_dict(timing=log_timing), sort_keys=True) + "\n")

    run_batch([(k, points[i]) for k, i in enumerate(init_idx)])
    while len(trials) < budget:
        open_idx = [i for i, p in enumerate(points) if _point_key(space, p) not in evaluated]
        candidates = [points[i] for i in open_idx]
        q = min(max(1, workers), budget - len(trials))
        chosen = propose(space, trials, candidates, q, encoded[open_idx])
        run_batch([(len(trials) + j, candidates[c]) for j, c in enumerate(chosen)])

    best = min(trials, key=rank_key(space))
    return best, trials


def leaderboard(trials, space=None):
    """Trials ranked by validation MSE, ties broken by hyperparameter order."""
    if not trials:
        raise ValueError("leaderboard of no trials")
    space = space or SearchSpace()
    ranked = sorted(trials, key=rank_key(space))
    rows = []
    for rank, t in enumerate(ranked, 1):
        row = {"rank": rank, "index": t.index}
        row.update(t.hyperparams)
        row.update({"val_mse": t.val_mse, "val_mape": t.val_mape,
                    "val_mse_interval": t.val_mse_interval,
                    "val_mape_interval": t.val_mape_interval})
        rows.append(row)
    return rows


def best_interval_trial(trials, space=None):
    """Lowest interval-mean validation MSE among trials with dropout."""
    space = space or SearchSpace()
    pool = [t for t in trials if t.hyperparams["dropout_p"] > 0 and t.val_mse_interval is not None]
    if not pool:
        return None
    return min(pool, key=lambda t: (t.val_mse_interval if math.isfinite(t.val_mse_interval) else math.inf,
                                    _point_key(space, t.hyperparams)))
