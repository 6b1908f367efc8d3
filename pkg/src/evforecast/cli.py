"""Command-line front end: generate, prepare, stats, tune, train, forecast, evaluate.

Every command reads one effective configuration (defaults, then the YAML
file given with ``--config``, then command-line flags) and writes its
outputs into ``--out-dir``. Reports carry the hash of that configuration.
"""
import copy
import csv
import datetime as dt
import hashlib
import json
import os
import sys
import warnings

import click
import numpy as np
import yaml

from . import __version__
from .data import DataWarning, PreparedDataset, read_household_csv, read_weather_csv, prepare
from .data import write_household_csv, write_weather_csv
from .errors import ConfigError, EvForecastError, MissingArtifactError
from .forecast import DegenerateIntervalWarning, picp, predict_interval, predict_point
from .hyperopt import SearchSpace, best_interval_trial, leaderboard, tune
from .lstm import AdamState, build_model, load_model, save_model, train
from .metrics import mann_whitney, metrics
from .synth import SynthConfig, generate_components

REPORT_SCHEMA = 1
PICP_KS = (1, 2, 3, 5)
CLEAR = object()  # command-line override that sets a key to null

DEFAULTS = {
    "seed": 42,
    "synth": {},
    "household_csv": None,  # defaults to <out_dir>/household.csv
    "weather_csvs": None,  # defaults to <out_dir>/weather_*.csv
    "lockdown_cutoff": "2020-03-01",
    "fractions": [0.8, 0.1, 0.1],
    "slide": 1,
    "model": {"window_size": 24, "hidden_layers": 1, "hidden_neurons": 64, "dropout_p": 0.1,
              "learning_rate": 1e-3, "batch_size": 32, "epochs": 150, "clip_norm": 5.0},
    "tune": {"budget": 80, "epochs": 150, "workers": 1, "interval_passes": 0},
    "n_passes": 100,
    "k": 1.0,
}

SYNTH_KEYS = {"start", "end", "base_load_kw", "hvac_gain_kw_per_degC", "ev_charger_kw",
              "ev_sessions_per_week", "ev_plug_in_hour_distribution", "noise_std_kw",
              "missing_temp_rate", "n_stations", "level_shift_kw", "level_shift_start",
              "household_id"}


# --- configuration ---------------------------------------------------------

def _merge(base, override, where="config"):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown {where} key {key!r}")
        if isinstance(base[key], dict) and key != "synth":
            if not isinstance(value, dict):
                raise ConfigError(f"{where} key {key!r} must be a mapping")
            out[key] = _merge(base[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=None):
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a mapping")
        cfg = _merge(cfg, doc)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        if value is CLEAR:
            value = None
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    fr = cfg["fractions"]
    if len(fr) != 3 or min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be three positive numbers summing to 1, got {fr}")
    bad = set(cfg["synth"]) - SYNTH_KEYS
    if bad:
        raise ConfigError(f"unknown synth keys: {sorted(bad)}")
    if cfg["lockdown_cutoff"] is not None:
        _parse_date(cfg["lockdown_cutoff"], "lockdown_cutoff")
    if int(cfg["n_passes"]) < 2:
        raise ConfigError("n_passes must be >= 2")
    if float(cfg["k"]) <= 0:
        raise ConfigError("k must be positive")
    if int(cfg["slide"]) < 1:
        raise ConfigError("slide must be >= 1")
    m = cfg["model"]
    if not 0 <= float(m["dropout_p"]) <= 0.15:
        raise ConfigError("model.dropout_p must lie in [0, 0.15]")
    for key in ("hidden_layers", "hidden_neurons", "batch_size", "epochs"):
        if int(m[key]) < 1:
            raise ConfigError(f"model.{key} must be >= 1")
    if int(cfg["tune"]["budget"]) < 1:
        raise ConfigError("tune.budget must be >= 1")


def _parse_date(value, name):
    if isinstance(value, dt.datetime):
        return value
    if isinstance(value, dt.date):
        return dt.datetime(value.year, value.month, value.day)
    try:
        return dt.datetime.fromisoformat(str(value))
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {value!r} as a date") from exc


def config_hash(cfg):
    """Stable hash of the effective configuration."""
    text = json.dumps(cfg, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# --- output helpers --------------------------------------------------------

class Context:
    def __init__(self, cfg, out_dir):
        self.cfg = cfg
        self.out_dir = out_dir
        self.hash = config_hash(cfg)

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def require(self, name, command):
        p = self.path(name)
        if not os.path.exists(p):
            raise MissingArtifactError(p, command)
        return p

    def report(self, name, kind, body):
        doc = {"schema": REPORT_SCHEMA, "kind": kind, "config_hash": self.hash,
               "version": __version__}
        doc.update(body)
        with open(self.path(name), "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        return doc


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return "" if v is None else repr(float(v))


def _ts(t):
    return str(np.datetime64(t, "m"))


# --- commands --------------------------------------------------------------

def _synth_config(cfg):
    kw = dict(cfg["synth"])
    for key in ("start", "end", "level_shift_start"):
        if kw.get(key) is not None:
            kw[key] = _parse_date(kw[key], f"synth.{key}")
    if "ev_plug_in_hour_distribution" in kw:
        kw["ev_plug_in_hour_distribution"] = tuple(kw["ev_plug_in_hour_distribution"])
    return SynthConfig(seed=int(cfg["seed"]), **kw)


def run_generate(ctx):
    sc = _synth_config(ctx.cfg)
    parts = generate_components(sc)
    hh, stations = parts["household"], parts["weather"]
    hh_path = ctx.path("household.csv")
    write_household_csv(hh, hh_path)
    weather_files = []
    for k, st in enumerate(stations, 1):
        name = f"weather_{k}.csv"
        write_weather_csv([st], ctx.path(name))
        weather_files.append(name)
    n_sessions = int(np.sum(np.diff(parts["ev_active"].astype(int), prepend=0) == 1))
    meta = {"rows": len(hh.timestamps), "household_id": hh.household_id,
            "first": _ts(hh.timestamps[0]), "last": _ts(hh.timestamps[-1]),
            "ev_sessions": n_sessions, "no_ev_sessions": n_sessions == 0,
            "files": {"household": "household.csv", "weather": weather_files},
            "synth": {k: (str(v) if isinstance(v, (dt.datetime, tuple)) else v)
                      for k, v in vars(sc).items() if k != "dst_rule"}}
    return ctx.report("generate_meta.json", "generate", meta)


def _input_paths(ctx):
    hh = ctx.cfg["household_csv"] or ctx.path("household.csv")
    ws = ctx.cfg["weather_csvs"]
    if ws is None:
        ws = sorted(os.path.join(ctx.out_dir, f) for f in os.listdir(ctx.out_dir)
                    if f.startswith("weather_") and f.endswith(".csv")) if os.path.isdir(ctx.out_dir) else []
    return hh, list(ws)


def run_prepare(ctx):
    from .errors import DataError
    hh_path, w_paths = _input_paths(ctx)
    if not os.path.exists(hh_path):
        raise DataError(f"household file {hh_path} not found (run `generate` or set household_csv)",
                        stage="read")
    if not w_paths:
        raise DataError("no weather files found (run `generate` or set weather_csvs)", stage="read")
    for p in w_paths:
        if not os.path.exists(p):
            raise DataError(f"weather file {p} not found", stage="read")
    household = read_household_csv(hh_path)
    stations = []
    for p in w_paths:
        stations.extend(read_weather_csv(p))
    cutoff = ctx.cfg["lockdown_cutoff"]
    cutoff = _parse_date(cutoff, "lockdown_cutoff") if cutoff is not None else None
    prep = prepare(household, stations, lockdown_cutoff=cutoff, fractions=tuple(ctx.cfg["fractions"]))
    prep.meta = {"config_hash": ctx.hash, "household_id": household.household_id,
                 "lockdown_cutoff": None if cutoff is None else cutoff.isoformat(),
                 "rows": len(prep.table), "inputs": [os.path.basename(hh_path)]
                 + [os.path.basename(p) for p in w_paths]}
    prep.save(ctx.path("prepared.npz"))
    return prep


def _load_prepared(ctx, command):
    return PreparedDataset.load(ctx.require("prepared.npz", "prepare"))


def run_stats(ctx):
    prep = _load_prepared(ctx, "stats")
    tr, _, te = prep.split_tables()
    res = mann_whitney(tr.column("consumption"), te.column("consumption"))
    row = {"household_id": prep.meta.get("household_id"), "n_train": res.n1, "n_test": res.n2,
           "u_statistic": res.u_statistic, "p_value": res.p_value, "method": res.method,
           "alpha": res.alpha, "decision": "reject" if res.reject else "retain"}
    return ctx.report("stats.json", "mann-whitney", {"rows": [row]})


def run_tune(ctx):
    prep = _load_prepared(ctx, "tune")
    t = ctx.cfg["tune"]
    log = ctx.path("trials.jsonl")
    best, trials = tune(SearchSpace(), int(t["budget"]), data=prep, seed=int(ctx.cfg["seed"]),
                        epochs=int(t["epochs"]), interval_passes=int(t["interval_passes"]),
                        workers=int(t["workers"]), log_path=log, log_timing=False)
    rows = leaderboard(trials)
    cols = list(rows[0])
    write_csv(ctx.path("leaderboard.csv"), cols, [[r[c] if r[c] is not None else "" for c in cols]
                                                  for r in rows])
    interval = best_interval_trial(trials)
    body = {"best": best.to_dict(timing=False), "n_trials": len(trials),
            "best_interval": interval.to_dict(timing=False) if interval else None}
    return ctx.report("tune_best.json", "tune", body)


def _hyperparams(ctx, use_tuned):
    hp = dict(ctx.cfg["model"])
    if use_tuned:
        with open(ctx.require("tune_best.json", "tune")) as fh:
            doc = json.load(fh)
        chosen = doc["best_interval"] if use_tuned == "interval" and doc.get("best_interval") else doc["best"]
        hp.update(chosen["hyperparams"])
    return hp


def run_train(ctx, use_tuned=None):
    prep = _load_prepared(ctx, "train")
    hp = _hyperparams(ctx, use_tuned)
    tr, va, _ = prep.windows(int(hp["window_size"]), int(ctx.cfg["slide"]))
    model = build_model(tr.f, int(hp["hidden_neurons"]), int(hp["hidden_layers"]),
                        float(hp["dropout_p"]), seed=int(ctx.cfg["seed"]),
                        norm_id=prep.stats.identifier)
    report = train(model, tr, va, batch_size=int(hp["batch_size"]), epochs=int(hp["epochs"]),
                   adam=AdamState(float(hp["learning_rate"])), clip_norm=float(hp["clip_norm"]))
    save_model(model, ctx.path("model.npz"))
    write_csv(ctx.path("loss_curve.csv"), ["epoch", "train_loss", "val_loss"],
              [[e + 1, _fmt(a), _fmt(b) if e < len(report.epoch_val_loss) else ""]
               for e, (a, b) in enumerate(zip(report.epoch_train_loss,
                                              report.epoch_val_loss or [None] * report.epochs_run))])
    body = {"hyperparams": hp, "model_hash": file_hash(ctx.path("model.npz")),
            "norm_id": prep.stats.identifier, "train_report": report.to_dict()}
    return ctx.report("train_report.json", "train", body)


def _model_and_data(ctx, command):
    prep = _load_prepared(ctx, command)
    model_path = ctx.require("model.npz", "train")
    with open(ctx.require("train_report.json", "train")) as fh:
        hp = json.load(fh)["hyperparams"]
    model = load_model(model_path)
    return prep, model, hp, model_path


def _dst_flags(prep, ds, split_index):
    table = prep.split_tables()[split_index]
    return table.column("dst_flag")[ds.target_index].astype(int)


def _interval(ctx, model, ds, split_index):
    # a distinct stream per split so each split's passes are independent
    rng = np.random.default_rng([int(ctx.cfg["seed"]), 5, split_index])
    return predict_interval(model, ds, int(ctx.cfg["n_passes"]), float(ctx.cfg["k"]), rng=rng)


def run_forecast(ctx):
    prep, model, hp, model_path = _model_and_data(ctx, "forecast")
    _, _, te = prep.windows(int(hp["window_size"]), int(ctx.cfg["slide"]))
    point = predict_point(model, te)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateIntervalWarning)
        fc = _interval(ctx, model, te, 2)
    degenerate = any(issubclass(w.category, DegenerateIntervalWarning) for w in caught)
    if degenerate:
        click.echo("warning: model has no dropout; intervals have zero width", err=True)
    flags = _dst_flags(prep, te, 2)
    write_csv(ctx.path("forecast.csv"),
              ["timestamp", "dst_flag", "actual", "point", "mean", "sigma", "lower", "upper"],
              [[_ts(t), f, _fmt(a), _fmt(p), _fmt(m), _fmt(s), _fmt(lo), _fmt(hi)]
               for t, f, a, p, m, s, lo, hi in zip(te.timestamps, flags, te.target_kwh, point,
                                                   fc.mean, fc.sigma, fc.lower, fc.upper)])
    body = {"model_hash": file_hash(model_path), "n_passes": fc.n_passes, "k": fc.k,
            "seed": int(ctx.cfg["seed"]), "split": "test", "n": len(te),
            "degenerate_interval": degenerate,
            "picp": picp(fc, te.target_kwh).coverage}
    return ctx.report("forecast_report.json", "forecast", body)


def run_evaluate(ctx):
    prep, model, hp, model_path = _model_and_data(ctx, "evaluate")
    sets = prep.windows(int(hp["window_size"]), int(ctx.cfg["slide"]))
    table, rows = {}, []
    picp_rows = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateIntervalWarning)
        for i, (name, ds) in enumerate(zip(("train", "val", "test"), sets)):
            point = metrics(ds.target_kwh, predict_point(model, ds))
            fc = _interval(ctx, model, ds, i)
            interval = metrics(ds.target_kwh, fc.mean)
            table[name] = {"point": point.to_dict(), "interval": interval.to_dict()}
            for kind, rep in (("point", point), ("interval", interval)):
                rows.append([name, kind, _fmt(rep.mape), _fmt(rep.mse), _fmt(rep.rmse),
                             _fmt(rep.mae), rep.n, rep.n_excluded])
            if name == "test":
                picp_rows = {str(k): picp(fc, ds.target_kwh, k).coverage for k in PICP_KS}
    write_csv(ctx.path("evaluation.csv"),
              ["split", "prediction", "mape", "mse", "rmse", "mae", "n", "n_excluded"], rows)
    body = {"model_hash": file_hash(model_path), "n_passes": int(ctx.cfg["n_passes"]),
            "seed": int(ctx.cfg["seed"]), "metrics": table, "picp_test": picp_rows}
    return ctx.report("evaluation.json", "evaluate", body)


# --- click surface ---------------------------------------------------------

def _run(ctx_obj, fn, *args):
    out_dir = ctx_obj["out_dir"]
    cfg = load_config(ctx_obj["config"], {**ctx_obj["overrides"], **ctx_obj.get("local", {})})
    os.makedirs(out_dir, exist_ok=True)
    with warnings.catch_warnings():
        warnings.simplefilter("always", DataWarning)
        warnings.showwarning = lambda msg, cat, *a, **k: click.echo(f"warning: {msg}", err=True)
        return fn(Context(cfg, out_dir), *args)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="YAML configuration file.")
@click.option("--seed", type=int, default=None, help="Master seed.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=".", show_default=True,
              help="Directory for all inputs and outputs of the run.")
@click.version_option(__version__)
@click.pass_context
def main(ctx, config_path, seed, out_dir):
    """Household load forecasting with LSTM point and MC-dropout interval models."""
    ctx.obj = {"config": config_path, "out_dir": out_dir, "overrides": {"seed": seed}}


def _local(ctx, **kw):
    ctx.obj["local"] = kw


@main.command()
@click.option("--start", default=None, help="First wall-clock hour (ISO).")
@click.option("--end", default=None, help="Last wall-clock hour (ISO).")
@click.option("--ev-sessions-per-week", type=float, default=None)
@click.option("--level-shift-kw", type=float, default=None)
@click.option("--level-shift-start", default=None)
@click.pass_context
def generate(ctx, start, end, ev_sessions_per_week, level_shift_kw, level_shift_start):
    """Write a synthetic household and its weather stations."""
    synth = {k: v for k, v in (("start", start), ("end", end),
                               ("ev_sessions_per_week", ev_sessions_per_week),
                               ("level_shift_kw", level_shift_kw),
                               ("level_shift_start", level_shift_start)) if v is not None}
    if synth:
        cfg = load_config(ctx.obj["config"])
        _local(ctx, synth={**cfg["synth"], **synth})
    meta = _run(ctx.obj, run_generate)
    click.echo(f"generated {meta['rows']} rows ({meta['ev_sessions']} EV sessions)")


@main.command()
@click.option("--household", "household_csv", default=None, type=click.Path(dir_okay=False))
@click.option("--weather", "weather_csvs", multiple=True, type=click.Path(dir_okay=False))
@click.option("--lockdown-cutoff", default=None, help="Keep rows before this date.")
@click.option("--no-lockdown-filter", is_flag=True, help="Keep every row.")
@click.pass_context
def prepare_cmd(ctx, household_csv, weather_csvs, lockdown_cutoff, no_lockdown_filter):
    """Clean, merge, split and normalise the inputs."""
    local = {"household_csv": household_csv, "weather_csvs": list(weather_csvs) or None,
             "lockdown_cutoff": lockdown_cutoff}
    if no_lockdown_filter:
        if lockdown_cutoff:
            raise click.UsageError("--lockdown-cutoff and --no-lockdown-filter conflict")
        local["lockdown_cutoff"] = CLEAR
    _local(ctx, **local)
    prep = _run(ctx.obj, run_prepare)
    n = prep.bounds
    click.echo(f"prepared {len(prep.table)} rows: train {n[0]}, val {n[1]}, test {n[2]}")


main.add_command(prepare_cmd, "prepare")


@main.command()
@click.pass_context
def stats(ctx):
    """Mann-Whitney test of train against test consumption."""
    doc = _run(ctx.obj, run_stats)
    r = doc["rows"][0]
    click.echo(f"U={r['u_statistic']:.1f} p={r['p_value']:.4g} ({r['method']}): {r['decision']} H0")


@main.command("tune")
@click.option("--budget", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--interval-passes", type=int, default=None)
@click.pass_context
def tune_cmd(ctx, budget, epochs, workers, interval_passes):
    """Hyperparameter search on the validation split."""
    _local(ctx, **{f"tune.{k}": v for k, v in (("budget", budget), ("epochs", epochs),
                                               ("workers", workers),
                                               ("interval_passes", interval_passes))})
    doc = _run(ctx.obj, run_tune)
    click.echo(f"best of {doc['n_trials']} trials: {doc['best']['hyperparams']} "
               f"val_mse={doc['best']['val_mse']:.4g}")


@main.command("train")
@click.option("--window-size", type=int, default=None)
@click.option("--hidden-layers", type=int, default=None)
@click.option("--hidden-neurons", type=int, default=None)
@click.option("--dropout", "dropout_p", type=float, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--use-tuned", type=click.Choice(["point", "interval"]), default=None,
              help="Take hyperparameters from tune_best.json.")
@click.pass_context
def train_cmd(ctx, use_tuned, **kw):
    """Train one model and save it."""
    _local(ctx, **{f"model.{k}": v for k, v in kw.items()})
    doc = _run(ctx.obj, run_train, use_tuned)
    losses = doc["train_report"]["epoch_train_loss"]
    click.echo(f"trained {len(losses)} epochs, final train loss {losses[-1]:.4g}")


@main.command("forecast")
@click.option("--passes", "n_passes", type=int, default=None)
@click.option("-k", "k", type=float, default=None)
@click.pass_context
def forecast_cmd(ctx, n_passes, k):
    """Point and interval forecasts for the test split."""
    _local(ctx, n_passes=n_passes, k=k)
    doc = _run(ctx.obj, run_forecast)
    click.echo(f"forecast {doc['n']} steps, PICP(k={doc['k']:g}) = {doc['picp']:.3f}")


@main.command("evaluate")
@click.option("--passes", "n_passes", type=int, default=None)
@click.pass_context
def evaluate_cmd(ctx, n_passes):
    """Point and interval-mean metrics on every split, plus PICP."""
    _local(ctx, n_passes=n_passes)
    doc = _run(ctx.obj, run_evaluate)
    for split, d in doc["metrics"].items():
        click.echo(f"{split:5s} point MAPE {d['point']['mape']:.3f}%  "
                   f"interval MAPE {d['interval']['mape']:.3f}%")
    click.echo("PICP " + ", ".join(f"k={k}: {v:.3f}" for k, v in doc["picp_test"].items()))


def run(argv=None):
    """Entry point returning an exit code instead of raising."""
    try:
        main.main(args=argv, standalone_mode=False)
    except EvForecastError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    return 0


def entry():
    sys.exit(run())
