import json
import math

import numpy as np
import pytest

from evforecast.hyperopt import (
    LstmObjective,
    SearchSpace,
    TrialRecord,
    best_interval_trial,
    expected_improvement,
    leaderboard,
    trial_seed,
    tune,
)

SPACE = SearchSpace()


def bowl(hp, seed):
    """Smooth synthetic objective with a unique minimum."""
    v = ((math.log10(hp["learning_rate"]) + 3) ** 2 + (hp["window_size"] - 48) ** 2 / 100
         + hp["dropout_p"] + 0.1 * hp["hidden_layers"] + hp["batch_size"] / 1000
         + hp["hidden_neurons"] / 10_000)
    return {"val_mse": v, "val_mape": 10 * v}


PLANTED = {"batch_size": 128, "window_size": 12, "hidden_layers": 3, "hidden_neurons": 64,
           "learning_rate": 1e-4, "dropout_p": 0.1}


def planted(hp, seed):
    return {"val_mse": 0.5 if hp == PLANTED else 1.0 + (seed % 1000) / 1e4, "val_mape": 1.0}


class Counting:
    def __init__(self, fn):
        self.fn, self.calls = fn, 0

    def __call__(self, hp, seed):
        self.calls += 1
        return self.fn(hp, seed)


def test_space_matches_grid():
    pts = SPACE.points()
    assert SPACE.size == len(pts) == 864
    assert len({tuple(p.values()) for p in pts}) == 864
    assert SPACE.dropout_p == (0.0, 0.05, 0.1, 0.15)
    assert SPACE.encode(pts[0]).sum() == 6 and SPACE.encode(pts[0]).size == 19


def test_budget_one():
    best, trials = tune(SPACE, 1, objective=bowl, seed=3)
    assert len(trials) == 1 and best is trials[0]


def test_planted_optimum_exhaustive():
    with pytest.warns(UserWarning, match="clamped"):
        best, trials = tune(SPACE, 2000, objective=planted, seed=1)
    assert len(trials) == 864
    assert best.hyperparams == PLANTED


def test_invariants_and_search_quality():
    budget = 40
    best, trials = tune(SPACE, budget, objective=bowl, seed=5)
    keys = [tuple(t.hyperparams.values()) for t in trials]
    assert len(set(keys)) == len(keys) == budget
    assert best.val_mse == min(t.val_mse for t in trials)
    n_init = max(8, budget // 10)
    assert best.val_mse <= min(t.val_mse for t in trials[:n_init])
    # the guided phase should beat random search on this smooth bowl
    assert best.val_mse < min(t.val_mse for t in trials[:n_init])
    assert [t.index for t in trials] == list(range(budget))
    assert all(t.seed == trial_seed(5, t.index) for t in trials)


def test_same_seed_same_sequence():
    a = tune(SPACE, 15, objective=bowl, seed=8)[1]
    b = tune(SPACE, 15, objective=bowl, seed=8)[1]
    c = tune(SPACE, 15, objective=bowl, seed=9)[1]
    assert [t.hyperparams for t in a] == [t.hyperparams for t in b]
    assert [t.hyperparams for t in a] != [t.hyperparams for t in c]


def test_parallel_matches_serial():
    serial = tune(SPACE, 12, objective=bowl, seed=2, workers=1)[1]
    par = tune(SPACE, 12, objective=bowl, seed=2, workers=2)[1]
    init = max(8, 12 // 10)
    # random phase is identical; guided phase proposes in pairs so may differ
    assert [t.hyperparams for t in serial[:init]] == [t.hyperparams for t in par[:init]]
    again = tune(SPACE, 12, objective=bowl, seed=2, workers=2)[1]
    assert [t.hyperparams for t in par] == [t.hyperparams for t in again]


def test_resume_from_log(tmp_path):
    log = tmp_path / "trials.jsonl"
    full = tune(SPACE, 14, objective=bowl, seed=4, log_path=str(log))[1]
    lines = log.read_text().splitlines()
    assert json.loads(lines[0])["type"] == "header" and len(lines) == 15
    log.write_text("\n".join(lines[:6]) + "\n" + lines[6][:20])  # five trials and a torn line
    counter = Counting(bowl)
    resumed = tune(SPACE, 14, objective=counter, seed=4, log_path=str(log))[1]
    assert counter.calls == 9
    assert [t.hyperparams for t in resumed] == [t.hyperparams for t in full]


def test_log_from_other_search_rejected(tmp_path):
    from evforecast.errors import ConfigError
    log = tmp_path / "trials.jsonl"
    tune(SPACE, 2, objective=bowl, seed=4, log_path=str(log))
    with pytest.raises(ConfigError):
        tune(SPACE, 2, objective=bowl, seed=5, log_path=str(log))


def test_log_without_timing_is_reproducible(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    tune(SPACE, 9, objective=bowl, seed=1, log_path=str(a), log_timing=False)
    tune(SPACE, 9, objective=bowl, seed=1, log_path=str(b), log_timing=False)
    assert a.read_bytes() == b.read_bytes()


def test_divergent_trials_rank_last():
    def sometimes_inf(hp, seed):
        return {"val_mse": math.inf if hp["learning_rate"] == 1e-2 else 1.0, "val_mape": 1.0}
    best, trials = tune(SPACE, 20, objective=sometimes_inf, seed=0)
    assert math.isfinite(best.val_mse)


def test_expected_improvement():
    ei = expected_improvement(np.array([0.0, 1.0, 2.0]), np.array([1.0, 1.0, 1e-9]), best=1.0, xi=0.0)
    assert ei[0] > ei[1] > 0 and ei[2] < 1e-12
    # at the incumbent with unit sd, EI = pdf(0)
    assert abs(ei[1] - 1 / math.sqrt(2 * math.pi)) < 1e-12


def _rec(i, mse, **hp):
    point = dict(SPACE.points()[0])
    point.update(hp)
    return TrialRecord(i, point, 0, mse, 1.0)


def test_leaderboard():
    one = _rec(0, 2.0)
    assert [r["index"] for r in leaderboard([one])] == [0]
    rows = leaderboard([_rec(0, 3.0), _rec(1, 1.0), _rec(2, 2.0)])
    assert [r["val_mse"] for r in rows] == [1.0, 2.0, 3.0]
    assert [r["rank"] for r in rows] == [1, 2, 3]
    tie = leaderboard([_rec(0, 1.0, batch_size=128), _rec(1, 1.0, batch_size=32)])
    assert [r["batch_size"] for r in tie] == [32, 128]
    assert {"learning_rate", "dropout_p", "val_mape"} <= set(rows[0])
    with pytest.raises(ValueError):
        leaderboard([])


def test_best_interval_trial():
    a = _rec(0, 1.0, dropout_p=0.0)
    b = _rec(1, 2.0, dropout_p=0.1)
    c = _rec(2, 3.0, dropout_p=0.05)
    b.val_mse_interval, c.val_mse_interval = 2.5, 2.2
    assert best_interval_trial([a, b, c]) is c
    assert best_interval_trial([a]) is None


def test_record_round_trip():
    r = _rec(3, math.inf)
    back = TrialRecord.from_dict(json.loads(json.dumps(r.to_dict())))
    assert back.val_mse == math.inf and back.hyperparams == r.hyperparams


def test_lstm_objective_on_real_data(small_prepared):
    space = SearchSpace(batch_size=(64,), window_size=(12,), hidden_layers=(1,), hidden_neurons=(8, 16),
                        learning_rate=(1e-2,), dropout_p=(0.0, 0.1))
    best, trials = tune(space, 3, data=small_prepared, seed=0, epochs=2, interval_passes=5)
    assert len(trials) == 3
    for t in trials:
        assert math.isfinite(t.val_mse) and t.val_mse > 0 and t.train_report.epochs_run == 2
        assert (t.val_mse_interval is not None) == (t.hyperparams["dropout_p"] > 0)
    # the objective's MSE is in kWh on the validation windows
    obj = LstmObjective(small_prepared, epochs=2)
    res = obj(dict(best.hyperparams), best.seed)
    assert res["val_mse"] == best.val_mse
