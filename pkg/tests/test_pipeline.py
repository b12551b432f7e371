import json
import logging

import numpy as np
import pytest

from pdm_risk import nn
from pdm_risk.data_model import Generation, PredictionSet, Window, read_predictions_csv
from pdm_risk.errors import ConfigError, ContractError
from pdm_risk.pipeline import (
    BoostSchedule,
    EnsembleConfig,
    RunOptions,
    boost_run,
    ensemble,
    full_pipeline,
    observed_high_mean,
)
from pdm_risk.synth import SynthConfig, generate_dataset

TINY = nn.ModelConfig(n_layers=1, hidden_size=4, input_size=2, epochs=1, batch_size=16, dropout_rate=0.0)


def _windows(n, gen, labelled, seed=0, prefix="t"):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        y = np.sort(rng.integers(0, 3, 10)) if labelled else None
        out.append(Window(f"{prefix}{i}", gen, rng.normal(size=(10, 2)), y))
    return out


@pytest.fixture(scope="module")
def boosted():
    train = _windows(40, Generation.GEN1, True)
    test = _windows(10, Generation.GEN1, False, 1, "a") + _windows(100, Generation.GEN2, False, 2, "b")
    return train, test, boost_run(train, test, BoostSchedule(), TINY, run_seed=3)


def test_boost_injects_ten_percent_per_iteration(boosted):
    train, test, res = boosted
    assert [e.depth for e in res.log] == [2, 4, 6, 8, 10]
    assert [len(e.injected_trucks) for e in res.log] == [10] * 5
    assert res.log[-1].injected_total == 50
    assert [e.pool_size for e in res.log] == [40, 50, 60, 70, 80]
    names = [c for e in res.log for c in e.injected_trucks]
    assert len(set(names)) == 50 and all(c.startswith("b") for c in names)
    assert res.model.config.n_layers == 10
    assert len(res.iteration_preds) == 5 and res.preds is res.iteration_preds[-1]


def test_injection_is_confidence_ranked(boosted):
    _, test, res = boosted
    first = res.iteration_preds[0]
    conf = first.probs.max(-1).mean(-1)
    gen2 = {w.chassis_id: conf[i] for i, w in enumerate(test) if w.gen is Generation.GEN2}
    ranked = sorted(gen2, key=lambda c: (-gen2[c], c))
    assert res.log[0].injected_trucks == ranked[:10]


def test_boost_is_deterministic(boosted):
    train, test, res = boosted
    again = boost_run(train, test, BoostSchedule(), TINY, run_seed=3)
    assert np.array_equal(again.preds.probs, res.preds.probs)


def test_pseudo_labels_are_frozen(monkeypatch):
    train = _windows(20, Generation.GEN1, True)
    test = _windows(10, Generation.GEN2, False, 2, "b")
    pools = []
    real_train = nn.train

    def spy(model, windows, config=None):
        pools.append({w.chassis_id: w.labels.copy() for w in windows if w.gen is Generation.GEN2})
        return real_train(model, windows, config)

    monkeypatch.setattr(nn, "train", spy)
    sched = BoostSchedule(depths=(1, 1, 1), n_iterations=3, gen2_fraction_per_iter=0.2)
    boost_run(train, test, sched, TINY, run_seed=0)
    assert [len(p) for p in pools] == [0, 2, 4]
    for cid, y in pools[1].items():
        assert np.array_equal(pools[2][cid], y)


def test_no_gen2_falls_back_with_warning(caplog):
    train = _windows(20, Generation.GEN1, True)
    test = _windows(5, Generation.GEN1, False, 1, "a")
    with caplog.at_level(logging.WARNING):
        res = boost_run(train, test, BoostSchedule(), TINY, run_seed=0)
    assert "no gen2" in caplog.text
    assert len(res.log) == 1 and res.log[0].depth == 10


def test_exhausted_pool_injects_remainder():
    train = _windows(20, Generation.GEN1, True)
    test = _windows(5, Generation.GEN2, False, 2, "b")
    sched = BoostSchedule(depths=(1, 1, 1), n_iterations=3, gen2_fraction_per_iter=0.3)
    res = boost_run(train, test, sched, TINY, run_seed=0)
    assert [len(e.injected_trucks) for e in res.log] == [2, 2, 1]
    assert res.log[-1].exhausted


def test_schedule_validation():
    with pytest.raises(ConfigError):
        BoostSchedule(depths=(2, 4), n_iterations=5)
    with pytest.raises(ConfigError):
        BoostSchedule(gen2_fraction_per_iter=0.3)
    with pytest.raises(ContractError):
        boost_run(_windows(2, Generation.GEN2, True), [], BoostSchedule(), TINY, 0)


def _run(labels, probs=None):
    keys = tuple((f"c{i}", Generation.GEN1, 0) for i in range(len(labels)))
    labels = np.asarray(labels)
    if probs is None:
        probs = np.eye(3)[labels] * 0.7 + 0.1
    return PredictionSet(keys, labels, probs)


def test_ensemble_majority_and_tie():
    votes = [2, 1, 2, 0, 2]
    runs = [_run([[v] * 10]) for v in votes]
    assert ensemble(runs).labels[0].tolist() == [2] * 10
    tie_votes = [0, 0, 1, 1, 2]
    probs = [np.full((1, 10, 3), p) for p in ([0.5, 0.4, 0.1], [0.5, 0.4, 0.1], [0.1, 0.8, 0.1],
                                               [0.1, 0.8, 0.1], [0.2, 0.2, 0.6])]
    runs = [_run([[v] * 10], p) for v, p in zip(tie_votes, probs)]
    assert ensemble(runs).labels[0, 0] == 1
    assert ensemble(runs, EnsembleConfig(tie_break="higher_risk")).labels[0, 0] == 1
    assert np.allclose(ensemble(runs).probs[0, 0], [0.28, 0.52, 0.2])


def test_ensemble_identity_closure_and_order():
    rng = np.random.default_rng(0)
    runs = [_run(rng.integers(0, 3, (6, 10))) for _ in range(5)]
    single = ensemble(runs[:1])
    assert np.array_equal(single.labels, runs[0].labels)
    out = ensemble(runs)
    stack = np.stack([r.labels for r in runs])
    assert np.all((stack == out.labels[None]).any(axis=0))
    assert np.array_equal(ensemble(runs[::-1]).labels, out.labels)


def test_ensemble_key_mismatch():
    a = _run([[0] * 10])
    b = PredictionSet((("other", Generation.GEN1, 0),), np.zeros((1, 10), int))
    with pytest.raises(ContractError, match="other"):
        ensemble([a, b])


def test_observed_high_mean():
    wins = [Window("a", Generation.GEN1, np.zeros((10, 1)), [0] * 7 + [2] * 3),
            Window("b", Generation.GEN1, np.zeros((10, 1)), [1] * 5 + [2] * 5),
            Window("c", Generation.GEN1, np.zeros((10, 1)), [0] * 10)]
    assert observed_high_mean(wins) == 4.0


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = SynthConfig(n_train_trucks=30, n_test_trucks_gen1=10, n_test_trucks_gen2=10, n_features=4, seed=7)
    generate_dataset(cfg, root / "data")
    d = root / "data"
    model = nn.ModelConfig(hidden_size=4, input_size=1, epochs=1)
    sched = BoostSchedule(depths=(1, 2), n_iterations=2, gen2_fraction_per_iter=0.5)
    res = full_pipeline(root / "run", d / "train_gen1.csv", d / "public_X_test.csv", d / "ground_truth.csv",
                        sched, EnsembleConfig(n_runs=3, base_seed=7), model, RunOptions())
    return root, res


def test_full_pipeline_artifacts(small_run):
    root, res = small_run
    run = root / "run"
    for name in ("preds/predictions.csv", "reports/eval.json", "reports/repair.txt", "manifest.json",
                 "reports/preprocess.txt", "reports/diagnostics.json"):
        assert (run / name).exists(), name
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == [f"run{r}_final.npz" for r in range(3)]
    manifest = json.loads((run / "manifest.json").read_text())
    assert [r["seed"] for r in manifest["runs"]] == [7, 8, 9]
    assert all(r["final_depth"] == 2 for r in manifest["runs"])
    back = read_predictions_csv(run / "preds/predictions.csv")
    assert len(back) == 20
    assert np.all(np.diff(back.labels, axis=1) >= 0)
    assert res.report is not None and 0 <= res.report.final_score <= 1
