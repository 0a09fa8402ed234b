import csv
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from sdgma.datamodel import DomainDataset, LabelSet, build_unida_task
from sdgma.evaluation import (
    UNKNOWN_NAME, averages_from_confusion, export_embeddings, score, score_cached,
    threshold_sweep,
)
from sdgma.ma import TargetScores, init_bundle
from sdgma.netcore import Classifier, FeatureExtractor, PretrainedModel, StyleNetwork

TASK = build_unida_task(["a", "b", "s"], ["a", "b", "p", "q"])


def test_protocol_example():
    truth = {"1": "a", "2": "a", "3": "b", "4": "b", "5": "p", "6": "q"}
    pred = {"1": "a", "2": "a", "3": "b", "4": "a", "5": None, "6": "b"}
    rep = score(pred, truth, TASK)
    assert rep.per_class == {"a": 1.0, "b": 0.5, UNKNOWN_NAME: 0.5}
    assert rep.avg_shared == pytest.approx(0.75)
    assert rep.avg_all == pytest.approx(2 / 3)
    assert rep.unknown_accuracy == 0.5
    assert rep.counts == {"a": 2, "b": 2, UNKNOWN_NAME: 2}


def test_all_correct_and_all_unknown():
    truth = {"1": "a", "2": "b", "3": "p"}
    assert score({"1": "a", "2": "b", "3": "unknown"}, truth, TASK).avg_all == 1.0
    rep = score({k: None for k in truth}, truth, TASK)
    assert rep.per_class == {"a": 0.0, "b": 0.0, UNKNOWN_NAME: 1.0}


def test_absent_shared_class_excluded():
    rep = score({"1": "a", "2": None}, {"1": "a", "2": "q"}, TASK)
    assert set(rep.per_class) == {"a", UNKNOWN_NAME} and rep.avg_all == 1.0


def test_id_mismatch():
    with pytest.raises(ValueError):
        score({"1": "a"}, {"2": "a"}, TASK)


labels = st.sampled_from(["a", "b", "p", "q"])
preds = st.sampled_from(["a", "b", "s", None])


@given(st.lists(st.tuples(labels, preds), min_size=1, max_size=60), st.randoms())
def test_score_matches_oracle_and_is_permutation_invariant(pairs, rnd):
    truth = {str(i): t for i, (t, _) in enumerate(pairs)}
    pred = {str(i): p for i, (_, p) in enumerate(pairs)}
    rep = score(pred, truth, TASK)
    acc, avg_sh, avg_all = oracles.per_class_average([t for t, _ in pairs],
                                                     [p for _, p in pairs], {"a", "b"})
    assert rep.per_class == pytest.approx(acc)
    assert rep.avg_all == pytest.approx(avg_all)
    assert (np.isnan(avg_sh) and np.isnan(rep.avg_shared)) or rep.avg_shared == pytest.approx(avg_sh)
    again = averages_from_confusion(rep.confusion)
    assert again[2] == rep.avg_all
    keys = list(truth)
    rnd.shuffle(keys)
    shuffled = score({k: pred[k] for k in keys}, {k: truth[k] for k in keys}, TASK)
    assert shuffled.avg_all == rep.avg_all and shuffled.per_class == rep.per_class


def test_reported_xi_and_exports(tmp_path):
    from sdgma.datamodel import BENCHMARK_CLASSES
    task = build_unida_task(BENCHMARK_CLASSES["RSSCN7"], BENCHMARK_CLASSES["UCM"])
    truth = {"0": "farmland", "1": "airplane"}
    rep = score({"0": "farmland", "1": None}, truth, task, w0=0.8)
    assert rep.jaccard == pytest.approx(5 / 23) and rep.jaccard_reported == 0.18
    assert "0.2174" in rep.table() and "0.18" in rep.table()
    rep.to_json(tmp_path / "m.json")
    data = json.loads((tmp_path / "m.json").read_text())
    assert data["avg_all"] == 1.0 and data["w0"] == 0.8
    rep.to_csv(tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["class", "accuracy", "n_samples"] and rows[-1][0] == "avg_all"


def _target(n=40, seed=0):
    rng = np.random.default_rng(seed)
    names = ["a", "b", "p", "q"]
    lab = np.arange(n) % 4
    return DomainDataset("target", rng.uniform(size=(n, 32, 32, 3)), lab, LabelSet(names))


def _scores(tgt, seed=0):
    rng = np.random.default_rng(seed)
    n = len(tgt)
    d, conf = rng.uniform(size=n), rng.uniform(0.4, 1, size=n)
    return TargetScores(list(tgt.ids), d, conf, rng.integers(3, size=n), d + conf)


def test_threshold_sweep_edges_and_monotone():
    tgt = _target()
    s = _scores(tgt)
    curve = threshold_sweep(None, tgt, TASK, [0.0], scores=s)
    assert curve[0][2] == 0.0
    curve = threshold_sweep(None, tgt, TASK, [2.0], scores=s)
    assert curve[0][2] == 1.0
    rep = score_cached(s, tgt, TASK, 2.0)
    assert rep.per_class["a"] == 0.0 and rep.per_class["b"] == 0.0
    curve = threshold_sweep(None, tgt, TASK, np.linspace(0, 2, 101), scores=s)
    unk = [c[2] for c in curve]
    assert len(curve) == 101 and all(x <= y for x, y in zip(unk, unk[1:]))
    with pytest.raises(ValueError):
        threshold_sweep(None, tgt, TASK, [], scores=s)


def test_threshold_sweep_single_forward_pass(monkeypatch):
    torch.manual_seed(0)
    M = PretrainedModel(FeatureExtractor(), Classifier(128, 3))
    bundle = init_bundle(M, StyleNetwork())
    tgt = _target(12)
    calls = []
    orig = bundle.F.forward
    monkeypatch.setattr(bundle.F, "forward", lambda x: calls.append(len(x)) or orig(x))
    curve = threshold_sweep(bundle, tgt, TASK, np.linspace(0, 2, 100))
    assert len(curve) == 100 and len(calls) == 1


def test_export_embeddings(tmp_path):
    torch.manual_seed(0)
    M = PretrainedModel(FeatureExtractor(), Classifier(128, 3))
    bundle = init_bundle(M, StyleNetwork())
    tgt = _target(6)
    src = DomainDataset("real_source", tgt.images, np.arange(6) % 3, LabelSet(["a", "b", "s"]))
    rows = export_embeddings(bundle, {"real_source": src, "target": tgt}, tmp_path / "e.csv")
    assert len(rows) == 12
    assert np.array_equal(rows[0][3], rows[6][3]) and rows[0][1] != rows[6][1]
    header = next(csv.reader(open(tmp_path / "e.csv")))
    assert len(header) == 3 + 128
