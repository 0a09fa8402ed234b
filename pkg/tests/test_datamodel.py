import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from sdgma.datamodel import (
    BENCHMARK_CLASSES, BENCHMARK_TASKS, DomainDataset, ExperimentConfig, LabelAccessError,
    LabelSet, ValidationError, benchmark_task, build_unida_task, default_threshold,
    ingest_folder_dataset, jaccard_index,
)


def test_labelset_rejects_duplicates():
    with pytest.raises(ValidationError):
        LabelSet(["a", "b", "a"])
    ls = LabelSet(["x", "y", "z"])
    assert [ls.index(n) for n in ls] == [0, 1, 2]


@pytest.mark.parametrize("src,tgt,counts,xi", [
    ("RSSCN7", "UCM", (5, 2, 16), Fraction(5, 23)),
    ("RSSCN7", "AID", (6, 1, 24), Fraction(6, 31)),
    ("RSSCN7", "NWPU", (6, 1, 39), Fraction(6, 46)),
    ("AID", "NWPU", (20, 10, 25), Fraction(20, 55)),
])
def test_benchmark_partitions(src, tgt, counts, xi):
    task = benchmark_task(src, tgt)
    assert (len(task.shared), len(task.source_private), len(task.target_private)) == counts
    assert task.jaccard == pytest.approx(float(xi), abs=1e-12)
    assert jaccard_index(task) == task.jaccard


def test_benchmark_dataset_sizes():
    assert {k: len(v) for k, v in BENCHMARK_CLASSES.items()} == {
        "RSSCN7": 7, "UCM": 21, "AID": 30, "NWPU": 45}


def test_printed_xi_follows_sum_denominator():
    # The printed task-table values agree with |Y| / (|Yf| + |Yt|) to 2 d.p.,
    # not with the union formula.
    for (s, t), printed in BENCHMARK_TASKS.items():
        task = benchmark_task(s, t)
        assert round(task.jaccard_sum_convention, 2) == printed
        assert abs(task.jaccard - printed) > 0.01


def test_spec_examples():
    t = build_unida_task(list("abcd"), list("abcd"))
    assert len(t.shared) == 4 and not t.source_private.names and t.jaccard == 1.0
    t = build_unida_task(["a", "b"], ["c", "d"])
    assert len(t.shared) == 0 and t.jaccard == 0.0
    with pytest.raises(ValidationError):
        build_unida_task(["a", "a"], ["b"])
    with pytest.raises(ValidationError):
        build_unida_task([], ["b"])


def test_default_threshold():
    assert default_threshold(benchmark_task("AID", "NWPU")) == 0.6
    assert default_threshold(benchmark_task("RSSCN7", "NWPU")) == 0.8
    assert default_threshold(build_unida_task(list("abcdef"), list("abcdghi"))) == 0.6


names = st.lists(st.sampled_from([f"c{i}" for i in range(12)]), min_size=1, max_size=12,
                 unique=True)


@given(names, names)
def test_partition_reassembles(a, b):
    t = build_unida_task(a, b)
    assert set(t.shared.names) | set(t.source_private.names) == set(a)
    assert set(t.shared.names) | set(t.target_private.names) == set(b)
    assert not set(t.shared.names) & set(t.source_private.names)
    assert not set(t.shared.names) & set(t.target_private.names)
    assert 0.0 <= t.jaccard <= 1.0
    assert t.jaccard == pytest.approx(len(set(a) & set(b)) / len(set(a) | set(b)))


@given(names, names, st.randoms())
def test_jaccard_symmetric_and_order_free(a, b, rnd):
    xi = build_unida_task(a, b).jaccard
    assert build_unida_task(b, a).jaccard == pytest.approx(xi)
    a2, b2 = a[:], b[:]
    rnd.shuffle(a2)
    rnd.shuffle(b2)
    assert build_unida_task(a2, b2).jaccard == pytest.approx(xi)


def _write_png(path, color):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((8, 8, 3), color, np.uint8)).save(path)


def test_ingest_folder(tmp_path):
    for i in range(2):
        _write_png(tmp_path / "forest" / f"{i}.png", 10 * i)
    for i in range(3):
        _write_png(tmp_path / "farmland" / f"{i}.png", 255)
    (tmp_path / "forest" / "broken.png").write_bytes(b"not an image")
    ds = ingest_folder_dataset(tmp_path, "target", image_size=16)
    assert len(ds) == 5 and len(ds.label_set) == 2
    assert ds.label_set.names == ("farmland", "forest")
    assert ds.images.shape == (5, 16, 16, 3)
    assert ds.images.min() >= 0 and ds.images.max() == pytest.approx(1.0)
    with pytest.raises(LabelAccessError):
        ds.training_labels()
    assert list(ds.evaluation_labels()) == [0, 0, 0, 1, 1]
    again = ingest_folder_dataset(tmp_path, "target", image_size=16)
    assert again.ids == ds.ids and np.array_equal(again.images, ds.images)


def test_ingest_empty_class(tmp_path):
    _write_png(tmp_path / "a" / "0.png", 0)
    (tmp_path / "b").mkdir()
    with pytest.raises(ValidationError):
        ingest_folder_dataset(tmp_path, "real_source")
    with pytest.raises(ValidationError):
        ingest_folder_dataset(tmp_path / "nope", "real_source")


def test_dataset_validation():
    ls = LabelSet(["a", "b"])
    img = np.zeros((2, 4, 4, 3))
    with pytest.raises(ValidationError):
        DomainDataset("other", img, [0, 1], ls)
    with pytest.raises(ValidationError):
        DomainDataset("real_source", img, [0, 2], ls)
    ds = DomainDataset("real_source", img, [0, 1], ls)
    assert list(ds.training_labels()) == [0, 1]


def test_config_roundtrip(tmp_path):
    cfg = ExperimentConfig(seed=3, ma_steps=10, w0=0.7)
    for suffix in ("yaml", "json"):
        p = tmp_path / f"c.{suffix}"
        cfg.save(p)
        assert ExperimentConfig.load(p) == cfg
    with pytest.raises(ValidationError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ValidationError):
        cfg.replace(bogus=1)


@pytest.mark.parametrize("bad", [dict(batch_size=0), dict(w0=-0.1), dict(ma_steps=-1),
                                 dict(samples_per_class=0)])
def test_config_rejects(bad):
    with pytest.raises(ValidationError):
        ExperimentConfig(**bad)


def test_config_method():
    cfg = ExperimentConfig()
    assert cfg.method == "sdg_ma"
    assert cfg.replace(source_available=True).method == "ma"
    assert cfg.replace(ma_only=True).method == "ma_only"
    assert cfg.replace(source_only=True).method == "source_only"
