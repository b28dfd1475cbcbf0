import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prgnn.data import random_graph
from prgnn.interpret import (ScoreRecord, collect_scores, jaccard, overlap, planted_recovery,
                             read_label_map, salient_nodes, score_histogram_series, write_histogram_csv,
                             write_overlap_csv, write_ranked_csv, write_records_csv)
from prgnn.model import ModelConfig, PrGnnModel
from prgnn.train import N_BINS, EpochReport


def _record(scores, label=1, l1=(0,), l2=(0,), iid="i"):
    return ScoreRecord(iid, "s", label, np.asarray(scores, float), np.array(l1), np.array(l2))


def _report(epoch, hists):
    return EpochReport(epoch, 0.001, 0.5, [0.1, 0.1], 0.0, 0.52, 0.5, None, hists, [0.5, 0.5], [0.5, 0.5])


def test_jaccard_examples():
    assert jaccard(range(21), range(21)) == 1.0
    assert jaccard(range(21), range(21, 42)) == 0.0
    assert jaccard(range(0, 21), range(10, 31)) == pytest.approx(11 / 31)


def test_collect_scores_structure():
    rng = np.random.default_rng(0)
    graphs = [random_graph(rng, 12, label=i % 2, subject_id=f"s{i}") for i in range(10)]
    records = collect_scores(PrGnnModel.initialize(ModelConfig(in_dim=12), 0), graphs)
    assert len(records) == 10
    for r in records:
        assert set(r.layer2_kept) <= set(r.layer1_kept) <= set(range(12))
        assert len(r.surviving_scores()) == 3


def test_salient_single_record_and_ties():
    r = _record([0.1, 0.7, 0.4])
    assert [s.node_id for s in salient_nodes([r], 1)] == [1, 2, 0]
    a, b = _record([0.2, 0.8]), _record([0.8, 0.2])
    ranking = salient_nodes([a, b], 1)
    assert [s.node_id for s in ranking] == [0, 1] and ranking[0].mean_score == 0.5
    with pytest.raises(ValueError):
        salient_nodes([a], 0)


def test_planted_recovery_counts():
    r = salient_nodes([_record([0.9, 0.1, 0.8, 0.2])], 1, top_m=2)
    rec = planted_recovery(r, [0, 1])
    assert rec["hits"] == 1 and rec["planted_ranks"] == {0: 1}


def test_overlap_matrix():
    recs = [_record([0], l2=[0, 1, 2]), _record([0], l2=[0, 1, 2]), _record([0], l2=[3, 4, 5])]
    mat, mean = overlap(recs)
    np.testing.assert_array_equal(mat, [[1, 1, 0], [1, 1, 0], [0, 0, 1]])
    assert mean == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        overlap(recs[:1])
    with pytest.raises(ValueError):
        overlap(recs, level="layer3")


def test_histogram_series_uniform_half():
    counts = np.histogram(np.full(84, 0.5), bins=N_BINS, range=(0, 1))[0].tolist()
    rows = score_histogram_series([_report(1, [counts, counts[:]])])
    mass = {(r[2], r[3]): r[4] for r in rows if r[1] == 1 and r[4]}
    assert mass == {(0.5, 0.55): 84}
    assert sum(r[4] for r in rows if r[1] == 2) == 84
    with pytest.raises(ValueError):
        score_histogram_series([])


def test_csv_writers(tmp_path):
    recs = [_record([0.3, 0.9], l1=[1], l2=[1], iid="a"), _record([0.5, 0.1], l1=[0], l2=[0], iid="b")]
    ranking = salient_nodes(recs, 1)
    write_ranked_csv(tmp_path / "r.csv", ranking, {1: "thalamus"})
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["node_id", "mean_score", "rank", "name"] and rows[1][3] == "thalamus"
    mat, _ = overlap(recs)
    write_overlap_csv(tmp_path / "o.csv", recs, mat)
    assert list(csv.reader(open(tmp_path / "o.csv")))[1] == ["a", "b", "0.0"]
    write_records_csv(tmp_path / "s.csv", recs)
    assert len(list(csv.reader(open(tmp_path / "s.csv")))) == 3
    write_histogram_csv(tmp_path / "h.csv", [(1, 1, 0.0, 0.05, 3)])
    assert open(tmp_path / "h.csv").read().splitlines()[1] == "1,1,0.00,0.05,3"


def test_label_map_reader(tmp_path):
    p = tmp_path / "names.csv"
    p.write_text("node_id,name\n0,left thalamus\n3,right putamen\nbad,row\n")
    assert read_label_map(p) == {0: "left thalamus", 3: "right putamen"}


@settings(max_examples=50, deadline=None)
@given(st.sets(st.integers(0, 83), max_size=30), st.sets(st.integers(0, 83), max_size=30))
def test_jaccard_properties(a, b):
    j = jaccard(sorted(a), sorted(b))
    assert 0.0 <= j <= 1.0
    assert j == jaccard(sorted(b), sorted(a))
    assert (j == 1.0) == (a == b)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(2, 20), st.integers(0, 1000))
def test_salient_is_permutation(m, n, seed):
    rng = np.random.default_rng(seed)
    recs = [_record(rng.uniform(size=n)) for _ in range(m)]
    ranking = salient_nodes(recs, 1)
    assert sorted(s.node_id for s in ranking) == list(range(n))
    means = [s.mean_score for s in ranking]
    assert means == sorted(means, reverse=True)
