import csv
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import f1_score

from mossda.errors import AggregationError, ContractError
from mossda.eval import (
    ScenarioResult,
    accuracy,
    aggregate_scenarios,
    confusion_matrix,
    macro_f1,
    mean_rank,
    per_class_scores,
    score,
    write_summary_csv,
)

label_pairs = st.integers(2, 6).flatmap(
    lambda C: st.tuples(
        st.just(C),
        st.lists(st.tuples(st.integers(0, C - 1), st.integers(0, C - 1)), min_size=1, max_size=40),
    )
)


def result(acc, f1, dataset="syn", u=0.9, backbone="cnn", mode="two_stage", seed=0):
    return ScenarioResult("a->b", dataset, u, backbone, mode, acc, f1, seed=seed)


class TestAccuracy:
    def test_examples(self):
        assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
        assert accuracy([1, 2, 0], [0, 1, 2]) == 0.0
        assert accuracy([0, 1, 1, 1], [0, 1, 1, 2]) == 0.75

    def test_contract(self):
        with pytest.raises(ContractError):
            accuracy([0, 1], [0])
        with pytest.raises(ContractError):
            accuracy([], [])


class TestMacroF1:
    def test_perfect(self):
        assert macro_f1([0, 1, 2, 2], [0, 1, 2, 2], 3) == 1.0

    def test_binary_hand_example(self):
        # class 0: P=1/2 R=1 -> 2/3 ; class 1: P=1 R=2/3 -> 4/5
        assert macro_f1([0, 0, 1, 1], [0, 1, 1, 1], 2) == pytest.approx(11 / 15, abs=1e-12)

    def test_absent_class_counts_zero(self):
        assert macro_f1([0, 1], [0, 1], 3) == pytest.approx(2 / 3)

    def test_label_range(self):
        with pytest.raises(ContractError):
            macro_f1([0, 3], [0, 1], 3)

    @settings(max_examples=100, deadline=None)
    @given(label_pairs)
    def test_matches_sklearn(self, data):
        C, pairs = data
        pred, truth = zip(*pairs)
        expected = f1_score(truth, pred, labels=list(range(C)), average="macro", zero_division=0)
        assert macro_f1(pred, truth, C) == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(label_pairs, st.randoms(use_true_random=False))
    def test_relabeling_invariance(self, data, rnd):
        C, pairs = data
        pred, truth = map(np.array, zip(*pairs))
        perm = np.array(rnd.sample(range(C), C))
        assert macro_f1(perm[pred], perm[truth], C) == pytest.approx(macro_f1(pred, truth, C), abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(label_pairs)
    def test_confusion_consistency(self, data):
        C, pairs = data
        pred, truth = zip(*pairs)
        cm = confusion_matrix(pred, truth, C)
        assert accuracy(pred, truth) == np.trace(cm) / cm.sum()
        assert np.array_equal(cm.sum(1), np.bincount(truth, minlength=C))
        s = score(pred, truth, C)
        assert s["accuracy"] == accuracy(pred, truth)
        _, _, f1 = per_class_scores(cm)
        assert s["macro_f1"] == pytest.approx(float(np.mean(f1)), abs=1e-15)


class TestAggregate:
    def test_single(self):
        (row,) = aggregate_scenarios([result(0.8, 0.7)])
        assert row["mean_acc"] == 0.8 and row["std_acc"] == 0.0 and row["n"] == 1

    def test_two(self):
        (row,) = aggregate_scenarios([result(0.9, 0.5), result(0.7, 0.5)])
        assert row["mean_acc"] == pytest.approx(0.8)
        assert row["std_f1"] == 0.0

    def test_empty(self):
        with pytest.raises(AggregationError):
            aggregate_scenarios([])

    def test_groups_against_recomputation(self):
        rng = random.Random(0)
        results = [
            result(rng.random(), rng.random(), dataset=d, u=u, backbone=b, seed=s)
            for d in ("A", "B") for u in (0.7, 0.9) for b in ("cnn", "tcn") for s in range(5)
        ]
        rows = aggregate_scenarios(results)
        assert len(rows) == 8
        for row in rows:
            members = [r for r in results if (r.dataset, r.u, r.backbone) == (row["dataset"], row["u"], row["backbone"])]
            accs = np.array([r.accuracy for r in members])
            f1s = np.array([r.macro_f1 for r in members])
            assert row["mean_acc"] == pytest.approx(accs.mean(), abs=1e-9)
            assert row["std_acc"] == pytest.approx(accs.std(), abs=1e-9)
            assert row["mean_f1"] == pytest.approx(f1s.mean(), abs=1e-9)
            assert row["std_f1"] == pytest.approx(f1s.std(), abs=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.randoms(use_true_random=False))
    def test_order_invariant(self, accs, rnd):
        results = [result(a, 1 - a, mode=rnd.choice(["x", "y"])) for a in accs]
        shuffled = results[:]
        rnd.shuffle(shuffled)
        assert aggregate_scenarios(results) == aggregate_scenarios(shuffled)

    def test_summary_csv(self, tmp_path):
        rows = aggregate_scenarios([result(0.9, 0.8), result(0.5, 0.4, mode="no_ctr")])
        path = write_summary_csv(rows, tmp_path / "summary.csv")
        with open(path) as fh:
            read = list(csv.DictReader(fh))
        assert list(read[0]) == ["dataset", "u", "backbone", "mode", "n", "mean_acc", "std_acc", "mean_f1", "std_f1"]
        assert [r["mode"] for r in read] == ["no_ctr", "two_stage"]

    def test_accuracy_range(self):
        with pytest.raises(ContractError):
            result(1.2, 0.5)


def test_mean_rank():
    ranks = mean_rank({"a": [0.9, 0.5], "b": [0.8, 0.7], "c": [0.8, 0.1]})
    assert ranks == {"a": 1.5, "b": 1.75, "c": 2.75}
