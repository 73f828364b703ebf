"""Metric oracles: exhaustive pairwise AUROC, published-table fixtures,
aggregation arithmetic."""

from types import SimpleNamespace

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from crosstask import evaluate as ev
from crosstask.errors import (ConfigError, UndefinedCorrelationError,
                              UndefinedMetricError)


def pairwise_auroc_oracle(scores, labels):
    """Independent O(n^2) oracle: count positive-over-negative wins."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


class TestAuroc:
    def test_perfect_ordering(self):
        assert ev.auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_hand_case(self):
        scores = [0.1, 0.4, 0.35, 0.8]
        labels = [0, 0, 1, 1]
        assert ev.auroc(scores, labels) == pytest.approx(0.75)
        assert pairwise_auroc_oracle(scores, labels) == pytest.approx(0.75)

    def test_all_scores_equal_gives_half(self):
        assert ev.auroc([0.3, 0.3, 0.3, 0.3], [0, 1, 0, 1]) == pytest.approx(0.5)

    def test_single_class_error(self):
        with pytest.raises(UndefinedMetricError):
            ev.auroc([0.1, 0.9], [1, 1])

    def test_matches_oracles_on_random_draws_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(4, 40))
            scores = rng.integers(0, 5, size=n) / 4.0  # force ties
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                continue
            mine = ev.auroc(scores, labels)
            assert mine == pytest.approx(pairwise_auroc_oracle(scores, labels))
            assert mine == pytest.approx(roc_auc_score(labels, scores))

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=30)
        labels = rng.integers(0, 2, size=30)
        labels[0], labels[1] = 0, 1
        base = ev.auroc(scores, labels)
        assert ev.auroc(np.exp(scores), labels) == pytest.approx(base)
        assert ev.auroc(3 * scores + 7, labels) == pytest.approx(base)

    def test_flip_identity(self):
        rng = np.random.default_rng(2)
        scores = rng.normal(size=25)
        labels = rng.integers(0, 2, size=25)
        labels[0], labels[1] = 0, 1
        total = ev.auroc(scores, labels) + ev.auroc(scores, 1 - labels)
        assert total == pytest.approx(1.0)


def _record(variant, seed, aurocs):
    return SimpleNamespace(variant_name=variant, seed=seed,
                           test_auroc=dict(enumerate(aurocs)))


class TestAggregate:
    def test_identical_runs_zero_stderr(self):
        records = [_record("m", s, [0.7, 0.8]) for s in range(3)]
        table = ev.aggregate(records, n_runs=3)
        assert table.stderr["m"][0] == 0.0
        assert table.mean["m"][1] == pytest.approx(0.8)

    def test_two_value_stderr(self):
        records = [_record("m", 0, [0.6]), _record("m", 1, [0.7])]
        table = ev.aggregate(records, n_runs=2)
        assert table.mean["m"][0] == pytest.approx(0.65)
        assert table.stderr["m"][0] == pytest.approx(0.05)

    def test_macro_average_cross_check_published_row(self):
        # per-task means 0.7081/0.7173/0.7112: the task-mean macro is 0.7122,
        # not the published 0.7102 row average (which averaged runs first)
        records = [_record("m", s, [0.7081, 0.7173, 0.7112]) for s in range(2)]
        table = ev.aggregate(records, n_runs=2)
        assert round(table.macro_mean("m"), 4) == pytest.approx(0.7122)
        assert table.macro_mean("m") != pytest.approx(0.7102, abs=1e-4)

    def test_permutation_invariance(self):
        records = [_record("a", 0, [0.5, 0.6]), _record("a", 1, [0.7, 0.8]),
                   _record("b", 0, [0.9, 0.4]), _record("b", 1, [0.3, 0.2])]
        fwd = ev.aggregate(records, n_runs=2)
        rev = ev.aggregate(records[::-1], n_runs=2)
        assert fwd.mean == rev.mean and fwd.stderr == rev.stderr

    def test_single_run_rejected(self):
        with pytest.raises(ConfigError):
            ev.aggregate([_record("m", 0, [0.5])], n_runs=None)

    def test_missing_cell_rejected(self):
        records = [_record("m", 0, [0.5, 0.6]),
                   SimpleNamespace(variant_name="m", seed=1,
                                   test_auroc={0: 0.5})]
        with pytest.raises(ConfigError):
            ev.aggregate(records, n_runs=2)

    def test_text_rendering(self):
        records = [_record("m", s, [0.7, 0.8]) for s in range(2)]
        text = ev.aggregate(records, n_runs=2).to_text()
        assert "macro" in text and "0.7000" in text


class TestNegativeTransfer:
    def test_identical_tables_zero_flags(self):
        row = {"a": 0.7, "b": 0.8}
        report = ev.negative_transfer_report(row, {"mtl": dict(row)})
        assert report["flags"] == []
        assert report["counts_per_variant"] == {"mtl": 0}

    def test_published_mimic_rows_flag_pattern(self):
        stl = {"Fever": 0.6738, "Infection": 0.6860, "Mortality": 0.6373}
        mtl = {"mtl_lstm": {"Fever": 0.7006, "Infection": 0.6686,
                            "Mortality": 0.6261}}
        report = ev.negative_transfer_report(stl, mtl)
        flagged = {(f["variant"], f["task"]) for f in report["flags"]}
        assert flagged == {("mtl_lstm", "Infection"), ("mtl_lstm", "Mortality")}
        assert report["counts_per_variant"]["mtl_lstm"] == 2

    def test_constructed_single_flag(self):
        stl = {"x": 0.75, "y": 0.6}
        mtl = {"v": {"x": 0.74, "y": 0.65}}
        report = ev.negative_transfer_report(stl, mtl)
        assert len(report["flags"]) == 1
        assert report["flags"][0]["task"] == "x"

    def test_task_set_mismatch(self):
        with pytest.raises(ConfigError):
            ev.negative_transfer_report({"a": 0.5}, {"v": {"b": 0.5}})

    def test_standard_error_slack(self):
        table = ev.ResultTable.from_cells(
            {"v": {"a": (0.69, 0.02)}}, tasks=["a"])
        strict = ev.negative_transfer_report({"a": 0.70}, table,
                                             stl_stderr={"a": 0.02})
        assert len(strict["flags"]) == 1
        slacked = ev.negative_transfer_report({"a": 0.70}, table, se_slack=1.0,
                                              stl_stderr={"a": 0.02})
        assert slacked["flags"] == []


def _trace(task, variance, outgoing, incoming):
    variance = np.asarray(variance, dtype=float)
    return ev.UncertaintyTrace(task=task, epistemic=variance,
                               aleatoric=np.zeros_like(variance),
                               outgoing=np.asarray(outgoing, dtype=float),
                               incoming=np.asarray(incoming, dtype=float))


class TestCorrelation:
    def test_monotone_decreasing_gives_minus_one(self):
        variance = np.linspace(1, 2, 25)
        outgoing = -variance
        incoming = variance * 0.5
        stats = ev.uncertainty_transfer_correlation(
            [_trace(0, variance, outgoing, incoming)])
        assert stats["outgoing"]["rho"] == pytest.approx(-1.0)
        assert stats["incoming"]["rho"] == pytest.approx(1.0)

    def test_duplicated_series_gives_plus_one(self):
        variance = np.linspace(0.1, 0.9, 30)
        stats = ev.uncertainty_transfer_correlation(
            [_trace(0, variance, variance.copy(), variance.copy())])
        assert stats["outgoing"]["rho"] == pytest.approx(1.0)

    def test_independent_series_near_zero(self):
        rng = np.random.default_rng(3)
        variance = rng.normal(size=1000) ** 2
        stats = ev.uncertainty_transfer_correlation(
            [_trace(0, variance, rng.normal(size=1000),
                    rng.normal(size=1000))])
        assert abs(stats["outgoing"]["rho"]) < 0.1
        assert abs(stats["incoming"]["rho"]) < 0.1

    def test_constant_series_undefined(self):
        variance = np.ones(40)
        with pytest.raises(UndefinedCorrelationError):
            ev.uncertainty_transfer_correlation(
                [_trace(0, variance, np.arange(40.0), np.arange(40.0))])

    def test_too_few_points_rejected(self):
        with pytest.raises(ConfigError):
            ev.uncertainty_transfer_correlation(
                [_trace(0, np.arange(5.0) + 1, np.arange(5.0),
                        np.arange(5.0))])
