import csv
import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import plain_metrics
from vetpv.matrix import DEATH, RECOVERED
from vetpv.metrics import (
    Confusion,
    MetricsError,
    confusion,
    evaluate,
    metrics,
    results_table,
)


class TestConfusion:
    def test_perfect_predictions(self):
        truth = np.array([DEATH, RECOVERED, DEATH, RECOVERED])
        conf = confusion(truth, truth)
        assert (conf.tp, conf.fp, conf.tn, conf.fn) == (2, 0, 2, 0)

    def test_all_deaths_missed(self):
        truth = np.array([DEATH, DEATH, RECOVERED])
        predicted = np.array([RECOVERED, RECOVERED, RECOVERED])
        conf = confusion(truth, predicted)
        assert conf.tp == 0
        assert conf.fn == 2
        assert conf.tn == 1

    def test_counts_match_hand_tally(self, rng):
        truth = rng.integers(0, 2, size=200).astype(np.int8)
        predicted = rng.integers(0, 2, size=200).astype(np.int8)
        conf = confusion(truth, predicted)
        tally = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
        for t, p in zip(truth, predicted):
            if t == DEATH and p == DEATH:
                tally["tp"] += 1
            elif t == RECOVERED and p == DEATH:
                tally["fp"] += 1
            elif t == RECOVERED and p == RECOVERED:
                tally["tn"] += 1
            else:
                tally["fn"] += 1
        assert (conf.tp, conf.fp, conf.tn, conf.fn) == (
            tally["tp"], tally["fp"], tally["tn"], tally["fn"],
        )

    def test_length_mismatch_rejected(self):
        with pytest.raises(MetricsError):
            confusion(np.zeros(3), np.zeros(4))

    def test_empty_rejected(self):
        with pytest.raises(MetricsError):
            confusion(np.zeros(0), np.zeros(0))


class TestMetrics:
    def test_worked_weighted_f1(self):
        # per-class F1 0.5 (Death, support 60) and 0.9 (Recovered, support 240)
        conf = Confusion(tp=25, fp=15, tn=225, fn=35)
        report = metrics(conf)
        assert report.death_f1 == pytest.approx(0.5)
        assert report.recovered_f1 == pytest.approx(0.9)
        assert report.weighted_f1 == pytest.approx(0.2 * 0.5 + 0.8 * 0.9)
        assert report.weighted_f1 == pytest.approx(0.82)

    def test_perfect_predictions_all_ones(self):
        report = metrics(Confusion(tp=10, fp=0, tn=40, fn=0))
        for attr in (
            "weighted_f1", "weighted_precision", "weighted_recall",
            "accuracy", "death_recall", "recovered_recall",
        ):
            assert getattr(report, attr) == 1.0
        assert report.undefined == []

    def test_zero_over_zero_flagged_as_zero(self):
        # no predicted deaths at all: death precision is 0/0
        report = metrics(Confusion(tp=0, fp=0, tn=5, fn=5))
        assert report.death_precision == 0.0
        assert "death_precision" in report.undefined

    def test_twenty_fixed_confusions_match_formula_oracle(self):
        cases = [
            (1, 0, 1, 0), (5, 5, 5, 5), (10, 0, 0, 10), (0, 10, 10, 0),
            (3, 7, 80, 10), (25, 15, 225, 35), (1, 1, 1, 1), (50, 0, 50, 0),
            (2, 8, 85, 5), (30, 10, 55, 5), (12, 3, 70, 15), (7, 0, 90, 3),
            (0, 0, 10, 5), (5, 0, 10, 0), (9, 9, 1, 1), (40, 5, 50, 5),
            (6, 2, 88, 4), (15, 15, 60, 10), (20, 1, 75, 4), (33, 11, 44, 12),
        ]
        assert len(cases) == 20
        for tp, fp, tn, fn in cases:
            report = metrics(Confusion(tp=tp, fp=fp, tn=tn, fn=fn))
            want = plain_metrics(tp, fp, tn, fn)
            for name, value in want.items():
                assert getattr(report, name) == pytest.approx(value, abs=1e-12), (tp, fp, tn, fn, name)

    def test_accuracy_exact(self):
        report = metrics(Confusion(tp=3, fp=2, tn=4, fn=1))
        assert report.accuracy == (3 + 4) / 10

    @given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
    def test_weighted_recall_equals_accuracy(self, tp, fp, tn, fn):
        if tp + fp + tn + fn == 0:
            return
        report = metrics(Confusion(tp=tp, fp=fp, tn=tn, fn=fn))
        assert report.weighted_recall == pytest.approx(report.accuracy, abs=1e-12)
        for attr in ("weighted_f1", "weighted_precision", "weighted_recall", "accuracy"):
            assert 0.0 <= getattr(report, attr) <= 1.0

    def test_evaluate_wraps_confusion(self):
        truth = np.array([DEATH, RECOVERED, RECOVERED])
        predicted = np.array([DEATH, RECOVERED, DEATH])
        assert evaluate(truth, predicted).accuracy == pytest.approx(2 / 3)


class TestResultsTable:
    def test_single_run_table(self):
        report = metrics(Confusion(tp=25, fp=15, tn=225, fn=35))
        csv_text, aligned = results_table([("gbdt", "none", report)])
        lines = aligned.strip().splitlines()
        assert len(lines) == 2
        assert "none/F1" in lines[0]
        assert "0.82" in lines[1]

    def test_text_rounds_half_even_to_two_decimals(self):
        report = metrics(Confusion(tp=25, fp=15, tn=225, fn=35))
        report.weighted_f1 = 0.954999
        _, aligned = results_table([("m", "none", report)])
        assert "0.95" in aligned.splitlines()[1]

    def test_csv_reparse_preserves_full_precision(self):
        report = metrics(Confusion(tp=3, fp=2, tn=4, fn=1))
        csv_text, _ = results_table([("m", "none", report)])
        rows = list(csv.reader(io.StringIO(csv_text)))
        header, data = rows[0], rows[1]
        f1 = float(data[header.index("none/F1")])
        assert f1 == report.weighted_f1

    def test_models_rows_by_sampling_columns(self):
        r = metrics(Confusion(tp=5, fp=5, tn=85, fn=5))
        runs = [
            ("tree", "none", r),
            ("tree", "undersample", r),
            ("gbdt", "none", r),
        ]
        csv_text, aligned = results_table(runs)
        lines = aligned.strip().splitlines()
        assert len(lines) == 3  # header + 2 model rows
        header = lines[0]
        assert header.index("none/F1") < header.index("undersample/F1")
        # missing cell rendered as dash
        assert "-" in lines[2]

    def test_empty_rejected(self):
        with pytest.raises(MetricsError):
            results_table([])
