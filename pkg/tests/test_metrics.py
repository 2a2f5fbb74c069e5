import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from unicd.metrics import (BdaMetrics, ConfusionMatrix, MetricReport, bda_metrics, binary_metrics, comparison_table,
                           harmonic_mean, report_from, scd_metrics)


def cm2(tp, fp, fn, tn=0):
    return np.array([[tn, fp], [fn, tp]])


class TestConfusionMatrix:
    @pytest.mark.parametrize("seed", range(5))
    def test_counting_oracle(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 6))
        h, w = rng.integers(1, 17, 2)
        ref, pred = rng.integers(0, k, (h, w)), rng.integers(0, k, (h, w))
        ref[rng.random((h, w)) < 0.1] = 255
        cm = ConfusionMatrix.from_maps(ref, pred, k)
        np.testing.assert_array_equal(cm.counts, oracles.confusion_loop(ref, pred, k))
        assert cm.total == int((ref != 255).sum())

    def test_merge(self, rng):
        a, b = rng.integers(0, 3, (2, 8, 8)), rng.integers(0, 3, (2, 8, 8))
        whole = ConfusionMatrix.from_maps(a, b, 3)
        parts = ConfusionMatrix.from_maps(a[0], b[0], 3) + ConfusionMatrix.from_maps(a[1], b[1], 3)
        np.testing.assert_array_equal(whole.counts, parts.counts)

    def test_permutation_invariance(self, rng):
        a, b = rng.integers(0, 4, 100), rng.integers(0, 4, 100)
        perm = rng.permutation(100)
        np.testing.assert_array_equal(ConfusionMatrix.from_maps(a, b, 4).counts,
                                      ConfusionMatrix.from_maps(a[perm], b[perm], 4).counts)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            ConfusionMatrix.from_maps(np.array([0, 3]), np.array([0, 1]), 3)


class TestBinary:
    def test_closed_form(self):
        m = binary_metrics(cm2(50, 10, 10))
        assert m.precision == m.recall == m.f1 == pytest.approx(5 / 6, abs=1e-15)
        assert m.iou == pytest.approx(50 / 70, abs=1e-15)
        assert not m.degenerate

    def test_no_positives(self):
        m = binary_metrics(cm2(0, 0, 0, 64))
        assert (m.precision, m.recall, m.f1, m.iou) == (0.0, 0.0, 0.0, 0.0)
        assert m.degenerate and "f1" in m.flags

    @pytest.mark.parametrize("seed", range(8))
    def test_counting_oracle(self, seed):
        rng = np.random.default_rng(seed)
        ref, pred = rng.random((16, 16)) < 0.4, rng.random((16, 16)) < 0.4
        tp, fp, fn, _ = oracles.binary_counts(ref, pred)
        m = binary_metrics(ConfusionMatrix.from_maps(ref, pred, 2))
        assert m.precision == tp / (tp + fp)
        assert m.recall == tp / (tp + fn)
        assert m.iou == oracles.iou_sets(pred, ref)
        assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall), abs=1e-12)

    @given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
    @settings(max_examples=200)
    def test_iou_f1_identity(self, tp, fp, fn):
        m = binary_metrics(cm2(tp, fp, fn, 7))
        assert m.iou == pytest.approx(m.f1 / (2 - m.f1), abs=1e-12)
        assert m.iou <= m.f1 <= 1


class TestScd:
    def test_perfect(self, rng):
        ref = rng.integers(0, 4, (8, 8))
        m = scd_metrics(ConfusionMatrix.from_maps(ref, ref, 4))
        assert (m.oa, m.miou, m.kappa, m.sek, m.f1) == (1.0, 1.0, 1.0, 1.0, 1.0)

    def test_all_no_change(self):
        z = np.zeros((8, 8), int)
        m = scd_metrics(ConfusionMatrix.from_maps(z, z, 4))
        assert m.oa == 1.0
        assert "sek" in m.flags

    def test_empty(self):
        assert scd_metrics(np.zeros((3, 3), int)).flags == ["empty"]

    @pytest.mark.parametrize("seed", range(10))
    def test_second_oracle(self, seed):
        rng = np.random.default_rng(seed)
        k = 4
        maps = [rng.integers(0, k, (8, 8)) * (rng.random((8, 8)) < 0.6) for _ in range(4)]
        cm = ConfusionMatrix.from_maps(maps[0], maps[1], k) + ConfusionMatrix.from_maps(maps[2], maps[3], k)
        m = scd_metrics(cm)
        ref = oracles.second_metrics(maps[0], maps[1], maps[2], maps[3], k)
        for name in ("oa", "miou", "sek", "f1", "kappa"):
            assert getattr(m, name) == pytest.approx(ref[name], abs=1e-12), name
        assert m.sek == pytest.approx(math.exp(m.iou_change - 1) * m.kappa, abs=1e-15)


class TestBda:
    def test_harmonic_closed_form(self):
        assert harmonic_mean([0.8] * 4) == pytest.approx(0.8)
        assert harmonic_mean([0.9, 0.0, 0.7]) == 0.0
        vals = [0.2, 0.5, 0.9]
        assert harmonic_mean(vals) <= min(vals) * len(vals)
        assert harmonic_mean(vals) <= np.mean(vals)

    def test_overall_blend(self):
        assert 0.3 * 0.9 + 0.7 * harmonic_mean([0.8] * 4) == pytest.approx(0.83, abs=1e-15)

    def test_counting_oracle(self, rng):
        loc_ref = (rng.random((12, 12)) < 0.5).astype(int)
        loc_pred = (rng.random((12, 12)) < 0.5).astype(int)
        dmg_ref = rng.integers(1, 5, (12, 12)) * loc_ref
        dmg_pred = rng.integers(0, 5, (12, 12))
        m = bda_metrics(loc_ref, loc_pred, dmg_ref, dmg_pred)
        tp, fp, fn, _ = oracles.binary_counts(loc_ref, loc_pred)
        assert m.f1_loc == pytest.approx(2 * tp / (2 * tp + fp + fn), abs=1e-15)
        f1s = []
        for c in range(1, 5):
            t = f = n = 0
            for r, p, b in zip(dmg_ref.ravel(), dmg_pred.ravel(), loc_ref.ravel()):
                if not b:
                    continue
                t += (r == c) and (p == c)
                f += (r != c) and (p == c)
                n += (r == c) and (p != c)
            f1s.append(2 * t / (2 * t + f + n))
        np.testing.assert_allclose(m.f1_damage, f1s, atol=1e-15)
        assert m.f1_clf == pytest.approx(len(f1s) / sum(1 / v for v in f1s), abs=1e-12)
        assert m.f1_overall == pytest.approx(0.3 * m.f1_loc + 0.7 * m.f1_clf, abs=1e-15)

    def test_absent_grade_excluded(self):
        loc = np.ones((2, 2), int)
        dmg = np.array([[1, 2], [3, 3]])
        m = bda_metrics(loc, loc, dmg, dmg)
        assert m.f1_clf == 1.0 and "damage_4_absent" in m.flags

    def test_zero_class_dominates(self):
        loc = np.ones((2, 2), int)
        m = bda_metrics(loc, loc, np.array([[1, 1], [2, 2]]), np.array([[1, 1], [1, 1]]))
        assert m.f1_damage[1] == 0.0 and m.f1_clf == 0.0


class TestReport:
    def test_csv_rows(self):
        rep = report_from("synthetic", "bcd", binary_metrics(cm2(50, 10, 10)))
        rows = list(csv.reader(io.StringIO(rep.to_csv())))
        assert rows[0] == ["dataset", "task", "metric", "value"]
        assert [r[2] for r in rows[1:]] == ["precision", "recall", "f1", "iou"]
        assert float(rows[-1][3]) == 50 / 70

    def test_table_and_flags(self):
        rep = report_from("d", "bcd", binary_metrics(cm2(0, 0, 0, 4)))
        assert "degenerate" in rep.table()

    def test_bda_report_keys(self):
        rep = report_from("d", "bda", BdaMetrics(0.9, [0.8] * 4, 0.8, 0.83))
        assert list(rep.values)[:2] == ["f1_loc", "f1_damage_1"]
        assert rep.values["f1_overall"] == 0.83

    def test_comparison(self):
        a = MetricReport("full", "bcd", {"f1": 0.9})
        b = MetricReport("no-fcpg", "bcd", {"f1": 0.8})
        lines = comparison_table([a, b]).splitlines()
        assert lines[0].split() == ["variant", "f1"]
        assert lines[2].split() == ["no-fcpg", "0.8000"]

    def test_unknown_record(self):
        with pytest.raises(TypeError):
            report_from("d", "bcd", object())
