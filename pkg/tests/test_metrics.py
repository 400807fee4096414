import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detcal.geometry import Box, Detection, MatchedDetection
from detcal.metrics import (
    CalibrationReport,
    EmptyInputError,
    _BinAccumulator,
    bin_index,
    d_ece,
    d_uce,
    ece,
    reliability_csv,
    reliability_json,
    reliability_table,
)
from detcal.tensors import ALGEBRAIC_TOL
from oracles import binned_error


def md(score, f, image_id="img", category=1):
    det = Detection(image_id, category, Box(0, 0, 1, 1), score)
    return MatchedDetection(det, f)


class TestBinIndex:
    def test_edges_left_closed(self):
        assert bin_index(0.0, 10) == 0
        assert bin_index(0.5, 10) == 5
        assert bin_index(1.0, 10) == 9  # last bin closed

    def test_agrees_with_edge_comparisons(self):
        rng = np.random.default_rng(20)
        values = list(rng.uniform(0, 1, 500)) + [i / 20 for i in range(21)] + [0.3, 2 / 3, 0.1]
        for n_bins in (1, 2, 3, 7, 10):
            for v in values:
                b = bin_index(v, n_bins)
                assert b / n_bins <= v
                assert v < (b + 1) / n_bins or b == n_bins - 1


class TestEce:
    def test_perfectly_calibrated_bins(self):
        # each bin's mean confidence equals its empirical accuracy
        samples = [(0.25, 0), (0.25, 0), (0.25, 1), (0.25, 0), (0.75, 1), (0.75, 1), (0.75, 1), (0.75, 0)]
        report = ece(samples, 2)
        assert report.error < ALGEBRAIC_TOL

    def test_two_sample_golden(self):
        report = ece([(0.9, 1), (0.6, 0)], 2)
        assert abs(report.error - 0.25) < ALGEBRAIC_TOL
        assert report.bins[0].count == 0
        assert report.bins[1].count == 2
        assert abs(report.bins[1].mean_confidence - 0.75) < ALGEBRAIC_TOL
        assert abs(report.bins[1].mean_outcome - 0.5) < ALGEBRAIC_TOL

    def test_single_sample_golden(self):
        report = ece([(0.8, 0)], 1)
        assert abs(report.error - 0.8) < ALGEBRAIC_TOL

    def test_empty_errors(self):
        with pytest.raises(EmptyInputError, match="no samples"):
            ece([], 10)

    def test_bad_bins(self):
        with pytest.raises(ValueError):
            ece([(0.5, 1)], 0)

    def test_bad_confidence(self):
        with pytest.raises(ValueError):
            ece([(1.5, 1)], 10)

    def test_oracle_agreement_random(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            n = int(rng.integers(1, 51))
            samples = [(float(rng.uniform(0, 1)), int(rng.integers(0, 2))) for _ in range(n)]
            bins = int(rng.integers(1, 11))
            got = ece(samples, bins)
            want, rows = binned_error(samples, bins)
            assert abs(got.error - want) < ALGEBRAIC_TOL
            for summary, (count, mc, mo) in zip(got.bins, rows):
                assert summary.count == count
                if count:
                    assert abs(summary.mean_confidence - mc) < ALGEBRAIC_TOL
                    assert abs(summary.mean_outcome - mo) < ALGEBRAIC_TOL

    def test_permutation_invariance(self):
        rng = np.random.default_rng(22)
        samples = [(float(rng.uniform(0, 1)), int(rng.integers(0, 2))) for _ in range(40)]
        shuffled = list(samples)
        rng.shuffle(shuffled)
        assert abs(ece(samples, 10).error - ece(shuffled, 10).error) < ALGEBRAIC_TOL

    def test_duplication_invariance(self):
        rng = np.random.default_rng(23)
        samples = [(float(rng.uniform(0, 1)), int(rng.integers(0, 2))) for _ in range(25)]
        assert abs(ece(samples, 10).error - ece(samples * 3, 10).error) < ALGEBRAIC_TOL

    def test_single_bin_degenerates_to_overall_gap(self):
        rng = np.random.default_rng(24)
        samples = [(float(rng.uniform(0, 1)), int(rng.integers(0, 2))) for _ in range(30)]
        mean_conf = sum(c for c, _ in samples) / len(samples)
        rate = sum(o for _, o in samples) / len(samples)
        assert abs(ece(samples, 1).error - abs(rate - mean_conf)) < ALGEBRAIC_TOL

    @given(
        st.lists(
            st.tuples(
                st.floats(min_value=0, max_value=1, allow_nan=False),
                st.integers(min_value=0, max_value=1),
            ),
            min_size=1,
            max_size=40,
        ),
        st.integers(min_value=1, max_value=10),
    )
    @settings(max_examples=100, deadline=None)
    def test_error_in_unit_interval(self, samples, bins):
        report = ece(samples, bins)
        assert 0.0 <= report.error <= 1.0
        assert sum(b.count for b in report.bins) == report.total == len(samples)


class TestDEce:
    def test_single_detection_golden(self):
        report = d_ece([md(0.8, 1)], 1)
        assert abs(report.error - 0.2) < ALGEBRAIC_TOL

    def test_two_same_bin_golden(self):
        report = d_ece([md(0.9, 1), md(0.9, 0)], 10)
        assert abs(report.error - 0.4) < ALGEBRAIC_TOL
        top = report.bins[9]
        assert top.count == 2
        assert abs(top.mean_outcome - 0.5) < ALGEBRAIC_TOL

    def test_score_equals_precision_vanishes(self):
        matched = [md(0.75, 1), md(0.75, 1), md(0.75, 1), md(0.75, 0)]
        assert d_ece(matched, 10).error < ALGEBRAIC_TOL

    def test_floor_filters(self):
        report = d_ece([md(0.8, 1), md(0.1, 0)], 1, score_floor=0.5)
        assert report.total == 1

    def test_floor_empties(self):
        with pytest.raises(EmptyInputError, match="no detections above floor"):
            d_ece([md(0.3, 1)], 10, score_floor=0.9)

    def test_oracle_agreement_random(self):
        rng = np.random.default_rng(25)
        for _ in range(100):
            n = int(rng.integers(1, 51))
            matched = [md(float(rng.uniform(0, 1)), int(rng.integers(0, 2))) for _ in range(n)]
            bins = int(rng.integers(1, 11))
            got = d_ece(matched, bins)
            want, _ = binned_error([(m.detection.score, m.f) for m in matched], bins)
            assert abs(got.error - want) < ALGEBRAIC_TOL


class TestDUce:
    def test_uncertainty_matches_error_rate(self):
        pairs = [(md(0.9, 0), 0.75), (md(0.9, 0), 0.75), (md(0.9, 0), 0.75), (md(0.9, 1), 0.75)]
        assert d_uce(pairs, 1).error < ALGEBRAIC_TOL

    def test_single_miss_golden(self):
        assert abs(d_uce([(md(0.9, 0), 0.6)], 1).error - 0.4) < ALGEBRAIC_TOL

    def test_certain_and_correct(self):
        assert d_uce([(md(0.9, 1), 0.0)], 1).error < ALGEBRAIC_TOL

    def test_oracle_agreement_random(self):
        rng = np.random.default_rng(26)
        for _ in range(50):
            n = int(rng.integers(1, 51))
            pairs = [
                (md(float(rng.uniform(0, 1)), int(rng.integers(0, 2))), float(rng.uniform(0, 1)))
                for _ in range(n)
            ]
            bins = int(rng.integers(1, 11))
            got = d_uce(pairs, bins)
            want, _ = binned_error([(u, 1 - m.f) for m, u in pairs], bins)
            assert abs(got.error - want) < ALGEBRAIC_TOL

    def test_rejects_out_of_range_uncertainty(self):
        with pytest.raises(ValueError):
            d_uce([(md(0.5, 1), 1.5)], 10)


class TestPartitionMerge:
    def test_merge_matches_single_pass(self):
        rng = np.random.default_rng(27)
        samples = [(float(rng.uniform(0, 1)), float(rng.integers(0, 2))) for _ in range(60)]
        whole = _BinAccumulator(10)
        for c, o in samples:
            whole.add(c, o)
        left = _BinAccumulator(10)
        right = _BinAccumulator(10)
        for c, o in samples[:25]:
            left.add(c, o)
        for c, o in samples[25:]:
            right.add(c, o)
        left.merge(right)
        a = whole.report("ECE")
        b = left.report("ECE")
        assert abs(a.error - b.error) < ALGEBRAIC_TOL
        assert [x.count for x in a.bins] == [x.count for x in b.bins]


class TestReliability:
    def test_single_row(self):
        report = d_ece([md(0.8, 1)], 1)
        rows = reliability_table(report)
        assert len(rows) == 1
        assert abs(rows[0]["gap"] - 0.2) < ALGEBRAIC_TOL

    def test_empty_bins_omitted(self):
        report = ece([(0.9, 1), (0.6, 0)], 2)
        rows = reliability_table(report)
        assert len(rows) == 1
        assert abs(rows[0]["gap"] + 0.25) < ALGEBRAIC_TOL

    def test_rows_ordered_by_lo(self):
        rng = np.random.default_rng(28)
        samples = [(float(rng.uniform(0, 1)), int(rng.integers(0, 2))) for _ in range(50)]
        rows = reliability_table(ece(samples, 10))
        los = [r["bin_lo"] for r in rows]
        assert los == sorted(los)

    def test_csv_format_and_roundtrip(self):
        report = d_ece([md(0.8, 1), md(0.3, 0), md(0.35, 1)], 10)
        text = reliability_csv(report)
        lines = text.splitlines()
        assert lines[0] == "bin_lo,bin_hi,count,mean_confidence,mean_outcome,gap"
        parsed = list(csv.DictReader(io.StringIO(text)))
        assert len(parsed) == len(reliability_table(report))
        for row, want in zip(parsed, reliability_table(report)):
            assert abs(float(row["mean_confidence"]) - want["mean_confidence"]) < 1e-9
            assert abs(float(row["gap"]) - want["gap"]) < 1e-9
            assert int(row["count"]) == want["count"]

    def test_json_rows(self):
        report = d_ece([md(0.8, 1)], 1)
        rows = json.loads(reliability_json(report))
        assert rows == reliability_table(report)

    def test_report_json_roundtrip(self):
        report = d_ece([md(0.8, 1), md(0.42, 0)], 10)
        again = CalibrationReport.from_json(report.to_json())
        assert again == report
