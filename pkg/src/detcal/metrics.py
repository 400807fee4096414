"""Binned calibration-error estimators and reliability-diagram data.

All three estimators share one binning scheme: B equal-width bins over [0, 1],
left-closed/right-open with the last bin closed at 1.0. The reported error is
the bin-count-weighted sum of absolute gaps between the bin's mean confidence
(or uncertainty) and its empirical outcome rate, so it always lies in [0, 1]
and is invariant under permutation or duplication of the inputs.

ECE bins (confidence, correct) samples against accuracy; D-ECE bins matched
detections by score against precision (the mean of the match bit f); D-UCE
bins per-detection uncertainties in [0, 1] against the error rate (mean of
1 - f). The D-UCE form is an implementation definition following the
uncertainty-calibration literature, chosen because the source formulation
lives in unavailable supplementary material.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Optional, Sequence

from .geometry import MatchedDetection


class EmptyInputError(ValueError):
    """No samples survived filtering; callers map this to a distinct exit."""


@dataclass(frozen=True)
class BinSummary:
    lo: float
    hi: float
    count: int
    mean_confidence: Optional[float]
    mean_outcome: Optional[float]
    mean_uncertainty: Optional[float] = None


@dataclass(frozen=True)
class CalibrationReport:
    bins: list[BinSummary]
    error: float
    total: int
    metric_kind: str  # "ECE", "D-ECE" or "D-UCE"

    def to_dict(self) -> dict:
        return {
            "metric_kind": self.metric_kind,
            "error": self.error,
            "total": self.total,
            "bins": [
                {
                    "lo": b.lo,
                    "hi": b.hi,
                    "count": b.count,
                    "mean_confidence": b.mean_confidence,
                    "mean_outcome": b.mean_outcome,
                    "mean_uncertainty": b.mean_uncertainty,
                }
                for b in self.bins
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, obj: dict) -> "CalibrationReport":
        bins = [
            BinSummary(
                lo=b["lo"],
                hi=b["hi"],
                count=b["count"],
                mean_confidence=b.get("mean_confidence"),
                mean_outcome=b.get("mean_outcome"),
                mean_uncertainty=b.get("mean_uncertainty"),
            )
            for b in obj["bins"]
        ]
        return cls(bins=bins, error=obj["error"], total=obj["total"], metric_kind=obj["metric_kind"])

    @classmethod
    def from_json(cls, text: str) -> "CalibrationReport":
        return cls.from_dict(json.loads(text))


def bin_index(value: float, n_bins: int) -> int:
    """Bin of a value in [0, 1]: left-closed/right-open, last bin closed.

    The index is pinned to the edge comparisons value >= b/B and
    value < (b+1)/B so that loop-over-edges reimplementations agree exactly,
    including on values that sit on a representable edge.
    """
    idx = min(int(value * n_bins), n_bins - 1)
    if value < idx / n_bins:
        idx -= 1
    elif idx + 1 < n_bins and value >= (idx + 1) / n_bins:
        idx += 1
    return idx


class _BinAccumulator:
    """Per-bin count/sum triples; merge is plain addition, hence associative."""

    def __init__(self, n_bins: int, with_uncertainty: bool = False):
        self.n_bins = n_bins
        self.count = [0] * n_bins
        self.sum_conf = [0.0] * n_bins
        self.sum_outcome = [0.0] * n_bins
        self.sum_unc = [0.0] * n_bins if with_uncertainty else None

    def add(self, conf: float, outcome: float, unc: Optional[float] = None):
        b = bin_index(conf, self.n_bins)
        self.count[b] += 1
        self.sum_conf[b] += conf
        self.sum_outcome[b] += outcome
        if self.sum_unc is not None and unc is not None:
            self.sum_unc[b] += unc

    def merge(self, other: "_BinAccumulator"):
        for b in range(self.n_bins):
            self.count[b] += other.count[b]
            self.sum_conf[b] += other.sum_conf[b]
            self.sum_outcome[b] += other.sum_outcome[b]
            if self.sum_unc is not None and other.sum_unc is not None:
                self.sum_unc[b] += other.sum_unc[b]

    def report(self, metric_kind: str) -> CalibrationReport:
        total = sum(self.count)
        bins: list[BinSummary] = []
        error = 0.0
        for b in range(self.n_bins):
            lo, hi = b / self.n_bins, (b + 1) / self.n_bins
            n = self.count[b]
            if n == 0:
                bins.append(BinSummary(lo, hi, 0, None, None, None))
                continue
            mean_conf = self.sum_conf[b] / n
            mean_out = self.sum_outcome[b] / n
            mean_unc = self.sum_unc[b] / n if self.sum_unc is not None else None
            bins.append(BinSummary(lo, hi, n, mean_conf, mean_out, mean_unc))
            error += (n / total) * abs(mean_out - mean_conf)
        return CalibrationReport(bins=bins, error=error, total=total, metric_kind=metric_kind)


def ece(samples: Sequence[tuple[float, int]], n_bins: int) -> CalibrationReport:
    """Expected calibration error over (confidence, correct) samples."""
    if n_bins < 1:
        raise ValueError(f"bin count must be >= 1, got {n_bins}")
    if not samples:
        raise EmptyInputError("no samples")
    acc = _BinAccumulator(n_bins)
    for conf, correct in samples:
        if not 0.0 <= conf <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {conf}")
        acc.add(conf, float(correct))
    return acc.report("ECE")


def d_ece(
    matched: Sequence[MatchedDetection],
    n_bins: int,
    score_floor: float = 0.0,
) -> CalibrationReport:
    """Detection ECE: bins scores against precision (mean match bit per bin).

    Detections scoring below ``score_floor`` are excluded before binning.
    """
    if n_bins < 1:
        raise ValueError(f"bin count must be >= 1, got {n_bins}")
    if not 0.0 <= score_floor < 1.0:
        raise ValueError(f"score floor must lie in [0, 1), got {score_floor}")
    acc = _BinAccumulator(n_bins)
    kept = 0
    for md in matched:
        if md.detection.score < score_floor:
            continue
        kept += 1
        acc.add(md.detection.score, float(md.f))
    if kept == 0:
        raise EmptyInputError("no detections above floor")
    return acc.report("D-ECE")


def d_uce(
    matched: Sequence[tuple[MatchedDetection, float]],
    n_bins: int,
) -> CalibrationReport:
    """Uncertainty calibration error: bins uncertainty against error rate."""
    if n_bins < 1:
        raise ValueError(f"bin count must be >= 1, got {n_bins}")
    if not matched:
        raise EmptyInputError("no samples")
    acc = _BinAccumulator(n_bins)
    for md, unc in matched:
        if not 0.0 <= unc <= 1.0:
            raise ValueError(f"uncertainty must lie in [0, 1], got {unc}")
        acc.add(unc, 1.0 - md.f)
    return acc.report("D-UCE")


def reliability_table(report: CalibrationReport) -> list[dict]:
    """One row per non-empty bin, ordered by lower edge; gap = outcome - conf."""
    rows = []
    for b in report.bins:
        if b.count == 0:
            continue
        rows.append(
            {
                "bin_lo": b.lo,
                "bin_hi": b.hi,
                "count": b.count,
                "mean_confidence": b.mean_confidence,
                "mean_outcome": b.mean_outcome,
                "gap": b.mean_outcome - b.mean_confidence,
            }
        )
    return rows


_CSV_FIELDS = ["bin_lo", "bin_hi", "count", "mean_confidence", "mean_outcome", "gap"]


def reliability_csv(report: CalibrationReport) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in reliability_table(report):
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def reliability_json(report: CalibrationReport) -> str:
    return json.dumps(reliability_table(report), indent=2) + "\n"
