"""
Evaluation: spatial matching error through the known transform, cumulative
error distributions and per-method, per-family summary tables.
"""

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from common.config import EVALUATION_CONFIG, PUBLISHED_CT_REFERENCE
from common.errors import DataError
from common.utils import atomic_write_json, atomic_write_text
from matcher.inference import MatchSet
from trainer.transforms import Transform, project_points

logger = logging.getLogger(__name__)


def compute_matching_errors(matches: MatchSet, t: Transform, spacing_mm: float = 1.0) -> np.ndarray:
    """|pt1 - phi(pt2)| * spacing_mm for every match"""
    if len(matches) == 0:
        return np.zeros(0, dtype=np.float64)
    projected = project_points(matches.points2, t)
    return np.linalg.norm(matches.points1 - projected, axis=1) * spacing_mm


@dataclass(frozen=True)
class CumulativeCurve:
    thresholds: Tuple[float, ...]
    fractions: Tuple[float, ...]
    warning: bool = False

    def fraction_at(self, threshold_mm: float) -> float:
        return float(self.fractions[self.thresholds.index(threshold_mm)])


def cumulative_curve(errors: Sequence[float], thresholds: Sequence[float]) -> CumulativeCurve:
    """
    Fraction of errors <= each threshold; no errors gives zeros with the
    warning flag set. When the largest error lies beyond the last threshold it
    is appended as a terminal threshold so the curve always reaches 1.0.
    """
    thresholds = [float(v) for v in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted ascending")

    errors = np.asarray(errors, dtype=np.float64).ravel()
    if errors.size == 0:
        return CumulativeCurve(tuple(thresholds), tuple(0.0 for _ in thresholds), warning=True)

    ordered = np.sort(errors)
    if thresholds and ordered[-1] > thresholds[-1]:
        thresholds.append(float(ordered[-1]))
    counts = np.searchsorted(ordered, thresholds, side="right")
    return CumulativeCurve(tuple(thresholds), tuple(float(c) / errors.size for c in counts))


def quartiles(values: Sequence[float]) -> Tuple[float, float, float]:
    """(Q1, median, Q3), linear interpolation between closest ranks"""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return math.nan, math.nan, math.nan
    q1, median, q3 = np.percentile(values, [25, 50, 75])
    return float(q1), float(median), float(q3)


@dataclass
class PairEvaluation:
    pair_id: str
    family: str
    method: str
    match_count: int
    errors_mm: List[float] = field(default_factory=list)

    @property
    def median_error_mm(self) -> float:
        return float(np.median(self.errors_mm)) if self.errors_mm else math.nan


def evaluate_pair(pair_id: str, family: str, method: str, matches: MatchSet,
                  t: Transform, spacing_mm: float = 1.0) -> PairEvaluation:
    errors = compute_matching_errors(matches, t, spacing_mm)
    return PairEvaluation(pair_id, family, method, len(matches), [float(e) for e in errors])


@dataclass
class SummaryRow:
    method: str
    family: str
    pairs: int
    median_matches: float
    iqr_matches: Tuple[float, float]
    median_error_mm: float
    iqr_error_mm: Tuple[float, float]
    fraction_within: float
    fraction_gross: float
    warning: bool = False

    @property
    def reference(self) -> Optional[str]:
        return PUBLISHED_CT_REFERENCE.get(self.method, {}).get(self.family)


@dataclass
class EvalReport:
    rows: List[SummaryRow]
    evaluations: List[PairEvaluation]
    curves: Dict[Tuple[str, str], CumulativeCurve]
    within_mm: float
    gross_error_mm: float

    @property
    def warning(self) -> bool:
        return any(row.warning for row in self.rows)

    def row(self, method: str, family: str) -> SummaryRow:
        for row in self.rows:
            if row.method == method and row.family == family:
                return row
        raise KeyError((method, family))

    def to_text_table(self) -> str:
        headers = ["Method", "Family", "Pairs", "Matches median (IQR)", "Error mm median (IQR)",
                   f"<= {self.within_mm:g} mm", f"> {self.gross_error_mm:g} mm"]
        body = []
        for row in self.rows:
            body.append([
                row.method, row.family, str(row.pairs),
                f"{_num(row.median_matches)} ({_num(row.iqr_matches[0])} - {_num(row.iqr_matches[1])})",
                f"{_num(row.median_error_mm)} ({_num(row.iqr_error_mm[0])} - {_num(row.iqr_error_mm[1])})",
                f"{row.fraction_within:.3f}", f"{row.fraction_gross:.3f}"
            ])
        widths = [max(len(r[i]) for r in [headers] + body) for i in range(len(headers))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(headers, widths)),
                 "  ".join("-" * w for w in widths)]
        lines.extend("  ".join(cell.ljust(w) for cell, w in zip(r, widths)) for r in body)

        captions = [f"  {row.method} / {row.family}: {row.reference} matches"
                    for row in self.rows if row.reference]
        if captions:
            lines.append("")
            lines.append("Published CT reference (median matches, IQR), not comparable to synthetic data:")
            lines.extend(captions)
        if self.warning:
            lines.append("")
            lines.append("Warning: at least one method/family produced no matches.")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["method", "family", "pairs", "median_matches", "q1_matches", "q3_matches",
                         "median_error_mm", "q1_error_mm", "q3_error_mm", "fraction_within",
                         "fraction_gross", "warning"])
        for row in self.rows:
            writer.writerow([row.method, row.family, row.pairs, row.median_matches, *row.iqr_matches,
                             row.median_error_mm, *row.iqr_error_mm, row.fraction_within,
                             row.fraction_gross, int(row.warning)])
        return buffer.getvalue()

    def to_dict(self) -> Dict:
        return _json_safe({
            "within_mm": self.within_mm,
            "gross_error_mm": self.gross_error_mm,
            "warning": self.warning,
            "rows": [dict(asdict(row), reference=row.reference) for row in self.rows],
            "curves": [
                {"method": method, "family": family, "thresholds_mm": list(curve.thresholds),
                 "fractions": list(curve.fractions), "warning": curve.warning}
                for (method, family), curve in self.curves.items()
            ],
            "pairs": [asdict(e) for e in self.evaluations]
        })

    def write(self, directory: str, stem: str = "report") -> Dict[str, str]:
        os.makedirs(directory, exist_ok=True)
        paths = {
            "text": os.path.join(directory, f"{stem}.txt"),
            "csv": os.path.join(directory, f"{stem}.csv"),
            "json": os.path.join(directory, f"{stem}.json")
        }
        atomic_write_text(paths["text"], self.to_text_table())
        atomic_write_text(paths["csv"], self.to_csv())
        atomic_write_json(paths["json"], self.to_dict())
        return paths


def _num(value: float) -> str:
    return "n/a" if value != value else f"{value:.1f}"


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def summarize(evaluations: Sequence[PairEvaluation], thresholds: Optional[Sequence[float]] = None,
              within_mm: Optional[float] = None, gross_error_mm: Optional[float] = None) -> EvalReport:
    """
    Per (method, family): median/IQR of match counts over pairs, median/IQR of
    the per-pair median error, pooled fractions within and beyond the error
    bounds, and the pooled cumulative curve.
    """
    if not evaluations:
        raise ValueError("summarize needs at least one evaluated pair")
    thresholds = thresholds or EVALUATION_CONFIG["curve_thresholds_mm"]
    within_mm = EVALUATION_CONFIG["within_mm"] if within_mm is None else within_mm
    gross_error_mm = EVALUATION_CONFIG["gross_error_mm"] if gross_error_mm is None else gross_error_mm

    groups: Dict[Tuple[str, str], List[PairEvaluation]] = {}
    for evaluation in evaluations:
        groups.setdefault((evaluation.method, evaluation.family), []).append(evaluation)

    rows, curves = [], {}
    for (method, family), group in groups.items():
        counts = [e.match_count for e in group]
        pooled = np.asarray([err for e in group for err in e.errors_mm], dtype=np.float64)
        pair_medians = [e.median_error_mm for e in group if e.errors_mm]

        q1_count, median_count, q3_count = quartiles(counts)
        q1_err, median_err, q3_err = quartiles(pair_medians)
        curve = cumulative_curve(pooled, thresholds)
        if curve.warning:
            logger.warning("No matches for %s / %s", method, family)

        rows.append(SummaryRow(
            method=method,
            family=family,
            pairs=len(group),
            median_matches=median_count,
            iqr_matches=(q1_count, q3_count),
            median_error_mm=median_err,
            iqr_error_mm=(q1_err, q3_err),
            fraction_within=float(np.mean(pooled <= within_mm)) if pooled.size else 0.0,
            fraction_gross=float(np.mean(pooled > gross_error_mm)) if pooled.size else 0.0,
            warning=curve.warning
        ))
        curves[(method, family)] = curve

    return EvalReport(rows, list(evaluations), curves, within_mm, gross_error_mm)


def load_report_curves(path: str) -> Dict[Tuple[str, str], CumulativeCurve]:
    """Curves from a report JSON written by EvalReport.write"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            record = json.load(f)
        return {
            (entry["method"], entry["family"]): CumulativeCurve(
                tuple(float(v) for v in entry["thresholds_mm"]),
                tuple(float(v) for v in entry["fractions"]),
                bool(entry.get("warning", False))
            )
            for entry in record["curves"]
        }
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataError(f"Unreadable report {path}: {e}") from e
