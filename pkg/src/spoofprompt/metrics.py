"""Biometric evaluation: ACC, AUC, EER, APCER/BPCER/ACER, ROC sweep, report.

Conventions, shared with the brute-force oracles in the test suite:

  * higher score = more live; a score equal to the threshold classifies as
    bona fide (tie accepts)
  * APCER(t) = fraction of attacks with score >= t (accepted as live)
  * BPCER(t) = fraction of bona fide with score <  t (rejected)
  * AUC is the rank statistic (ties count 1/2), equal to the trapezoidal
    area under the ROC
  * EER sweeps thresholds at the observed score values plus a sentinel
    above the maximum, and linearly interpolates between adjacent sweep
    points at the APCER/BPCER crossing
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError

__all__ = [
    "ScoreRecord", "MetricsSummary", "accuracy", "auc", "eer", "acer",
    "summarize", "roc_points", "format_report", "write_roc_csv",
    "write_scores", "read_scores",
]


@dataclass
class ScoreRecord:
    id: str
    bona_fide: bool
    fine_label: str
    score: float                      # fused live score in [0, 1]
    score_physical: float | None = None
    score_digital: float | None = None
    family: str | None = None

    def __post_init__(self):
        for value in (self.score, self.score_physical, self.score_digital):
            if value is not None and not 0.0 <= value <= 1.0:
                raise InputError(f"score {value} outside [0, 1] for record '{self.id}'")


@dataclass
class MetricsSummary:
    acc: float
    auc: float
    eer: float
    eer_threshold: float
    apcer: float
    bpcer: float
    acer: float
    threshold: float                  # the stated operating threshold
    n_bona_fide: int
    n_attack: int


def _split_scores(records: list[ScoreRecord]) -> tuple[np.ndarray, np.ndarray]:
    bona = np.array([r.score for r in records if r.bona_fide], dtype=np.float64)
    attack = np.array([r.score for r in records if not r.bona_fide], dtype=np.float64)
    return bona, attack


def _require_both_classes(records: list[ScoreRecord]) -> tuple[np.ndarray, np.ndarray]:
    bona, attack = _split_scores(records)
    if bona.size == 0 or attack.size == 0:
        raise InputError("metric requires at least one bona fide and one attack record")
    return bona, attack


def accuracy(records: list[ScoreRecord], threshold: float) -> float:
    """Fraction classified correctly; score == threshold accepts as bona fide."""
    if not records:
        raise InputError("accuracy of an empty record list")
    correct = sum(1 for r in records if (r.score >= threshold) == r.bona_fide)
    return correct / len(records)


def auc(records: list[ScoreRecord]) -> float:
    """P(random bona fide outscores random attack), ties counting 1/2."""
    bona, attack = _require_both_classes(records)
    scores = np.concatenate([bona, attack])
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty_like(scores)
    ranks[order] = np.arange(1, scores.size + 1, dtype=np.float64)
    # average ranks over tie groups
    sorted_scores = scores[order]
    i = 0
    while i < sorted_scores.size:
        j = i
        while j + 1 < sorted_scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    r_bona = ranks[: bona.size].sum()
    u = r_bona - bona.size * (bona.size + 1) / 2.0
    return float(u / (bona.size * attack.size))


def _error_rates(bona: np.ndarray, attack: np.ndarray, threshold: float) -> tuple[float, float]:
    apcer = float(np.mean(attack >= threshold)) if attack.size else 0.0
    bpcer = float(np.mean(bona < threshold)) if bona.size else 0.0
    return apcer, bpcer


def eer(records: list[ScoreRecord]) -> tuple[float, float]:
    """(rate, threshold) at the interpolated APCER/BPCER crossing.

    Sweep thresholds are the sorted unique scores plus one sentinel above
    the maximum (where APCER=0, BPCER=1); APCER is non-increasing and BPCER
    non-decreasing along the sweep, so a sign change always exists.
    """
    bona, attack = _require_both_classes(records)
    scores = np.concatenate([bona, attack])
    thresholds = np.unique(scores)
    thresholds = np.append(thresholds, thresholds[-1] + 1.0)
    apcer = np.array([np.mean(attack >= t) for t in thresholds])
    bpcer = np.array([np.mean(bona < t) for t in thresholds])
    diff = apcer - bpcer
    idx = int(np.argmax(diff <= 0.0))
    if idx == 0:
        return float(apcer[0]), float(thresholds[0])
    d_prev, d_here = diff[idx - 1], diff[idx]
    if d_here == 0.0:
        return float(apcer[idx]), float(thresholds[idx])
    frac = d_prev / (d_prev - d_here)
    rate = apcer[idx - 1] + frac * (apcer[idx] - apcer[idx - 1])
    threshold = thresholds[idx - 1] + frac * (thresholds[idx] - thresholds[idx - 1])
    return float(rate), float(threshold)


def acer(records: list[ScoreRecord], threshold: float) -> tuple[float, float, float]:
    """(APCER, BPCER, ACER) at a threshold; ACER is exactly their mean."""
    bona, attack = _require_both_classes(records)
    apcer_v, bpcer_v = _error_rates(bona, attack, threshold)
    return apcer_v, bpcer_v, (apcer_v + bpcer_v) / 2.0


def summarize(records: list[ScoreRecord], threshold: float = 0.5) -> MetricsSummary:
    bona, attack = _require_both_classes(records)
    eer_rate, eer_thr = eer(records)
    apcer_v, bpcer_v, acer_v = acer(records, threshold)
    return MetricsSummary(
        acc=accuracy(records, threshold),
        auc=auc(records),
        eer=eer_rate,
        eer_threshold=eer_thr,
        apcer=apcer_v,
        bpcer=bpcer_v,
        acer=acer_v,
        threshold=threshold,
        n_bona_fide=int(bona.size),
        n_attack=int(attack.size),
    )


def roc_points(records: list[ScoreRecord]) -> list[tuple[float, float, float]]:
    """(threshold, apcer, bpcer) at every sweep threshold."""
    bona, attack = _require_both_classes(records)
    scores = np.concatenate([bona, attack])
    thresholds = np.unique(scores)
    thresholds = np.append(thresholds, thresholds[-1] + 1.0)
    return [(float(t), *_error_rates(bona, attack, t)) for t in thresholds]


# -- reporting ------------------------------------------------------------------------


def format_report(name: str, summary: MetricsSummary,
                  comparisons: list[tuple[str, float, float, float, float]] | None = None,
                  acer_at_eer: float | None = None) -> str:
    """Text table with Method/ACC/AUC/EER/ACER columns in percent (2 dp).

    ``comparisons`` rows are (name, acc, auc, eer, acer) with rates in
    [0, 1].  A footer states the operating threshold and, when supplied,
    the ACER evaluated at the EER threshold.
    """
    rows = [(name, summary.acc, summary.auc, summary.eer, summary.acer)]
    rows.extend(comparisons or [])
    width = max(len(r[0]) for r in rows)
    width = max(width, len("Method"))
    header = f"{'Method'.ljust(width)}  {'ACC':>6}  {'AUC':>6}  {'EER':>6}  {'ACER':>6}"
    lines = [header, "-" * len(header)]
    for label, acc_v, auc_v, eer_v, acer_v in rows:
        lines.append(
            f"{label.ljust(width)}  {100 * acc_v:6.2f}  {100 * auc_v:6.2f}  "
            f"{100 * eer_v:6.2f}  {100 * acer_v:6.2f}"
        )
    lines.append(f"threshold: {summary.threshold:.2f}")
    if acer_at_eer is not None:
        lines.append(f"ACER at EER threshold: {100 * acer_at_eer:.2f}")
    return "\n".join(lines)


def write_roc_csv(records: list[ScoreRecord], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "apcer", "bpcer"])
        for t, a, b in roc_points(records):
            writer.writerow([f"{t:.10g}", f"{a:.10g}", f"{b:.10g}"])


def write_scores(records: list[ScoreRecord], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "label", "family", "score", "score_phys", "score_dig"])
        for r in records:
            writer.writerow([
                r.id,
                r.fine_label,
                r.family or "",
                f"{r.score:.17g}",
                "" if r.score_physical is None else f"{r.score_physical:.17g}",
                "" if r.score_digital is None else f"{r.score_digital:.17g}",
            ])


def read_scores(path) -> list[ScoreRecord]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"score file not found: {path}")
    records = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["id", "label", "family", "score", "score_phys", "score_dig"]:
            raise InputError(f"{path}: score header must be id,label,family,score,score_phys,score_dig")
        for row in reader:
            records.append(ScoreRecord(
                id=row["id"],
                bona_fide=row["label"] == "live",
                fine_label=row["label"],
                score=float(row["score"]),
                score_physical=float(row["score_phys"]) if row["score_phys"] else None,
                score_digital=float(row["score_dig"]) if row["score_dig"] else None,
                family=row["family"] or None,
            ))
    return records
