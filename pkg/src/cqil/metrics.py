"""Presentation-attack-detection metrics.

Convention: scores are liveness probabilities, label 1 = live (bonafide),
label 0 = attack, and a sample is accepted as live when ``score >= threshold``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        labels = np.asarray(self.labels)
        if labels.dtype.kind in "US":
            labels = (labels == "live").astype(np.int64)
        self.labels = labels.astype(np.int64).ravel()
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")
        if self.scores.size == 0:
            raise ValueError("empty scored set")
        if not set(np.unique(self.labels)) <= {0, 1}:
            raise ValueError("labels must be 0 (attack) or 1 (live)")
        if self.labels.min() == self.labels.max():
            raise ValueError("scored set needs both live and attack samples")

    @property
    def live(self) -> np.ndarray:
        return self.scores[self.labels == 1]

    @property
    def attack(self) -> np.ndarray:
        return self.scores[self.labels == 0]


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """Lowest score, midpoints between consecutive distinct scores, and just above the highest."""
    u = np.unique(scores)
    top = np.nextafter(u[-1], np.inf)
    return np.concatenate([u[:1], (u[:-1] + u[1:]) / 2.0, [top]])


def error_curves(dev: ScoredSet, thresholds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """APCER and BPCER at every threshold, via sorted counts."""
    attack = np.sort(dev.attack)
    live = np.sort(dev.live)
    # attacks accepted: count >= t ; lives rejected: count < t
    apcer = (attack.size - np.searchsorted(attack, thresholds, side="left")) / attack.size
    bpcer = np.searchsorted(live, thresholds, side="left") / live.size
    return apcer, bpcer


def select_threshold(dev: ScoredSet) -> float:
    """Equal-error operating point on the development set.

    Minimises |APCER - BPCER| over the candidate thresholds; ties go to the
    smaller threshold.
    """
    t = candidate_thresholds(dev.scores)
    apcer, bpcer = error_curves(dev, t)
    return float(t[int(np.argmin(np.abs(apcer - bpcer)))])


def apcer_bpcer_acer(test: ScoredSet, threshold: float) -> tuple[float, float, float]:
    apcer = float(np.mean(test.attack >= threshold))
    bpcer = float(np.mean(test.live < threshold))
    return apcer, bpcer, (apcer + bpcer) / 2.0


def hter(test: ScoredSet, threshold: float) -> float:
    far = float(np.mean(test.attack >= threshold))
    frr = float(np.mean(test.live < threshold))
    return (far + frr) / 2.0


def auc(scored: ScoredSet) -> float:
    """Mann-Whitney AUC with mid-ranks (ties count one half)."""
    ranks = rankdata(scored.scores)
    n1 = int(scored.labels.sum())
    n0 = scored.labels.size - n1
    r1 = ranks[scored.labels == 1].sum()
    return float((r1 - n1 * (n1 + 1) / 2.0) / (n1 * n0))


@dataclass
class MetricsReport:
    protocol_id: str
    threshold: float
    apcer: float
    bpcer: float
    acer: float
    hter: float
    auc: float
    label: str = ""

    def percent_row(self) -> dict:
        return {"protocol": self.protocol_id, "label": self.label, "threshold": round(self.threshold, 6),
                "apcer": round(100 * self.apcer, 2), "bpcer": round(100 * self.bpcer, 2),
                "acer": round(100 * self.acer, 2), "hter": round(100 * self.hter, 2),
                "auc": round(100 * self.auc, 2)}


def evaluate(dev: ScoredSet, test: ScoredSet, protocol_id: str = "", label: str = "") -> MetricsReport:
    """Threshold on dev, every error rate on test."""
    thr = select_threshold(dev)
    a, b, c = apcer_bpcer_acer(test, thr)
    return MetricsReport(protocol_id, thr, a, b, c, hter(test, thr), auc(test), label)


@dataclass
class Protocol2Summary:
    reports: list[MetricsReport]
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)


METRIC_KEYS = ("apcer", "bpcer", "acer", "hter", "auc")


def aggregate_protocol2(reports: Sequence[MetricsReport]) -> Protocol2Summary:
    """Mean and sample standard deviation of each metric over P2.1-P2.4."""
    if len(reports) != 4:
        raise ValueError(f"protocol 2 aggregation needs exactly 4 reports, got {len(reports)}")
    mean, std = {}, {}
    for k in METRIC_KEYS:
        vals = np.array(sorted(getattr(r, k) for r in reports), dtype=np.float64)
        mean[k] = float(vals.mean())
        std[k] = float(vals.std(ddof=1))
    return Protocol2Summary(list(reports), mean, std)


# ---------------------------------------------------------------- reporting

REPORT_FIELDS = ["protocol", "label", "threshold", "apcer", "bpcer", "acer", "hter", "auc"]


def reports_csv(reports: Sequence[MetricsReport], summary: Protocol2Summary | None = None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.percent_row())
    if summary is not None:
        row = {"protocol": "P2", "label": "mean±std", "threshold": ""}
        for k in METRIC_KEYS:
            row[k] = f"{100 * summary.mean[k]:.2f}±{100 * summary.std[k]:.2f}"
        w.writerow(row)
    return buf.getvalue()


def reports_json(reports: Sequence[MetricsReport], summary: Protocol2Summary | None = None) -> dict:
    """JSON document: ``{"units": "percent", "rows": [...], "raw": [...], "protocol2": {...}}``.

    ``raw`` repeats the rows as unrounded fractions.
    """
    doc = {"units": "percent", "rows": [r.percent_row() for r in reports],
           "raw": [asdict(r) for r in reports]}
    if summary is not None:
        doc["protocol2"] = {"mean": {k: round(100 * v, 2) for k, v in summary.mean.items()},
                            "std": {k: round(100 * v, 2) for k, v in summary.std.items()}}
    return doc


def write_reports(reports: Sequence[MetricsReport], out_dir, stem: str = "metrics",
                  summary: Protocol2Summary | None = None) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
    csv_path.write_text(reports_csv(reports, summary), encoding="utf-8")
    json_path.write_text(json.dumps(reports_json(reports, summary), indent=2, ensure_ascii=False) + "\n",
                         encoding="utf-8")
    return csv_path, json_path


def report_from_row(row: dict) -> MetricsReport:
    """Inverse of ``percent_row`` (fractions restored)."""
    return MetricsReport(row["protocol"], float(row["threshold"]),
                         *(float(row[k]) / 100 for k in METRIC_KEYS), label=row.get("label", ""))
