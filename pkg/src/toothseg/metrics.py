"""Accuracy, mean IoU and Dice per sample, aggregated per jaw.

mIoU and DSC average over the classes present in the truth or the
prediction of each sample; samples are then averaged with equal weight.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from fractions import Fraction

import numpy as np

N_CLASSES = 33


@dataclass
class MetricReport:
    accuracy: float
    miou: float
    dsc: float
    per_class_iou: list = field(default_factory=list)   # None for absent classes
    per_class_dsc: list = field(default_factory=list)
    n_samples: int = 1

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "miou": self.miou, "dsc": self.dsc,
                "per_class_iou": self.per_class_iou, "per_class_dsc": self.per_class_dsc,
                "n_samples": self.n_samples}


def evaluate(pred, truth, n_classes: int = N_CLASSES) -> MetricReport:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction has {pred.size} labels, truth has {truth.size}")
    if pred.size == 0:
        raise ValueError("empty label maps")
    inter = np.bincount(truth[pred == truth], minlength=n_classes).astype(np.float64)
    n_pred = np.bincount(pred, minlength=n_classes).astype(np.float64)
    n_true = np.bincount(truth, minlength=n_classes).astype(np.float64)
    union = n_pred + n_true - inter
    present = union > 0
    iou = np.divide(inter, union, out=np.zeros(n_classes), where=present)
    dice = np.divide(2 * inter, n_pred + n_true, out=np.zeros(n_classes), where=present)
    # class means from the integer counts, rounded once
    cls = np.flatnonzero(present)
    miou = sum(Fraction(int(inter[c]), int(union[c])) for c in cls) / len(cls)
    dsc = sum(Fraction(int(2 * inter[c]), int(n_pred[c] + n_true[c])) for c in cls) / len(cls)
    return MetricReport(
        accuracy=float(Fraction(int((pred == truth).sum()), pred.size)),
        miou=float(miou),
        dsc=float(dsc),
        per_class_iou=[float(v) if p else None for v, p in zip(iou, present)],
        per_class_dsc=[float(v) if p else None for v, p in zip(dice, present)],
    )


def _mean_report(reports: list[MetricReport]) -> MetricReport:
    n = len(reports[0].per_class_iou)

    def class_mean(attr):
        out = []
        for c in range(n):
            vals = [getattr(r, attr)[c] for r in reports if getattr(r, attr)[c] is not None]
            out.append(float(np.mean(vals)) if vals else None)
        return out

    return MetricReport(
        accuracy=float(np.mean([r.accuracy for r in reports])),
        miou=float(np.mean([r.miou for r in reports])),
        dsc=float(np.mean([r.dsc for r in reports])),
        per_class_iou=class_mean("per_class_iou"),
        per_class_dsc=class_mean("per_class_dsc"),
        n_samples=len(reports),
    )


@dataclass
class AggregateReport:
    groups: dict  # "mandible" / "maxillary" / "all" -> MetricReport or None

    def __getitem__(self, key):
        return self.groups[key]

    def as_dict(self) -> dict:
        return {k: (v.as_dict() if v is not None else None) for k, v in self.groups.items()}


def aggregate(reports: list[MetricReport], jaws: list[str] | None = None) -> AggregateReport:
    """Unweighted per-sample means for each jaw group and overall."""
    if not reports:
        raise ValueError("cannot aggregate an empty list of reports")
    jaws = jaws or ["all"] * len(reports)
    if len(jaws) != len(reports):
        raise ValueError("one jaw tag per report required")
    groups = {}
    for jaw in ("mandible", "maxillary"):
        sel = [r for r, j in zip(reports, jaws) if j == jaw]
        groups[jaw] = _mean_report(sel) if sel else None
    groups["all"] = _mean_report(reports)
    return AggregateReport(groups)


def format_table(agg: AggregateReport, scale: float = 100.0, digits: int = 2) -> str:
    """Aligned text table with Mandible / Maxillary / All column groups."""
    cols = ("mandible", "maxillary", "all")
    head1 = f"{'':<10}" + "".join(f"| {c.capitalize():^23}" for c in cols)
    head2 = f"{'':<10}" + "".join(f"| {'mIoU':>7}{'DSC':>8}{'Acc':>8}" for _ in cols)
    row = f"{'score':<10}"
    for c in cols:
        r = agg.groups.get(c)
        if r is None:
            row += f"| {'-':>7}{'-':>8}{'-':>8}"
        else:
            row += "| " + "".join(f"{v * scale:>{w}.{digits}f}"
                                  for v, w in ((r.miou, 7), (r.dsc, 8), (r.accuracy, 8)))
    n = f"{'samples':<10}" + "".join(
        f"| {(agg.groups[c].n_samples if agg.groups.get(c) else 0):>23}" for c in cols)
    rule = "-" * len(head1)
    return "\n".join([rule, head1, head2, rule, row, n, rule]) + "\n"


def report_json(agg: AggregateReport) -> str:
    return json.dumps(agg.as_dict(), indent=2) + "\n"
