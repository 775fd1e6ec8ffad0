"""Overlap metrics for segmentation masks and their per-dataset report.

Degenerate cases follow fixed conventions instead of raising: Dice of two
empty masks is 1.0, any other ratio with a zero denominator is 0.0. Either
way the affected metric name is recorded in the row's ``flags`` so means
over many images can be read with that in mind.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

METRIC_NAMES = ("dice", "sensitivity", "specificity", "precision", "fmeasure", "mae")
CSV_HEADER = ("image",) + METRIC_NAMES
MEAN_LABEL = "MEAN"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")


def _as_bool(mask) -> np.ndarray:
    m = np.asarray(mask)
    return m.astype(bool) if m.dtype != bool else m


def confusion_counts(pred, gt) -> ConfusionCounts:
    """Pixel tallies of a binary prediction against binary ground truth."""
    p, g = _as_bool(pred), _as_bool(gt)
    _same_shape(p, g)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp=tp, fp=fp, tn=p.size - tp - fp - fn, fn=fn)


def _ratio(num: int, den: int) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def dice_from_counts(c: ConfusionCounts) -> tuple[float, bool]:
    den = 2 * c.tp + c.fp + c.fn
    if den == 0:
        return 1.0, True
    return 2 * c.tp / den, False


def dice(a, b) -> float:
    """2|A and B| / (|A| + |B|); two empty masks score 1.0."""
    return dice_from_counts(confusion_counts(a, b))[0]


def sensitivity(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)[0]


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp)[0]


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp)[0]


def fmeasure(sens: float, prec: float) -> float:
    """Harmonic mean of sensitivity and precision; 0 when both are 0."""
    if sens + prec == 0:
        return 0.0
    return 2.0 * sens * prec / (sens + prec)


def mae(pred_prob, gt) -> float:
    """Mean absolute difference between a foreground probability plane and
    a binary ground truth. A binary prediction works too."""
    p = np.asarray(pred_prob, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    _same_shape(p, g)
    if p.size == 0:
        raise ValueError("mae of an empty plane")
    return float(np.abs(p - g).mean())


@dataclass(frozen=True)
class MetricRow:
    image: str
    dice: float
    sensitivity: float
    specificity: float
    precision: float
    fmeasure: float
    mae: float
    flags: frozenset = field(default=frozenset(), compare=False)

    def values(self) -> tuple:
        return tuple(getattr(self, n) for n in METRIC_NAMES)


def binary_row(name: str, pred, gt, prob=None) -> MetricRow:
    """All six metrics for one binary mask pair.

    ``prob`` is the predicted foreground probability used for MAE; without
    it MAE is taken on the binary prediction.
    """
    c = confusion_counts(pred, gt)
    flags = set()
    d, deg = dice_from_counts(c)
    if deg:
        flags.add("dice")
    sens, deg = _ratio(c.tp, c.tp + c.fn)
    if deg:
        flags.add("sensitivity")
    spec, deg = _ratio(c.tn, c.tn + c.fp)
    if deg:
        flags.add("specificity")
    prec, deg = _ratio(c.tp, c.tp + c.fp)
    if deg:
        flags.add("precision")
    f = fmeasure(sens, prec)
    if sens + prec == 0:
        flags.add("fmeasure")
    m = mae(prob if prob is not None else _as_bool(pred).astype(np.float64), gt)
    return MetricRow(name, d, sens, spec, prec, f, m, frozenset(flags))


def mean_row(rows: Sequence[MetricRow], name: str = MEAN_LABEL) -> MetricRow:
    """Arithmetic mean of each metric, summed in row order."""
    if not rows:
        raise ValueError("cannot average zero rows")
    n = len(rows)
    vals = [math.fsum(getattr(r, m) for r in rows) / n for m in METRIC_NAMES]
    flags = frozenset().union(*(r.flags for r in rows))
    return MetricRow(name, *vals, flags=flags)


@dataclass
class MulticlassResult:
    per_class: dict  # class id -> MetricRow
    macro: MetricRow


def multiclass_metrics(pred, gt, k: int, prob=None, name: str = "") -> MulticlassResult:
    """One-vs-rest metrics for classes 1..k-1 and their macro average.

    ``prob`` is an optional [k, H, W] class-probability stack for MAE.
    """
    p = np.asarray(pred)
    g = np.asarray(gt)
    _same_shape(p, g)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    for arr, what in ((p, "prediction"), (g, "ground truth")):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{what} labels must lie in [0, {k})")
    if prob is not None:
        prob = np.asarray(prob)
        if prob.shape != (k,) + p.shape:
            raise ValueError(f"probability stack must be {(k,) + p.shape}, got {prob.shape}")
    per_class = {}
    for cls in range(1, k):
        per_class[cls] = binary_row(
            f"{name}:class{cls}", p == cls, g == cls, None if prob is None else prob[cls]
        )
    macro = mean_row(list(per_class.values()), name=name)
    return MulticlassResult(per_class, macro)


@dataclass
class MetricReport:
    rows: list
    mean: MetricRow

    @classmethod
    def from_rows(cls, rows: Sequence[MetricRow]) -> "MetricReport":
        rows = list(rows)
        return cls(rows, mean_row(rows))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in self.rows + [self.mean]:
            writer.writerow([row.image] + [f"{v:.6f}" for v in row.values()])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def parse_csv(text: str) -> MetricReport:
    """Inverse of :meth:`MetricReport.to_csv` (values at 6-decimal precision)."""
    reader = csv.reader(io.StringIO(text))
    lines = [r for r in reader if r]
    if not lines or tuple(lines[0]) != CSV_HEADER:
        raise ValueError(f"CSV header must be {','.join(CSV_HEADER)}")
    rows = []
    for r in lines[1:]:
        if len(r) != len(CSV_HEADER):
            raise ValueError(f"CSV row has {len(r)} fields, expected {len(CSV_HEADER)}: {r}")
        rows.append(MetricRow(r[0], *(float(v) for v in r[1:])))
    if not rows or rows[-1].image != MEAN_LABEL:
        raise ValueError(f"CSV must end with a {MEAN_LABEL} row")
    return MetricReport(rows[:-1], rows[-1])


def evaluate_dataset(pairs: Iterable, mode: str = "binary", k: int = 3) -> MetricReport:
    """Per-image rows plus their mean.

    ``pairs`` yields ``(name, pred, gt)`` or ``(name, pred, gt, prob)``.
    In binary mode ``prob`` is a foreground plane; in multiclass mode it is a
    [k, H, W] stack and each row is the macro average over foreground classes.
    """
    if mode not in ("binary", "multiclass"):
        raise ValueError(f"mode must be binary or multiclass, got {mode!r}")
    rows = []
    for item in pairs:
        name, pred, gt = item[:3]
        prob: Optional[np.ndarray] = item[3] if len(item) > 3 else None
        if mode == "binary":
            rows.append(binary_row(name, pred, gt, prob))
        else:
            rows.append(multiclass_metrics(pred, gt, k, prob, name=name).macro)
    if not rows:
        raise ValueError("evaluate_dataset needs at least one pair")
    return MetricReport.from_rows(rows)
