"""Confusion matrices and one-vs-rest classification metrics.

Rows of a confusion matrix are true classes, columns predicted classes.
Ratios whose denominator is zero are reported as ``None`` ("undefined")
rather than 0.
"""

import csv
import io
from decimal import ROUND_HALF_UP, Decimal
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import ArgumentError
from .model import CLASS_NAMES

UNDEFINED = "undefined"


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: List[str]

    @property
    def total(self):
        return int(self.counts.sum())

    def permuted(self, perm):
        """The same matrix with classes reordered so new class ``i`` is old ``perm[i]``."""
        perm = list(perm)
        return ConfusionMatrix(self.counts[np.ix_(perm, perm)], [self.class_names[p] for p in perm])


@dataclass
class ClassMetrics:
    class_names: List[str]
    tp: List[int]
    fp: List[int]
    tn: List[int]
    fn: List[int]
    precision: List[Optional[float]]
    recall: List[Optional[float]]
    f1: List[Optional[float]]
    specificity: List[Optional[float]]
    accuracy: float
    macro_sensitivity: Optional[float]
    macro_specificity: Optional[float]


class UndefinedRowError(ArgumentError):
    pass


def confusion(true_labels, predicted_labels, n_classes=None, class_names=None) -> ConfusionMatrix:
    names = list(class_names) if class_names is not None else list(CLASS_NAMES)
    k = len(names) if n_classes is None else int(n_classes)
    t = np.asarray(true_labels)
    p = np.asarray(predicted_labels)
    if t.ndim != 1 or p.ndim != 1 or len(t) != len(p):
        raise ArgumentError(f"label lists differ in length: {len(t)} vs {len(p)}")
    if len(t) == 0:
        raise ArgumentError("confusion matrix of zero samples")
    for arr in (t, p):
        if not np.issubdtype(arr.dtype, np.integer) or arr.min() < 0 or arr.max() >= k:
            raise ArgumentError(f"labels must be integers in [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts, names[:k])


def normalize(cm: ConfusionMatrix) -> np.ndarray:
    sums = cm.counts.sum(axis=1)
    for i, s in enumerate(sums):
        if s == 0:
            raise UndefinedRowError(f"no samples of true class {cm.class_names[i]!r}; row cannot be normalised")
    return cm.counts / sums[:, None].astype(np.float64)


def _ratio(num, den):
    return None if den == 0 else num / den


def _mean(values):
    if any(v is None for v in values):
        return None
    return float(np.mean(values))


def per_class(cm: ConfusionMatrix) -> ClassMetrics:
    c = cm.counts
    total = int(c.sum())
    if total == 0:
        raise ArgumentError("metrics of an empty confusion matrix")
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    tn = total - tp - fp - fn
    precision = [_ratio(int(a), int(a + b)) for a, b in zip(tp, fp)]
    recall = [_ratio(int(a), int(a + b)) for a, b in zip(tp, fn)]
    specificity = [_ratio(int(a), int(a + b)) for a, b in zip(tn, fp)]
    f1 = []
    for p, r in zip(precision, recall):
        f1.append(None if p is None or r is None or p + r == 0 else 2 * p * r / (p + r))
    return ClassMetrics(
        list(cm.class_names),
        tp.tolist(), fp.tolist(), tn.tolist(), fn.tolist(),
        precision, recall, f1, specificity,
        accuracy=float(np.trace(c)) / total,
        macro_sensitivity=_mean(recall),
        macro_specificity=_mean(specificity),
    )


# ---------------------------------------------------------------- reports


def _fmt(v, digits=4):
    return UNDEFINED if v is None else f"{v:.{digits}f}"


def metrics_csv(m: ClassMetrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "tp", "fp", "tn", "fn", "precision", "recall", "f1", "specificity"])
    for i, name in enumerate(m.class_names):
        w.writerow([name, m.tp[i], m.fp[i], m.tn[i], m.fn[i],
                    _fmt(m.precision[i]), _fmt(m.recall[i]), _fmt(m.f1[i]), _fmt(m.specificity[i])])
    w.writerow(["accuracy", "", "", "", "", "", "", "", _fmt(m.accuracy)])
    w.writerow(["macro_sensitivity", "", "", "", "", "", "", "", _fmt(m.macro_sensitivity)])
    w.writerow(["macro_specificity", "", "", "", "", "", "", "", _fmt(m.macro_specificity)])
    return buf.getvalue()


def normalized_block(cm: ConfusionMatrix) -> str:
    """Row-normalised matrix as percentages, true classes down, predictions across."""
    width = max(8, max(len(n) for n in cm.class_names) + 2)
    lines = ["true \\ predicted".ljust(width + 8) + "".join(n.rjust(width) for n in cm.class_names)]
    sums = cm.counts.sum(axis=1)
    for i, name in enumerate(cm.class_names):
        if sums[i] == 0:
            cells = [UNDEFINED.rjust(width)] * len(cm.class_names)
        else:
            cells = [f"{100.0 * v / sums[i]:.1f}%".rjust(width) for v in cm.counts[i]]
        lines.append(f"{name} (n={sums[i]})".ljust(width + 8) + "".join(cells))
    return "\n".join(lines) + "\n"


def text_report(cm: ConfusionMatrix, m: Optional[ClassMetrics] = None) -> str:
    m = per_class(cm) if m is None else m
    out = [normalized_block(cm), ""]
    out.append(f"{'class':<10}{'precision':>11}{'recall':>9}{'f1':>9}")
    for i, name in enumerate(m.class_names):
        out.append(f"{name:<10}{_fmt(m.precision[i], 2):>11}{_fmt(m.recall[i], 2):>9}{_fmt(m.f1[i], 2):>9}")
    out.append("")
    out.append(f"accuracy           {_fmt(m.accuracy)}")
    out.append(f"macro sensitivity  {_fmt(m.macro_sensitivity)}")
    out.append(f"macro specificity  {_fmt(m.macro_specificity)}")
    return "\n".join(out) + "\n"


def reconstructed_matrices():
    """Validation confusion matrices consistent with the reported cohort sizes
    (11 newborn, 18 one-year, 35 three-year) and per-class score tables."""
    return {
        "3d": ConfusionMatrix(np.array([[11, 0, 0], [0, 18, 0], [0, 1, 34]]), list(CLASS_NAMES)),
        "2d": ConfusionMatrix(np.array([[10, 1, 0], [0, 18, 0], [0, 2, 33]]), list(CLASS_NAMES)),
    }


def rounded(values: Sequence[Optional[float]], digits=2):
    """Half-up decimal rounding, the way printed tables round."""
    q = Decimal(1).scaleb(-digits)
    return [None if v is None else float(Decimal(repr(float(v))).quantize(q, ROUND_HALF_UP)) for v in values]
