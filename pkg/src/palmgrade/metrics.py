"""Multi-class evaluation: confusion matrix, precision/recall/F1, one-vs-rest
ROC curves, trapezoid AUC and micro/macro aggregation, plus the JSON/CSV
report writers and their readers.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError, SingleClassError

MICRO = "micro"
MACRO = "macro"


def _labels(y, k, what):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeError(f"{what} must be a 1-D label vector, got shape {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise DataError(f"{what} must hold integer class labels")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= k):
        bad = int(y[(y < 0) | (y >= k)][0])
        raise DataError(f"{what} label {bad} out of range [0, {k})")
    return y


def default_names(k: int) -> list[str]:
    return [str(i) for i in range(k)]


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    classes: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def supports(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def accuracy(self) -> float:
        return int(np.trace(self.counts)) / self.total


def confusion_matrix(true, pred, k: int, classes=None) -> ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""
    if k < 1:
        raise DataError(f"class count must be >= 1, got {k}")
    t = _labels(true, k, "true")
    p = _labels(pred, k, "predicted")
    if t.shape != p.shape:
        raise ShapeError(f"true ({t.size}) and predicted ({p.size}) lengths differ")
    counts = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    classes = list(classes) if classes is not None else default_names(k)
    if len(classes) != k:
        raise ShapeError(f"{len(classes)} class names for {k} classes")
    return ConfusionMatrix(counts.astype(np.int64), classes)


def accuracy(true, pred) -> float:
    t, p = np.asarray(true), np.asarray(pred)
    if t.shape != p.shape or t.size == 0:
        raise ShapeError("accuracy needs two equal-length, non-empty label vectors")
    return int((t == p).sum()) / t.size


def _ratio(num, den):
    """num/den elementwise, 0 where den == 0; also returns the undefined mask."""
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    undefined = den == 0
    out = np.divide(num, den, out=np.zeros_like(num), where=~undefined)
    return out, undefined


def f1_score(precision, recall):
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    return _ratio(2 * p * r, p + r)


@dataclass
class ClassReport:
    classes: list[str]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    macro: dict
    weighted: dict
    micro: dict
    # per class: which of precision / recall / f1 hit a zero denominator
    undefined: dict = field(default_factory=dict)

    def rows(self):
        for i, name in enumerate(self.classes):
            yield name, float(self.precision[i]), float(self.recall[i]), float(self.f1[i]), \
                int(self.support[i])

    def format(self) -> str:
        width = max(12, *(len(c) for c in self.classes))
        lines = [f"{'':{width}s} precision    recall  f1-score   support"]
        for name, p, r, f, s in self.rows():
            lines.append(f"{name:>{width}s} {p:9.4f} {r:9.4f} {f:9.4f} {s:9d}")
        n = int(self.support.sum())
        lines.append(f"{'accuracy':>{width}s} {'':9s} {'':9s} {self.accuracy:9.4f} {n:9d}")
        for tag, avg in (("macro avg", self.macro), ("weighted avg", self.weighted)):
            lines.append(f"{tag:>{width}s} {avg['precision']:9.4f} {avg['recall']:9.4f} "
                         f"{avg['f1']:9.4f} {n:9d}")
        return "\n".join(lines)


def class_report(cm: ConfusionMatrix) -> ClassReport:
    counts = cm.counts.astype(np.int64)
    n = int(counts.sum())
    if n < 1:
        raise DataError("classification report needs at least one sample")
    tp = np.diag(counts)
    predicted = counts.sum(axis=0)
    support = counts.sum(axis=1)
    precision, p_undef = _ratio(tp, predicted)
    recall, r_undef = _ratio(tp, support)
    f1, f_undef = f1_score(precision, recall)
    weights = support / n
    macro = {"precision": float(precision.mean()), "recall": float(recall.mean()),
             "f1": float(f1.mean())}
    weighted = {"precision": float((precision * weights).sum()),
                "recall": float((recall * weights).sum()), "f1": float((f1 * weights).sum())}
    # pooled counts: in single-label data FP total == FN total == n - TP total
    tp_sum = int(tp.sum())
    fp_sum = int(predicted.sum()) - tp_sum
    fn_sum = int(support.sum()) - tp_sum
    mp, _ = _ratio(tp_sum, tp_sum + fp_sum)
    mr, _ = _ratio(tp_sum, tp_sum + fn_sum)
    mf, _ = f1_score(mp, mr)
    micro = {"precision": float(mp), "recall": float(mr), "f1": float(mf)}
    undefined = {name: {"precision": bool(p_undef[i]), "recall": bool(r_undef[i]),
                        "f1": bool(f_undef[i])}
                 for i, name in enumerate(cm.classes)
                 if p_undef[i] or r_undef[i] or f_undef[i]}
    return ClassReport(list(cm.classes), precision, recall, f1, support, tp_sum / n,
                       macro, weighted, micro, undefined)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    label: str = ""


def roc_curve(truths, scores, label: str = "") -> RocCurve:
    """One point per distinct score, swept from the highest score down.

    The curve starts at (0, 0) with threshold +inf; the lowest distinct
    score lands on (1, 1).
    """
    y = np.asarray(truths).reshape(-1)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if y.shape != s.shape:
        raise ShapeError(f"{y.size} truths but {s.size} scores")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("ROC truths must be binary 0/1")
    if not np.isfinite(s).all():
        raise DataError("ROC scores must be finite")
    y = y.astype(np.int64)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(f"ROC needs both classes present ({n_pos} positive, "
                               f"{n_neg} negative)")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    ends = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[ends]
    fps = ends + 1 - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thresholds = np.r_[np.inf, s[ends]]
    return RocCurve(fpr, tpr, thresholds, label)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve over FPR."""
    x, y = curve.fpr, curve.tpr
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1])) / 2)


@dataclass
class AucSummary:
    per_class: dict
    micro: float
    macro: float
    absent: list = field(default_factory=list)


@dataclass
class MulticlassRoc:
    per_class: dict
    micro: RocCurve
    macro: RocCurve
    summary: AucSummary


def _macro_curve(curves) -> RocCurve:
    grid = np.unique(np.concatenate([c.fpr for c in curves]))
    mean_tpr = np.zeros_like(grid)
    for c in curves:
        # at a vertical step take the upper point, so every curve is a function of FPR
        last = np.r_[np.flatnonzero(np.diff(c.fpr)), c.fpr.size - 1]
        mean_tpr += np.interp(grid, c.fpr[last], c.tpr[last])
    mean_tpr /= len(curves)
    fpr = np.r_[0.0, grid]
    tpr = np.r_[0.0, mean_tpr]
    return RocCurve(fpr, tpr, np.full(fpr.size, np.nan), MACRO)


def multiclass_roc(true, scores, classes=None) -> MulticlassRoc:
    """One-vs-rest curves per class, a micro curve over all flattened
    (indicator, score) pairs, and the macro mean.

    A class with no positives (or no negatives) gets no curve; it is listed
    in ``summary.absent`` and excluded from the macro average.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError(f"scores must be N x K, got shape {scores.shape}")
    n, k = scores.shape
    t = _labels(true, k, "true")
    if t.size != n:
        raise ShapeError(f"{t.size} labels for {n} score rows")
    classes = list(classes) if classes is not None else default_names(k)
    indicator = np.zeros((n, k), dtype=np.int64)
    indicator[np.arange(n), t] = 1
    per_class, per_auc, absent = {}, {}, []
    for j, name in enumerate(classes):
        try:
            per_class[name] = roc_curve(indicator[:, j], scores[:, j], name)
        except SingleClassError:
            absent.append(name)
            per_auc[name] = None
            continue
        per_auc[name] = auc(per_class[name])
    if not per_class:
        raise SingleClassError("no class has both positives and negatives")
    micro = roc_curve(indicator.reshape(-1), scores.reshape(-1), MICRO)
    macro = _macro_curve(list(per_class.values()))
    present = [v for v in per_auc.values() if v is not None]
    summary = AucSummary(per_auc, auc(micro), float(np.mean(present)), absent)
    return MulticlassRoc(per_class, micro, macro, summary)


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    report: ClassReport
    roc: MulticlassRoc

    def to_dict(self) -> dict:
        rep, s = self.report, self.roc.summary
        names = rep.classes
        return {
            "classes": names,
            "accuracy": rep.accuracy,
            "auc": {"micro": s.micro, "macro": s.macro, "per_class": dict(s.per_class)},
            "f1": {"micro": rep.micro["f1"], "macro": rep.macro["f1"],
                   "per_class": {c: float(v) for c, v in zip(names, rep.f1)}},
            "precision": {c: float(v) for c, v in zip(names, rep.precision)},
            "recall": {c: float(v) for c, v in zip(names, rep.recall)},
            "support": {c: int(v) for c, v in zip(names, rep.support)},
            "undefined": rep.undefined,
            "absent_classes": list(s.absent),
            "confusion_matrix": self.confusion.counts.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def evaluate_scores(true, scores, classes=None) -> EvalReport:
    """Full report for integer labels and an N x K score matrix (argmax predictions)."""
    scores = np.asarray(scores)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ShapeError(f"scores must be a non-empty N x K matrix, got {scores.shape}")
    k = scores.shape[1]
    cm = confusion_matrix(true, scores.argmax(axis=1), k, classes)
    return EvalReport(cm, class_report(cm), multiclass_roc(true, scores, cm.classes))


def _fmt(v: float) -> str:
    if math.isnan(v):
        return ""
    return repr(float(v))


def roc_csv(roc: MulticlassRoc) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "fpr", "tpr", "threshold"])
    for curve in [*roc.per_class.values(), roc.micro, roc.macro]:
        for x, y, th in zip(curve.fpr, curve.tpr, curve.thresholds):
            w.writerow([curve.label, _fmt(x), _fmt(y), _fmt(th)])
    return buf.getvalue()


def read_roc_csv(text: str) -> dict[str, RocCurve]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["series", "fpr", "tpr", "threshold"]:
        raise DataError("ROC CSV must start with the header series,fpr,tpr,threshold")
    acc: dict[str, list] = {}
    for row in rows[1:]:
        name, x, y, th = row
        acc.setdefault(name, []).append((float(x), float(y), float(th) if th else math.nan))
    return {name: RocCurve(*(np.array(col) for col in zip(*pts)), name)
            for name, pts in acc.items()}


def confusion_csv(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred", *cm.classes])
    for name, row in zip(cm.classes, cm.counts):
        w.writerow([name, *(int(v) for v in row)])
    return buf.getvalue()


def read_confusion_csv(text: str) -> ConfusionMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][:1] != ["true\\pred"]:
        raise DataError("confusion CSV must start with a true\\pred header")
    classes = rows[0][1:]
    counts = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
    if counts.shape != (len(classes), len(classes)):
        raise DataError(f"confusion CSV is {counts.shape}, expected {len(classes)} square")
    return ConfusionMatrix(counts, classes)


def write_text(path, text: str):
    with open(path, "w", newline="\n") as fh:
        fh.write(text)
