"""Confusion matrices, IoU/mIoU over task class sets, and run statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import kernels
from .datamodel import IGNORE, TaskSchedule
from .errors import ShapeError
from .network import predict_proba


class ConfusionMatrix:
    """Counts ``[gt, pred]`` over a declared class set.

    Ground-truth pixels that are IGNORE or outside the class set are skipped;
    predictions must lie inside the class set.
    """

    def __init__(self, classes: Sequence[int]):
        self.classes = tuple(int(c) for c in classes)
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("duplicate classes in confusion matrix class set")
        n = len(self.classes)
        self.counts = np.zeros((n, n), dtype=np.int64)
        self._lut = np.full(256, -1, dtype=np.int64)
        for row, c in enumerate(self.classes):
            self._lut[c] = row

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, pred: np.ndarray, gt: np.ndarray, impl=None) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        p = pred.reshape(-1).astype(np.int64)
        g = gt.reshape(-1).astype(np.int64)
        if p.size and (p.min() < 0 or p.max() > 255):
            raise ValueError("prediction values outside 0..255")
        pr = self._lut[p]
        gr = self._lut[np.clip(g, 0, 255)]
        gr[(g == IGNORE) | (g < 0) | (g > 255)] = -1
        bad = (pr < 0) & (gr >= 0)
        if bad.any():
            raise ValueError(f"prediction classes {np.unique(p[bad]).tolist()} not in {self.classes}")
        kernels.confusion(self.counts, gr, pr, impl=impl)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.classes != self.classes:
            raise ValueError("cannot merge confusion matrices over different class sets")
        out = ConfusionMatrix(self.classes)
        out.counts = self.counts + other.counts
        return out

    __add__ = merge

    def iou(self) -> dict[int, float | None]:
        """Per-class IoU; ``None`` where the class never occurs in GT or prediction."""
        tp = np.diag(self.counts)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        return {c: (float(tp[i] / union[i]) if union[i] else None)
                for i, c in enumerate(self.classes)}


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.update(pred, gt)


def miou(cm: ConfusionMatrix, class_subset: Sequence[int] | None = None) -> float:
    """Mean IoU over ``class_subset``; zero-union classes are left out.

    Returns NaN if every class in the subset has zero union.
    """
    subset = cm.classes if class_subset is None else tuple(class_subset)
    if not subset:
        raise ValueError("mIoU over an empty class set")
    missing = set(subset) - set(cm.classes)
    if missing:
        raise ValueError(f"classes {sorted(missing)} not in the confusion matrix")
    ious = cm.iou()
    vals = [ious[c] for c in subset if ious[c] is not None]
    return float(np.mean(vals)) if vals else math.nan


def _t_quantile(p: float, df: int) -> float:
    # closed forms for df 1 and 2; scipy's inversion is ~1e-10 off there
    if df == 1:
        return math.tan(math.pi * (p - 0.5))
    if df == 2:
        return (2 * p - 1) / math.sqrt(2 * p * (1 - p))
    return float(stats.t.ppf(p, df=df))


def aggregate_runs(values: Sequence[float], confidence: float = 0.95, method: str = "t"):
    """``(mean, half_width)`` of a confidence interval for the mean.

    Student-t with ``n - 1`` degrees of freedom by default (``method="normal"``
    uses the normal quantile). The half-width is ``None`` for a single value.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size < 1:
        raise ValueError("need at least one value")
    mean = float(x.mean())
    if x.size == 1:
        return mean, None
    sem = x.std(ddof=1) / math.sqrt(x.size)
    if method == "t":
        q = _t_quantile(0.5 + confidence / 2, x.size - 1)
    elif method == "normal":
        q = stats.norm.ppf(0.5 + confidence / 2)
    else:
        raise ValueError(f"unknown interval method {method!r}")
    return mean, float(q * sem)


def format_mean_ci(mean: float, half: float | None, mean_digits: int = 1, ci_digits: int = 2) -> str:
    """Table-style rendering, e.g. ``47.4±0.66``."""
    if mean is None or (isinstance(mean, float) and math.isnan(mean)):
        return "-"
    if half is None:
        return f"{mean:.{mean_digits}f}"
    return f"{mean:.{mean_digits}f}±{half:.{ci_digits}f}"


def column_name(tasks: Sequence[int]) -> str:
    return "T" + "u".join(str(t) for t in tasks)


def stage_columns(t: int) -> list[tuple[str, tuple[int, ...]]]:
    """Columns reported after learning task ``t``: T1, T2, T1u2, T3, T1u2u3, ..."""
    cols = [(column_name([1]), (1,))]
    for s in range(2, t + 1):
        cols.append((column_name([s]), (s,)))
        cols.append((column_name(range(1, s + 1)), tuple(range(1, s + 1))))
    return cols


def parse_task_columns(spec: str, t: int) -> list[tuple[str, tuple[int, ...]]]:
    """Parse ``"1,2,union"`` style selections; ``union`` means all tasks up to ``t``."""
    cols = []
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        if token == "union":
            tasks = tuple(range(1, t + 1))
        else:
            tasks = tuple(int(x) for x in token.replace("u", "+").split("+"))
        cols.append((column_name(tasks), tasks))
    return cols


@dataclass
class MetricsReport:
    columns: dict = field(default_factory=dict)  # name -> mIoU (fraction)
    per_class: dict = field(default_factory=dict)  # name -> {class name: IoU or None}
    zero_union: dict = field(default_factory=dict)  # name -> [class names left out]

    def to_dict(self) -> dict:
        return {"columns": self.columns, "per_class": self.per_class, "zero_union": self.zero_union}


def evaluate_model(model, samples, schedule: TaskSchedule, t: int | None = None,
                   columns: Sequence[tuple[str, tuple[int, ...]]] | None = None,
                   batch_size: int = 32) -> MetricsReport:
    """mIoU per task column on fully labelled ``samples``.

    For each column the prediction is the argmax over that column's classes
    of the joint softmax, and ground truth outside those classes is ignored.
    """
    t = t or model.position
    columns = list(columns or stage_columns(t))
    cms = {}
    for name, tasks in columns:
        classes = tuple(c for s in tasks for c in schedule.classes(s))
        if max(classes) >= model.class_count:
            raise ValueError(f"column {name} needs classes the model does not predict")
        cms[name] = ConfusionMatrix(classes)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        probs = predict_proba(model, [s.image for s in chunk])
        for p, s in zip(probs, chunk):
            for name, cm in cms.items():
                idx = np.asarray(cm.classes)
                pred = idx[np.argmax(p[..., idx], axis=-1)]
                cm.update(pred, s.labels)
    report = MetricsReport()
    for name, cm in cms.items():
        report.columns[name] = miou(cm)
        ious = cm.iou()
        report.per_class[name] = {schedule.class_names[c]: v for c, v in ious.items()}
        report.zero_union[name] = [schedule.class_names[c] for c, v in ious.items() if v is None]
    return report


def render_table(rows: Sequence[tuple[str, str, dict]], columns: Sequence[str], scale: float = 100.0) -> str:
    """Aligned text table: one row per (method, stage), cells ``mean±ci``.

    Each cell value is either a float or a ``(mean, half_width)`` pair, in
    fractions; ``scale`` converts to percent.
    """
    header = ["Method", "Stages", *columns]
    body = []
    for method, stage, cells in rows:
        line = [method, stage]
        for col in columns:
            v = cells.get(col)
            if v is None:
                line.append("-")
            elif isinstance(v, (tuple, list)):
                mean, half = v
                line.append(format_mean_ci(None if mean is None else mean * scale,
                                           None if half is None else half * scale))
            else:
                line.append(format_mean_ci(v * scale, None))
        body.append(line)
    widths = [max(len(str(r[i])) for r in [header, *body]) for i in range(len(header))]
    fmt = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()  # noqa: E731
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([fmt(header), sep, *map(fmt, body)]) + "\n"
