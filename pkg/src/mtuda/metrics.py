"""Confusion matrices, per-class IoU, per-domain mIoU and report tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mtuda.errors import DimensionError, ValidationError
from mtuda.synth import CLASS_NAMES
from mtuda.tensor import IGNORE

SHORT_NAMES = ("flat", "constr.", "object", "nature", "sky", "human", "vehicle")


@dataclass
class ConfusionMatrix:
    """Row = ground truth, column = prediction."""

    num_classes: int = len(CLASS_NAMES)
    counts: np.ndarray = None
    ignored_pixels: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts, self.ignored_pixels + other.ignored_pixels)


def accumulate(cm: ConfusionMatrix, pred, truth) -> None:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction shape {pred.shape} != ground-truth shape {truth.shape}")
    keep = truth != IGNORE
    cm.ignored_pixels += int(keep.size - np.count_nonzero(keep))
    t = truth[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    C = cm.num_classes
    if t.size and (t.max() >= C or p.max() >= C or p.min() < 0):
        raise ValidationError(f"label outside 0..{C - 1}")
    cm.counts += np.bincount(t * C + p, minlength=C * C).reshape(C, C)


@dataclass
class ClassIoU:
    per_class: list  # float, or nan where the class never occurs (flagged)
    miou: float
    absent: list = field(default_factory=list)


def iou_from_cm(cm: ConfusionMatrix) -> ClassIoU:
    """Per-class ``TP / (TP + FP + FN)``; zero-denominator classes are excluded from the mean."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(axis=0) + c.sum(axis=1) - tp
    per, absent = [], []
    for k in range(cm.num_classes):
        if denom[k] == 0:
            per.append(math.nan)
            absent.append(k)
        else:
            per.append(float(tp[k] / denom[k]))
    valid = [v for v in per if not math.isnan(v)]
    return ClassIoU(per, float(np.mean(valid)) if valid else math.nan, absent)


@dataclass
class DomainResult:
    per_class_iou: list
    miou: float
    absent: list
    ignored_pixels: int = 0
    fingerprint: str = ""


@dataclass
class EvalReport:
    per_domain: dict  # domain_id -> DomainResult, in evaluation order

    @property
    def miou_avg(self) -> float:
        return float(np.mean([r.miou for r in self.per_domain.values()]))


def confusion_for(state, dataset, batch_size: int = 16) -> ConfusionMatrix:
    from mtuda.trainers import predict

    cm = ConfusionMatrix(state.cfg.num_classes)
    for start in range(0, len(dataset), batch_size):
        idx = list(range(start, min(start + batch_size, len(dataset))))
        preds = predict(state, dataset.images(idx))
        for p, t in zip(preds, dataset.eval_labels(idx)):
            accumulate(cm, p, t)
    return cm


def evaluate(state, datasets) -> EvalReport:
    """Per-domain mIoU of the deployment head on labelled validation sets.

    Domains need not have been seen during training (direct transfer).
    """
    out = {}
    for ds in datasets:
        cm = confusion_for(state, ds)
        r = iou_from_cm(cm)
        out[ds.domain_id] = DomainResult(r.per_class, r.miou, r.absent, cm.ignored_pixels, ds.fingerprint())
    return EvalReport(out)


def _pct(v):
    return "  n/a" if math.isnan(v) else f"{100 * v:5.1f}"


def _delta(v, b):
    if math.isnan(v) or math.isnan(b):
        return "    n/a"
    return f"{100 * (v - b):+7.1f}"


def render_report(report: EvalReport, baseline: EvalReport | None = None) -> str:
    """Fixed-width table; with a baseline, each row is followed by signed deltas."""
    width = max([len("domain"), len("mIoU Avg."), *(len(d) for d in report.per_domain)]) + 2
    cols = [f"{n:>8}" for n in SHORT_NAMES] + [f"{'mIoU':>8}"]
    lines = [f"{'domain':<{width}}" + "".join(cols), "-" * (width + 8 * len(cols))]
    for dom, r in report.per_domain.items():
        vals = [*r.per_class_iou, r.miou]
        lines.append(f"{dom:<{width}}" + "".join(f"{_pct(v):>8}" for v in vals))
        if baseline is not None and dom in baseline.per_domain:
            b = baseline.per_domain[dom]
            bvals = [*b.per_class_iou, b.miou]
            lines.append(f"{'  delta':<{width}}" + "".join(f"{_delta(v, w):>8}" for v, w in zip(vals, bvals)))
    avg = f"{'mIoU Avg.':<{width}}" + " " * (8 * len(SHORT_NAMES)) + f"{_pct(report.miou_avg):>8}"
    lines.append(avg)
    if baseline is not None:
        lines.append(f"{'  delta':<{width}}" + " " * (8 * len(SHORT_NAMES)) + f"{_delta(report.miou_avg, baseline.miou_avg):>8}")
    flagged = [f"{dom}: {', '.join(CLASS_NAMES[k] for k in r.absent)}" for dom, r in report.per_domain.items() if r.absent]
    if flagged:
        lines.append("absent classes (excluded from mIoU): " + "; ".join(flagged))
    return "\n".join(lines) + "\n"


def machine_report(report: EvalReport) -> str:
    """``domain<TAB>class<TAB>iou`` lines; ``miou`` and ``miou_avg`` rows close each block."""
    lines = []
    for dom, r in report.per_domain.items():
        for name, v in zip(CLASS_NAMES, r.per_class_iou):
            lines.append(f"{dom}\t{name}\t{v!r}")
        lines.append(f"{dom}\tmiou\t{r.miou!r}")
    lines.append(f"*\tmiou_avg\t{report.miou_avg!r}")
    return "\n".join(lines) + "\n"


def parse_machine_report(text: str) -> EvalReport:
    per = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValidationError(f"line {lineno}: expected 3 tab-separated fields", [(lineno, line)])
        dom, name, val = parts
        if dom == "*":
            continue
        r = per.setdefault(dom, DomainResult([math.nan] * len(CLASS_NAMES), math.nan, []))
        if name == "miou":
            r.miou = float(val)
        elif name in CLASS_NAMES:
            r.per_class_iou[CLASS_NAMES.index(name)] = float(val)
        else:
            raise ValidationError(f"line {lineno}: unknown class {name!r}", [(lineno, line)])
    for r in per.values():
        r.absent = [k for k, v in enumerate(r.per_class_iou) if math.isnan(v)]
    return EvalReport(per)
