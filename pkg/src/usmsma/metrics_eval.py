"""Confusion matrices, per-class IoU and grouped mean IoU."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

IGNORE = 255


@dataclass
class ConfusionMatrix:
    num_classes: int
    counts: np.ndarray = None
    ignored: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot add confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts, self.ignored + other.ignored)


def accumulate(cm: ConfusionMatrix, pred, truth, ignore_value: int = IGNORE) -> ConfusionMatrix:
    """Add one prediction/truth pair (rows = truth, cols = prediction) in place."""
    pred = np.asarray(pred).astype(np.int64).ravel()
    truth = np.asarray(truth).astype(np.int64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"prediction and truth differ in size ({pred.size} vs {truth.size})")
    keep = truth != ignore_value
    n = cm.num_classes
    p, t = pred[keep], truth[keep]
    if p.size and (p.min() < 0 or p.max() >= n or t.min() < 0 or t.max() >= n):
        raise ValueError(f"class index outside [0, {n})")
    cm.counts += np.bincount(t * n + p, minlength=n * n).reshape(n, n)
    cm.ignored += int((~keep).sum())
    return cm


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """TP / (TP + FP + FN); NaN where the class is absent from truth and prediction."""
    tp = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - tp
    out = np.full(cm.num_classes, np.nan)
    ok = denom > 0
    out[ok] = tp[ok] / denom[ok]
    return out


def miou(cm: ConfusionMatrix, subset: Sequence[int] | None = None, undefined: str = "exclude") -> float:
    iou = iou_per_class(cm)
    if subset is not None:
        iou = iou[list(subset)]
    if undefined == "zero":
        iou = np.nan_to_num(iou, nan=0.0)
    elif undefined != "exclude":
        raise ValueError(f"unknown undefined-class convention {undefined!r}")
    defined = iou[~np.isnan(iou)]
    if defined.size == 0:
        raise ValueError("no class with a defined IoU")
    return float(defined.mean())


@dataclass
class EvalRecord:
    name: str
    class_names: list[str]
    iou: list[float]
    miou: float
    groups: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "class_names": self.class_names,
                "iou": [None if np.isnan(v) else float(v) for v in self.iou],
                "miou": self.miou, "groups": self.groups, **self.extra}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRecord":
        known = {"name", "class_names", "iou", "miou", "groups"}
        iou = [float("nan") if v is None else float(v) for v in d["iou"]]
        return cls(d["name"], list(d["class_names"]), iou, float(d["miou"]), dict(d.get("groups", {})),
                   {k: v for k, v in d.items() if k not in known})


def evaluate_cm(cm: ConfusionMatrix, class_names: Sequence[str], name: str = "",
                background: Sequence[int] | None = None, undefined: str = "exclude") -> EvalRecord:
    """mIoU plus background/foreground group means when a grouping is given."""
    iou = iou_per_class(cm)
    groups = {}
    if background is not None:
        bg = sorted(background)
        fg = [c for c in range(cm.num_classes) if c not in bg]
        if bg:
            groups["background"] = miou(cm, bg, undefined)
        if fg:
            groups["foreground"] = miou(cm, fg, undefined)
    return EvalRecord(name, list(class_names), list(iou), miou(cm, None, undefined), groups)


def segment_eval(predict_fn, dataset, num_classes: int, batch_size: int = 16) -> ConfusionMatrix:
    """``predict_fn(images) -> label grid`` over a labeled dataset."""
    cm = ConfusionMatrix(num_classes)
    for s in range(0, len(dataset.images), batch_size):
        pred = predict_fn(dataset.images[s:s + batch_size])
        accumulate(cm, pred, dataset.labels[s:s + batch_size])
    return cm


def format_iou_table(records: Sequence[EvalRecord], background: Sequence[int] | None = None) -> str:
    """Per-class IoU table (percent), background classes then foreground, each
    block followed by its mean."""
    if not records:
        return ""
    names = records[0].class_names
    n = len(names)
    bg = sorted(background) if background is not None else []
    fg = [c for c in range(n) if c not in bg]
    cols: list[tuple[str, object]] = []
    if bg:
        cols += [(names[c], c) for c in bg] + [("bg-mean", "background")]
    cols += [(names[c], c) for c in fg]
    if bg:
        cols.append(("fg-mean", "foreground"))
    cols.append(("mIoU", "miou"))
    width = max(8, *(len(c[0]) + 1 for c in cols))
    label_w = max(10, *(len(r.name) + 1 for r in records))
    lines = ["method".ljust(label_w) + "".join(c[0].rjust(width) for c in cols)]
    for r in records:
        cells = []
        for _, key in cols:
            if key == "miou":
                v = r.miou
            elif isinstance(key, str):
                v = r.groups.get(key, float("nan"))
            else:
                v = r.iou[key]
            cells.append("n/a".rjust(width) if v is None or np.isnan(v) else f"{100 * v:.1f}".rjust(width))
        lines.append(r.name.ljust(label_w) + "".join(cells))
    return "\n".join(lines) + "\n"


def write_record(record: EvalRecord, path) -> None:
    with open(path, "w") as f:
        json.dump(record.to_dict(), f, indent=2, sort_keys=True)
