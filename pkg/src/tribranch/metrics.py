"""Segmentation evaluation: confusion matrix, per-class IoU, mean IoU."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import IGNORE_ID


@dataclass
class ConfusionMatrix:
    """C x C pixel counts, rows ground truth, columns prediction.

    Ignore-id ground-truth pixels are excluded, so the total count
    equals the number of evaluated pixels.
    """

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def accumulate(self, pred: np.ndarray, gt: np.ndarray, ignore_id: int = IGNORE_ID) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        c = self.num_classes
        valid = gt != ignore_id
        g = gt[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        if g.size:
            if g.min() < 0 or g.max() >= c:
                raise ValueError(f"ground-truth id outside [0, {c - 1}]")
            if p.min() < 0 or p.max() >= c:
                raise ValueError(f"prediction id outside [0, {c - 1}]")
            self.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self


@dataclass
class IouReport:
    """Per-class intersection over union and their mean.

    Classes absent from both ground truth and prediction have an empty
    union; they are reported as undefined (NaN) and excluded from the
    mean.
    """

    iou: np.ndarray  # NaN where undefined
    miou: float

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.iou)

    def lines(self, class_names: Optional[Sequence[str]] = None) -> list[str]:
        """Machine-readable form, one "name value" pair per line."""
        names = self._names(class_names)
        out = []
        for name, v in zip(names, self.iou):
            out.append(f"iou.{name} {'undefined' if np.isnan(v) else format(v, '.6f')}")
        out.append(f"miou {format(self.miou, '.6f')}")
        return out

    def table(self, class_names: Optional[Sequence[str]] = None) -> str:
        names = self._names(class_names)
        width = max(len(n) for n in names + ["mean IoU"])
        rows = [
            f"{name:<{width}}  {'   --' if np.isnan(v) else format(v, '.4f')}"
            for name, v in zip(names, self.iou)
        ]
        rows.append("-" * (width + 8))
        rows.append(f"{'mean IoU':<{width}}  {self.miou:.4f}")
        return "\n".join(rows)

    def _names(self, class_names) -> list[str]:
        if class_names is None:
            return [f"class{i}" for i in range(len(self.iou))]
        if len(class_names) != len(self.iou):
            raise ValueError("class name count does not match class count")
        return list(class_names)


def iou_report(cm: ConfusionMatrix) -> IouReport:
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.full(cm.num_classes, np.nan)
    defined = denom > 0
    iou[defined] = tp[defined] / denom[defined]
    miou = float(iou[defined].mean()) if defined.any() else float("nan")
    return IouReport(iou=iou, miou=miou)


def evaluate_predictions(model, which: str, dataset, ignore_id: int = IGNORE_ID) -> IouReport:
    """Run one branch over a labeled dataset and report IoU."""
    from .tensor import Tensor

    if dataset.masks is None:
        raise ValueError("evaluation needs a dataset with masks")
    cm = ConfusionMatrix.empty(model.spec.num_classes)
    for i in range(len(dataset)):
        pred, _ = model.predict(which, Tensor(dataset.images[i]))
        cm.accumulate(pred, dataset.masks[i], ignore_id)
    return iou_report(cm)
