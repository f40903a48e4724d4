"""Volume-level classification metrics (accuracy, per-class P/R/F1, macro-F1)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .ingest import LABELS


@dataclass
class MetricsReport:
    accuracy: float
    precision: list
    recall: list
    f1: list
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: list
    n: int
    undefined: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.append(name)
        return 0.0
    return float(num / den)


def confusion_matrix(y_true, y_pred, n_classes=2):
    """Counts with rows = true class, columns = predicted class."""
    cm = np.zeros((n_classes, n_classes), dtype=int)
    for t, p in zip(y_true, y_pred):
        cm[int(t), int(p)] += 1
    return cm


def metrics_from_labels(y_true, y_pred):
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"{y_true.size} labels but {y_pred.size} predictions")
    if y_true.size == 0:
        raise ValueError("cannot evaluate zero predictions")
    cm = confusion_matrix(y_true, y_pred)
    undefined = []
    precision, recall, f1 = [], [], []
    for c, name in enumerate(LABELS):
        tp = cm[c, c]
        p = _ratio(tp, cm[:, c].sum(), f"precision[{name}]", undefined)
        r = _ratio(tp, cm[c, :].sum(), f"recall[{name}]", undefined)
        fp, fn = cm[:, c].sum() - tp, cm[c, :].sum() - tp
        f = _ratio(2 * tp, 2 * tp + fp + fn, f"f1[{name}]", undefined)
        precision.append(p)
        recall.append(r)
        f1.append(f)
    return MetricsReport(
        accuracy=float(np.trace(cm) / cm.sum()),
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=float(np.mean(precision)),
        macro_recall=float(np.mean(recall)),
        macro_f1=float(np.mean(f1)),
        confusion=cm.tolist(),
        n=int(cm.sum()),
        undefined=undefined,
    )


def evaluate(predictions, labels):
    """Score volume predictions against a ``{volume_id: class index}`` mapping."""
    pred_ids = [p.volume_id for p in predictions]
    if len(set(pred_ids)) != len(pred_ids):
        raise ValueError("duplicate volume ids among predictions")
    missing = set(pred_ids) ^ set(labels)
    if missing:
        raise ValueError(f"prediction/label id mismatch: {sorted(missing)[:5]}")
    y_true = [labels[i] for i in pred_ids]
    if any(y is None for y in y_true):
        raise ValueError("every evaluated volume needs a label")
    return metrics_from_labels(y_true, [p.predicted_class for p in predictions])
