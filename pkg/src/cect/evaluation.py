"""Confusion counts, the six binary-classification metrics, and batched inference."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .errors import ContractError
from .tensor import Tensor, no_grad

METRIC_NAMES = ("acc", "npv", "ppv", "sen", "spe", "fos")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Binary counts with positive = 1."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ContractError(f"confusion count {name} must be a non-negative integer, got {v}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp

    def grid(self) -> list[list[int]]:
        """Rows are predicted (positive, negative); columns are true (positive, negative)."""
        return [[self.tp, self.fp], [self.fn, self.tn]]

    def to_dict(self) -> dict[str, int]:
        return asdict(self)


def predict_labels(logits) -> np.ndarray:
    """Argmax over two logits; an exact tie goes to the negative class."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    if z.ndim != 2 or z.shape[1] != 2:
        raise ContractError(f"expected logits of shape [N,2], got {z.shape}")
    return (z[:, 1] > z[:, 0]).astype(np.int64)


def confusion(predictions, labels) -> ConfusionMatrix:
    """Count outcomes; ``predictions`` are 0/1 labels or [N,2] logits."""
    pred = np.asarray(predictions)
    if pred.ndim == 2:
        pred = predict_labels(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape or pred.ndim != 1:
        raise ContractError(f"predictions {pred.shape} and labels {labels.shape} differ in length")
    for name, arr in (("predictions", pred), ("labels", labels)):
        if not np.isin(arr, (0, 1)).all():
            raise ContractError(f"{name} must be binary")
    p, t = pred == 1, labels == 1
    return ConfusionMatrix(
        tp=int((p & t).sum()), fp=int((p & ~t).sum()), fn=int((~p & t).sum()), tn=int((~p & ~t).sum())
    )


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass(frozen=True)
class MetricsReport:
    """Ratios in [0,1]; ``None`` marks a metric whose denominator is zero."""

    acc: float | None
    npv: float | None
    ppv: float | None
    sen: float | None
    spe: float | None
    fos: float | None
    cm: ConfusionMatrix

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in METRIC_NAMES}
        out.update(self.cm.to_dict())
        return out


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    if cm.total == 0:
        raise ContractError("metrics of an empty confusion matrix")
    return MetricsReport(
        acc=_ratio(cm.tp + cm.tn, cm.total),
        npv=_ratio(cm.tn, cm.tn + cm.fn),
        ppv=_ratio(cm.tp, cm.tp + cm.fp),
        sen=_ratio(cm.tp, cm.tp + cm.fn),
        spe=_ratio(cm.tn, cm.tn + cm.fp),
        fos=_ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn),
        cm=cm,
    )


def infer(model, images: np.ndarray, batch_size: int = 64, fn=None) -> np.ndarray:
    """Run ``fn`` (default: the model's forward) over batches without recording a graph."""
    fn = fn or model
    dtype = model.parameters()[0].dtype if model.parameters() else np.float32
    outs = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            outs.append(fn(Tensor(np.asarray(images[start : start + batch_size], dtype=dtype))).data)
    return np.concatenate(outs) if outs else np.zeros((0, 2))


@dataclass(frozen=True)
class Evaluation:
    loss: float
    report: MetricsReport
    logits: np.ndarray

    def to_dict(self) -> dict:
        return {"loss": self.loss, **self.report.to_dict()}


def evaluate(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> Evaluation:
    logits = infer(model, images, batch_size)
    loss = float(F.cross_entropy(Tensor(logits.astype(np.float64)), labels).data)
    return Evaluation(loss, metrics(confusion(logits, labels)), logits)
