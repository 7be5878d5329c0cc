"""Loss, SGD with step decay, segmentation metrics and the training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .attention import stack_observations
from .numerics import Tensor, as_tensor, backward

__all__ = [
    "LabelOutOfRange",
    "MissingGradients",
    "EmptyDataset",
    "TrainConfig",
    "MetricsReport",
    "cross_entropy_loss",
    "lr_schedule",
    "sgd_step",
    "confusion_matrix",
    "metrics_from_confusion",
    "evaluate",
    "EpochRecord",
    "TrainResult",
    "train",
    "write_history_csv",
]


class LabelOutOfRange(ValueError):
    pass


class MissingGradients(RuntimeError):
    pass


class EmptyDataset(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.1
    decay_factor: float = 0.5
    decay_every: int = 30
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0 or self.decay_every <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("training hyper-parameters must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")


@dataclass
class MetricsReport:
    miou: float
    avg_accuracy: float
    per_class_iou: np.ndarray
    confusion: np.ndarray

    @property
    def overall_accuracy(self):
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0


def cross_entropy_loss(logits, labels):
    """Mean over points of ``-log softmax(logits)[label]``, via log-sum-exp."""
    logits = as_tensor(logits)
    labels = np.asarray(labels).reshape(-1)
    C = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise LabelOutOfRange(f"labels must lie in [0, {C})")
    z = logits.data.reshape(-1, C)
    if len(z) != len(labels):
        raise ValueError(f"{len(z)} logit rows but {len(labels)} labels")
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return ((g / len(labels)) * grad.reshape(logits.shape),)

    return Tensor.from_op(np.asarray(loss), (logits,), bw)


def lr_schedule(epoch, cfg):
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


def sgd_step(params, lr):
    """Plain SGD, no momentum or weight decay.  Gradients are cleared after."""
    missing = [name for name, t in params.items() if t.grad is None]
    if missing:
        raise MissingGradients(f"no gradient for {', '.join(missing[:5])}")
    for t in params.values():
        t.data -= lr * t.grad
        t.grad = None
    return params


def confusion_matrix(true, pred, class_count):
    # widen first: uint16 labels would overflow in true * class_count
    true = np.asarray(true, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if true.shape != pred.shape:
        raise ValueError(f"{true.size} labels but {pred.size} predictions")
    for arr in (true, pred):
        if arr.size and (arr.min() < 0 or arr.max() >= class_count):
            raise LabelOutOfRange(f"labels must lie in [0, {class_count})")
    idx = true * class_count + pred
    return np.bincount(idx, minlength=class_count * class_count).reshape(class_count, class_count)


def metrics_from_confusion(conf):
    """IoU per class and macro averages.

    Rows of ``conf`` are ground truth, columns predictions.  mIoU averages
    over classes that occur in truth or prediction; average accuracy is the
    mean recall over classes that occur in the ground truth.
    """
    conf = np.asarray(conf)
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    union = tp + fp + fn
    present = union > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(present, tp / union, 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
    miou = float(iou[present].mean()) if present.any() else 0.0
    support = tp + fn > 0
    avg_acc = float(recall[support].mean()) if support.any() else 0.0
    return MetricsReport(miou, avg_acc, iou, conf)


def _predict_all(model, dataset, batch_size=256):
    preds, truth = [], []
    for lo in range(0, len(dataset), batch_size):
        batch = stack_observations(dataset[lo : lo + batch_size])
        preds.append(np.asarray(model.predict(batch)).reshape(-1))
        truth.append(batch.labels.reshape(-1))
    return np.concatenate(truth), np.concatenate(preds)


def evaluate(model, dataset, class_count=None):
    """Confusion-matrix metrics of ``model.predict`` over every point."""
    if len(dataset) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    if class_count is None:
        class_count = model.config.class_count if hasattr(model, "config") else model.class_count
    truth, pred = _predict_all(model, dataset)
    return metrics_from_confusion(confusion_matrix(truth, pred, class_count))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    miou: float
    avg_accuracy: float


@dataclass
class TrainResult:
    params: object
    history: list = field(default_factory=list)


def train(model, dataset, cfg, eval_set=None, log=None):
    """Mini-batch SGD over groups of points.

    Each epoch visits the groups in an order drawn from ``cfg.seed``; the
    loss for a batch is the mean cross-entropy over all its points.  The
    per-epoch metrics are measured on ``eval_set`` (default: the training
    groups) after the epoch's updates.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    eval_set = dataset if eval_set is None else eval_set
    params = model.params
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(len(dataset))
        total, count = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = stack_observations([dataset[i] for i in order[lo : lo + cfg.batch_size]])
            loss = cross_entropy_loss(model.forward(batch), batch.labels)
            backward(loss, params)
            sgd_step(params, lr)
            n = batch.labels.size
            total += float(loss.data) * n
            count += n
        report = evaluate(model, eval_set, model.config.class_count)
        rec = EpochRecord(epoch, lr, total / count, report.miou, report.avg_accuracy)
        if not math.isfinite(rec.loss):
            raise FloatingPointError(f"training diverged at epoch {epoch}")
        history.append(rec)
        if log is not None:
            log(rec)
    return TrainResult(params, history)


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "loss", "miou", "avg_accuracy"])
        for r in history:
            w.writerow([r.epoch, repr(r.lr), repr(r.loss), repr(r.miou), repr(r.avg_accuracy)])
