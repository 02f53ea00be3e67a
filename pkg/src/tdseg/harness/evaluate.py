"""Streaming evaluation and mIoU scoring."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from ..scheduler import phase_orders


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_index: int = 255) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    keep = gt != ignore_index
    idx = gt[keep].astype(np.int64) * num_classes + pred[keep].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN for classes absent from both prediction and ground truth."""
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - np.diag(conf)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), np.nan)


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    return float(np.nanmean(iou_from_confusion(confusion_matrix(pred, gt, num_classes))))


@dataclass
class EvalReport:
    per_class_iou: List[float]
    miou: float
    mean_acc: float
    order_mious: List[float] = field(default_factory=list)
    orders: List[tuple] = field(default_factory=list)
    order_iou: List[List[float]] = field(default_factory=list)
    order_acc: List[float] = field(default_factory=list)

    @property
    def order_std(self) -> float:
        if not self.order_mious:
            return 0.0
        # shifting by the first value keeps identical scores at exactly zero spread
        vals = np.asarray(self.order_mious)
        return float(np.std(vals - vals[0]))

    def rows(self) -> List[dict]:
        """One row per evaluated order, then an ``all`` row pooling every order."""
        def row(label, iou, value, acc, std):
            out = {"order": label, "miou": value, "mean_acc": acc, "order_stddev": std}
            out.update({f"iou_c{k}": v for k, v in enumerate(iou)})
            return out
        out = [row("-".join(map(str, o)), iou, v, a, 0.0)
               for o, iou, v, a in zip(self.orders, self.order_iou, self.order_mious, self.order_acc)]
        out.append(row("all", self.per_class_iou, self.miou, self.mean_acc, self.order_std))
        return out


def _scores(conf: np.ndarray):
    iou = iou_from_confusion(conf)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.diag(conf) / conf.sum(1)
    return iou, float(np.nanmean(iou)), float(np.nanmean(np.where(conf.sum(1) > 0, acc, np.nan)))


def stream_confusion(model, clips: Sequence, order=None, history_limit: Optional[int] = None,
                     gap: int = 1, score_from: Optional[int] = None) -> np.ndarray:
    """Stream every clip and accumulate the confusion of frames with a full window."""
    k = model.config.num_classes
    conf = np.zeros((k, k), dtype=np.int64)
    start = model.config.m - 1 if score_from is None else score_from
    for clip in clips:
        sub = clip.subsample(gap) if gap > 1 else clip
        if len(sub) < model.config.m:
            raise ValueError(f"clip has {len(sub)} frames after gap {gap}; need at least m={model.config.m}")
        state = model.new_stream(order)
        for t, (frame, lab) in enumerate(zip(sub.frames, sub.labels)):
            logits = model.step(state, frame, history_limit=history_limit)
            if t >= start:
                conf += confusion_matrix(logits.argmax(axis=0), lab, k)
    return conf


def evaluate_miou(model, clips: Sequence, order_sweep: bool = False, exhaustive: bool = False,
                  history_limit: Optional[int] = None, gap: int = 1) -> EvalReport:
    """mIoU over streamed clips. With ``order_sweep`` every circular phase (or every
    permutation when ``exhaustive``) is scored and the reported mIoU is their mean."""
    m = model.config.m
    if order_sweep and exhaustive and m > 4:
        raise ValueError(f"exhaustive order sweep is limited to m <= 4 ({m}! orders requested)")
    if order_sweep:
        orders = [tuple(p) for p in itertools.permutations(range(m))] if exhaustive else phase_orders(m)
    else:
        orders = [tuple(range(m))]
    total = None
    mious, ious, accs = [], [], []
    for order in orders:
        conf = stream_confusion(model, clips, order, history_limit, gap)
        iou, value, acc = _scores(conf)
        mious.append(value)
        ious.append([float(v) for v in iou])
        accs.append(acc)
        total = conf if total is None else total + conf
    iou, _, acc = _scores(total)
    if not order_sweep:
        orders, mious, ious, accs = [], mious, [], []
        return EvalReport([float(v) for v in iou], float(mious[0]), acc)
    return EvalReport([float(v) for v in iou], float(np.mean(mious)), acc, mious, orders, ious, accs)
