"""Segmentation, distillation and refinement objectives."""

from __future__ import annotations

import dataclasses

import numpy as np

from . import numerics as nx
from .nn import FeatureMap
from .numerics import ShapeError, Tensor

DICE_EPS = 1e-5


class DataError(ValueError):
    """Labels or targets are invalid."""


@dataclasses.dataclass
class LossValue:
    total: Tensor
    components: dict[str, float]

    def item(self) -> float:
        return self.total.item()


def seg_loss(logits: Tensor, target, eps: float = DICE_EPS) -> LossValue:
    """Soft Dice (foreground classes, averaged) plus mean cross-entropy.

    ``logits`` is ``(cells, classes)``; ``target`` holds one label per cell.
    """
    target = np.asarray(target).reshape(-1)
    cells, classes = logits.shape
    if target.shape[0] != cells:
        raise ShapeError(f"{cells} logit rows but {target.shape[0]} labels")
    bad = np.flatnonzero((target < 0) | (target >= classes))
    if bad.size:
        raise DataError(f"label {target[bad[0]]} at cell {bad[0]} outside [0, {classes})")
    target = target.astype(np.int64)

    ce = nx.mean(nx.pick(nx.log_softmax(logits), target)) * -1.0

    probs = nx.softmax(logits)
    onehot = np.zeros((cells, classes), dtype=logits.dtype)
    onehot[np.arange(cells), target] = 1.0
    inter = nx.tsum(probs * onehot, axis=0)
    denom = nx.tsum(probs, axis=0) + Tensor(onehot.sum(axis=0))
    dice = (inter * 2.0 + eps) / (denom + eps)
    fg = np.zeros(classes, dtype=logits.dtype)
    fg[1:] = 1.0 / (classes - 1)
    dice_loss = 1.0 - nx.tsum(dice * fg)

    total = dice_loss + ce
    return LossValue(total, {"dice": dice_loss.item(), "ce": ce.item()})


def _feature_values(f) -> Tensor:
    return f.values if isinstance(f, FeatureMap) else f


def feature_mse(student, teacher) -> Tensor:
    s = _feature_values(student)
    t = _feature_values(teacher)
    if s.shape != t.shape:
        raise ShapeError(f"feature shapes differ: {s.shape} vs {t.shape}")
    # teacher enters as a constant, gradients reach the student only
    return nx.mean(nx.square(s - Tensor(t.data)))


def kd_loss(student, teacher) -> Tensor:
    """Mean squared difference to a frozen teacher's features."""
    return feature_mse(student, teacher)


def refine_loss(adapted_features, target_features) -> Tensor:
    """Same formula as :func:`kd_loss`, reported separately."""
    return feature_mse(adapted_features, target_features)
