"""Dice, HD95, transfer matrices and parameter-variation reports.

HD95 is measured in grid cells (unit spacing). Boundary cells are foreground
cells with a 4-neighbour outside the foreground or outside the image. The
95th percentile interpolates linearly between order statistics.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import numerics as nx
from .nn import ModelState, forward_segmentation
from .numerics import ShapeError, Tensor

_CROSS = ndimage.generate_binary_structure(2, 1)


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")


def dice_score(pred, target, classes: int) -> np.ndarray:
    """Dice (%) for each foreground class 1..classes-1; 100 when absent from both."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    _check_shapes(pred, target)
    out = np.empty(classes - 1, dtype=np.float64)
    for c in range(1, classes):
        p = pred == c
        t = target == c
        denom = int(p.sum()) + int(t.sum())
        out[c - 1] = 100.0 if denom == 0 else 200.0 * int((p & t).sum()) / denom
    return out


def boundary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def surface_distances(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Both directed nearest-boundary distance sets, concatenated."""
    bp, bt = boundary(pred), boundary(target)
    to_t = ndimage.distance_transform_edt(~bt)
    to_p = ndimage.distance_transform_edt(~bp)
    return np.concatenate([to_t[bp], to_p[bt]])


def empty_sentinel(shape) -> float:
    return float(np.hypot(shape[0] - 1, shape[1] - 1))


def hd95(pred, target, cls: int | None = None) -> float:
    """95th percentile of symmetric boundary distances for one class.

    With ``cls`` given, masks are label maps; otherwise they are binary.
    Both empty gives 0, exactly one empty gives the image diagonal.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    _check_shapes(pred, target)
    p = pred == cls if cls is not None else pred.astype(bool)
    t = target == cls if cls is not None else target.astype(bool)
    if not p.any() and not t.any():
        return 0.0
    if not p.any() or not t.any():
        return empty_sentinel(p.shape)
    return float(np.percentile(surface_distances(p, t), 95))


def hausdorff(pred, target) -> float:
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(target, dtype=bool)
    if not p.any() and not t.any():
        return 0.0
    if not p.any() or not t.any():
        return empty_sentinel(p.shape)
    return float(surface_distances(p, t).max())


# --- model evaluation -----------------------------------------------------------------
@dataclasses.dataclass
class EvalResult:
    dice: np.ndarray  # per foreground class, %
    hd95: np.ndarray  # per foreground class, cells

    @property
    def mean_dice(self) -> float:
        return float(self.dice.mean())

    @property
    def mean_hd95(self) -> float:
        return float(self.hd95.mean())


def predict(model: ModelState, images: np.ndarray, batch: int = 32) -> np.ndarray:
    """Argmax label maps ``(N, H, W)``."""
    n, _, h, w = images.shape
    out = np.empty((n, h, w), dtype=np.uint8)
    with nx.no_grad():
        for lo in range(0, n, batch):
            chunk = images[lo : lo + batch]
            logits = forward_segmentation(model, chunk).data
            out[lo : lo + len(chunk)] = logits.argmax(axis=1).reshape(len(chunk), h, w)
    return out


def evaluate_masks(preds: np.ndarray, targets: np.ndarray, classes: int) -> EvalResult:
    dice = np.array([dice_score(p, t, classes) for p, t in zip(preds, targets)])
    hd = np.array([[hd95(p, t, c) for c in range(1, classes)] for p, t in zip(preds, targets)])
    return EvalResult(dice.mean(axis=0), hd.mean(axis=0))


def evaluate(model: ModelState, task, split: str = "test") -> EvalResult:
    if model.meta.classes != task.classes:
        raise ShapeError(f"model predicts {model.meta.classes} classes, task {task.task_id} has {task.classes}")
    idx = task.test_idx if split == "test" else task.train_idx
    return evaluate_masks(predict(model, task.images[idx]), task.masks[idx], task.classes)


def compose(encoder_src: ModelState, head_src: ModelState) -> ModelState:
    """Encoder (and SSL head) of one model with decoder and seg head of another."""
    params = {k: v for k, v in encoder_src.params.items() if k.startswith(("encoder.", "ssl_head."))}
    params.update({k: v for k, v in head_src.params.items() if k.startswith(("decoder.", "seg_head."))})
    return ModelState(head_src.meta, params)


@dataclasses.dataclass
class TransferMatrix:
    """``dice[t][s]`` / ``hd95[t][s]``: encoder of M_t with task-s decoder and head, on task s."""

    dice: list[list[float]]
    hd95: list[list[float]]

    @property
    def n(self) -> int:
        return len(self.dice)

    def bwt(self) -> float:
        """Mean over s < n-1 of ``dice[n-1][s] - dice[s][s]``; 0 for a single task."""
        last = self.n - 1
        if last == 0:
            return 0.0
        return float(np.mean([self.dice[last][s] - self.dice[s][s] for s in range(last)]))

    def rows(self) -> list[tuple[int, int, float, float]]:
        return [(t, s, self.dice[t][s], self.hd95[t][s]) for t in range(self.n) for s in range(t + 1)]


def transfer_matrix(models: Sequence[ModelState], tasks: Sequence, heads: Sequence[ModelState] | None = None) -> TransferMatrix:
    """Grid of encoder-of-``models[t]`` plus decoder/head-of-``heads[s]`` on task s.

    ``heads`` defaults to ``models``. The diagonal evaluates ``heads[t]``
    unchanged, so it reproduces the per-task score of the reported model.
    """
    heads = models if heads is None else heads
    if not len(models) == len(tasks) == len(heads):
        raise ShapeError(f"{len(models)} models and {len(heads)} heads for {len(tasks)} tasks")
    dice, hd = [], []
    for t, mt in enumerate(models):
        drow, hrow = [], []
        for s in range(t + 1):
            res = evaluate(heads[t] if s == t else compose(mt, heads[s]), tasks[s])
            drow.append(res.mean_dice)
            hrow.append(res.mean_hd95)
        dice.append(drow)
        hd.append(hrow)
    return TransferMatrix(dice, hd)


# --- parameter variation --------------------------------------------------------------
def param_kind(name: str) -> str:
    if "norm." in name:
        return "norm"
    if name.endswith(".weight"):
        return "linear_weight"
    if name.endswith(".bias"):
        return "bias"
    return "auxiliary"


@dataclasses.dataclass
class LayerVariation:
    name: str
    kind: str
    depth: int
    mean_abs_change: float
    changed_fraction: float


@dataclasses.dataclass
class ParamVariationReport:
    layers: list[LayerVariation]

    def by_name(self) -> dict[str, LayerVariation]:
        return {row.name: row for row in self.layers}

    def max_change(self, kind: str | None = None) -> float:
        vals = [r.mean_abs_change for r in self.layers if kind is None or r.kind == kind]
        return max(vals) if vals else 0.0


def _depth(name: str) -> int:
    parts = name.split(".")
    if len(parts) > 2 and parts[1] == "blocks":
        return int(parts[2]) + 1
    return 0


def _arrays(params: Mapping) -> dict[str, np.ndarray]:
    if isinstance(params, ModelState):
        params = params.params
    return {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in params.items()}


def param_variation(before, after) -> ParamVariationReport:
    """Per-tensor mean ``|after - before|`` and fraction of changed elements."""
    b, a = _arrays(before), _arrays(after)
    problems = sorted(set(b) ^ set(a))
    problems += sorted(k for k in set(b) & set(a) if b[k].shape != a[k].shape)
    if problems:
        raise ShapeError(f"parameter sets differ at: {', '.join(problems)}")
    rows = []
    for name in sorted(b):
        diff = np.abs(a[name].astype(np.float64) - b[name].astype(np.float64))
        rows.append(
            LayerVariation(
                name, param_kind(name), _depth(name), float(diff.mean()), float(np.count_nonzero(diff) / diff.size)
            )
        )
    return ParamVariationReport(rows)
