"""
Set-prediction criterion: one-to-one Hungarian matching between predictions
and ground truths, sigmoid focal loss for classification and L1 on the box
encodings, applied independently to every decoder layer and summed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffarray as da
from .diffarray import DiffArray
from .errors import ContractError, DimensionError, ParameterError
from .model import BOX_DIM, HeadOutput

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
P_CLAMP = 1e-7


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (prediction, ground truth), sorted by prediction
    unmatched: list[int]

    @property
    def pred_idx(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.intp)

    @property
    def gt_idx(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.intp)


def hungarian(cost) -> Assignment:
    """Minimum-cost matching of every column (ground truth) to a distinct row (prediction).

    ``cost`` is (M, G) with G <= M.  Shortest augmenting paths with dual
    potentials, one ground truth at a time; O(G^2 M).  Among equal reduced
    costs the lowest prediction index is taken, so results are deterministic.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise DimensionError(f"cost matrix must be 2-D, got shape {c.shape}")
    m, n = c.shape
    if n > m:
        raise ContractError(f"{n} ground truths cannot be matched to {m} predictions")
    if not np.isfinite(c).all():
        raise ContractError("cost matrix has non-finite entries")
    if n == 0:
        return Assignment([], list(range(m)))
    a = c.T  # rows: ground truths, columns: predictions
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.intp)  # owner[j] = 1-based row holding column j
    way = np.zeros(m + 1, dtype=np.intp)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            reduced = a[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    pairs = [(j - 1, int(owner[j]) - 1) for j in range(1, m + 1) if owner[j]]
    matched = {p for p, _ in pairs}
    return Assignment(pairs, [j for j in range(m) if j not in matched])


def assignment_cost(cost, assignment: Assignment) -> float:
    c = np.asarray(cost, dtype=np.float64)
    return float(sum(c[p, g] for p, g in assignment.pairs))


def one_hot_targets(n_pred: int, n_classes: int, assignment: Assignment, gt_classes) -> np.ndarray:
    t = np.zeros((n_pred, n_classes))
    gt_classes = np.asarray(gt_classes, dtype=np.intp)
    for p, g in assignment.pairs:
        t[p, gt_classes[g]] = 1.0
    return t


def focal_loss(logits, targets, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA,
               normalizer: float = 1.0) -> DiffArray:
    """Sigmoid focal loss summed over every (prediction, class) pair, divided by ``normalizer``.

    ``targets`` is a 0/1 array shaped like ``logits``.  p_t is clamped to
    [1e-7, 1 - 1e-7] before the log.
    """
    logits = logits if isinstance(logits, DiffArray) else da.constant(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"targets {t.shape} do not match logits {logits.shape}")
    p = da.sigmoid(logits)
    pt = da.clip(p * (2.0 * t - 1.0) + (1.0 - t), P_CLAMP, 1.0 - P_CLAMP)
    alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    per = da.power(1.0 - pt, gamma) * da.log(pt) * alpha_t
    return da.sum_(per) * (-1.0 / normalizer)


def l1_box_loss(pred_boxes, gt_boxes, assignment: Assignment, normalizer: float | None = None
                ) -> DiffArray:
    """Sum over matched pairs of the per-box mean |pred - gt| over the 8 encodings,
    divided by ``normalizer`` (defaults to the number of ground truths)."""
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, BOX_DIM)
    if normalizer is None:
        normalizer = max(len(gt), 1)
    if not assignment.pairs:
        return da.constant(0.0)
    matched = da.take(pred_boxes, assignment.pred_idx, axis=0)
    diff = da.abs_(matched - gt[assignment.gt_idx])
    return da.sum_(diff) * (1.0 / (BOX_DIM * normalizer))


def matching_cost(logits: np.ndarray, boxes: np.ndarray, gt_boxes: np.ndarray, gt_classes,
                  lambda_cls: float, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA
                  ) -> np.ndarray:
    """(M, G) cost: lambda_cls * pairwise focal cost + mean L1 over the box encoding."""
    p = np.clip(1.0 / (1.0 + np.exp(-logits)), P_CLAMP, 1.0 - P_CLAMP)
    pos = alpha * (1 - p) ** gamma * -np.log(p)
    neg = (1 - alpha) * p**gamma * -np.log(1 - p)
    gt_classes = np.asarray(gt_classes, dtype=np.intp)
    cls_cost = (pos - neg)[:, gt_classes]
    box_cost = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).mean(axis=-1)
    return lambda_cls * cls_cost + box_cost


@dataclass
class LossBreakdown:
    total: DiffArray
    cls: list[float] = field(default_factory=list)  # unweighted focal term per layer
    reg: list[float] = field(default_factory=list)
    assignments: list[Assignment] = field(default_factory=list)


def total_loss(heads: Sequence[HeadOutput], gt_boxes, gt_classes, lambda_cls: float = 2.0,
               alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> LossBreakdown:
    """Sum over decoder layers of ``lambda_cls * focal + L1``, each layer matched afresh."""
    if lambda_cls <= 0:
        raise ParameterError(f"lambda_cls must be positive, got {lambda_cls}")
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, BOX_DIM)
    gt_classes = np.asarray(gt_classes, dtype=np.intp).reshape(-1)
    if len(gt_boxes) != len(gt_classes):
        raise DimensionError(f"{len(gt_boxes)} boxes but {len(gt_classes)} labels")
    norm = max(len(gt_boxes), 1)
    out = LossBreakdown(total=da.constant(0.0))
    terms = []
    for head in heads:
        logits = head.class_logits
        m, k = logits.shape
        if len(gt_boxes):
            cost = matching_cost(logits.data, head.boxes.data, gt_boxes, gt_classes,
                                 lambda_cls, alpha, gamma)
            assign = hungarian(cost)
        else:
            assign = Assignment([], list(range(m)))
        cls = focal_loss(logits, one_hot_targets(m, k, assign, gt_classes), alpha, gamma, norm)
        reg = l1_box_loss(head.boxes, gt_boxes, assign, norm)
        terms.append(cls * lambda_cls + reg)
        out.cls.append(cls.item())
        out.reg.append(reg.item())
        out.assignments.append(assign)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    out.total = total
    return out
