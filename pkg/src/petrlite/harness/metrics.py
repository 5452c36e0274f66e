"""
Center-distance average precision.

Per class and distance threshold, predictions from all scenes are ranked by
score; each takes the nearest still-unmatched ground truth of its class in
its scene within the threshold (x-y plane distance) or counts as a false
positive.  AP is the 11-point interpolated area under precision/recall.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_ERROR_THRESHOLD = 2.0


@dataclass
class Detection:
    scene: int
    class_id: int
    score: float
    center: np.ndarray  # (3,) meters


@dataclass
class GroundTruth:
    scene: int
    class_id: int
    center: np.ndarray


def _match(dets: list[Detection], gts: list[GroundTruth], threshold: float
           ) -> tuple[np.ndarray, list[float]]:
    """TP flags for ``dets`` (already score-sorted) and the TP center errors."""
    by_scene: dict[int, list[int]] = {}
    for i, g in enumerate(gts):
        by_scene.setdefault(g.scene, []).append(i)
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    errors = []
    for k, d in enumerate(dets):
        best, best_dist = -1, math.inf
        for i in by_scene.get(d.scene, ()):
            if taken[i]:
                continue
            dist = float(np.hypot(*(d.center[:2] - gts[i].center[:2])))
            if dist < best_dist:
                best, best_dist = i, dist
        if best >= 0 and best_dist <= threshold:
            taken[best] = True
            tp[k] = True
            errors.append(best_dist)
    return tp, errors


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """11-point interpolated AP from score-ordered TP flags."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 11.0


@dataclass
class MetricsReport:
    ap: dict[float, float]  # threshold -> AP averaged over classes
    per_class: dict[float, dict[int, float]]
    mean_ap: float
    mean_translation_error: float  # over true positives at 2 m; nan if none
    n_predictions: int
    n_ground_truths: int
    loss_curve: list[tuple[int, float]] = field(default_factory=list)

    def row(self) -> dict[str, float]:
        out = {f"ap@{t:g}": self.ap[t] for t in THRESHOLDS}
        out["mAP"] = self.mean_ap
        out["mATE"] = self.mean_translation_error
        return out


def compute_metrics(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                    thresholds: Sequence[float] = THRESHOLDS) -> MetricsReport:
    classes = sorted({g.class_id for g in gts})
    ap: dict[float, float] = {}
    per_class: dict[float, dict[int, float]] = {}
    tp_errors: list[float] = []
    for t in thresholds:
        per_class[t] = {}
        for c in classes:
            cd = sorted((d for d in dets if d.class_id == c), key=lambda d: -d.score)
            cg = [g for g in gts if g.class_id == c]
            tp, errs = _match(cd, cg, t)
            per_class[t][c] = interpolated_ap(tp, len(cg))
            if t == TP_ERROR_THRESHOLD:
                tp_errors.extend(errs)
        ap[t] = float(np.mean(list(per_class[t].values()))) if classes else 0.0
    mean_ap = float(np.mean([ap[t] for t in thresholds]))
    mate = float(np.mean(tp_errors)) if tp_errors else float("nan")
    return MetricsReport(ap, per_class, mean_ap, mate, len(dets), len(gts))
