"""Training loop, evaluation and checkpoint I/O."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import ckpt
from .. import diffarray as da
from ..errors import TrainingDiverged
from ..geometry import CameraRig, RoI
from ..loss import total_loss
from ..model import PETR, encode_boxes
from ..scenegen import Scene, make_ring_rig, sample_scene
from .config import RunConfig, save_config
from .metrics import THRESHOLDS, Detection, GroundTruth, MetricsReport, compute_metrics

log = logging.getLogger(__name__)

TRAIN_STREAM = 0
EVAL_STREAM = 1


def scene_seed(seed: int, stream: int, index: int, sub: int = 0) -> int:
    """Deterministic 63-bit scene seed for (run seed, stream, index, sub-index)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, stream, index, sub])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def cosine_lr(lr0: float, step: int, total: int) -> float:
    """lr0 at step 0 decaying to exactly 0 at step ``total - 1``."""
    if total <= 1:
        return lr0
    return lr0 * (1.0 + math.cos(math.pi * step / (total - 1))) / 2.0


def build_rig(cfg: RunConfig) -> CameraRig:
    return make_ring_rig(cfg.n_views, cfg.ring_radius, tuple(cfg.image_size), cfg.stride,
                         cfg.fov_deg)


def make_scene(cfg: RunConfig, rig: CameraRig, seed: int) -> Scene:
    return sample_scene(seed, rig, RoI(cfg.roi), tuple(cfg.n_boxes), cfg.n_classes,
                        min_range=cfg.min_range, min_separation=cfg.min_separation)


def eval_scenes(cfg: RunConfig, rig: CameraRig, n: int) -> list[Scene]:
    return [make_scene(cfg, rig, scene_seed(cfg.seed, EVAL_STREAM, i)) for i in range(n)]


def scene_loss(model: PETR, scene: Scene, cfg: RunConfig):
    heads = model(scene.images(), scene.rig)
    return total_loss(heads, encode_boxes(scene.boxes), [b.class_id for b in scene.boxes],
                      cfg.lambda_cls, cfg.focal_alpha, cfg.focal_gamma)


def _clip_grads(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    if max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm <= max_norm:
        return grads
    return [g * (max_norm / norm) for g in grads]


@dataclass
class TrainResult:
    model: PETR
    log_rows: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    report: MetricsReport | None = None


def train_loop(cfg: RunConfig, out_dir: str | Path | None = None,
               on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train from scratch; writes checkpoint.bin, metrics.csv and config.json to ``out_dir``."""
    model = PETR(cfg.model_config())
    rig = build_rig(cfg)
    params = model.parameters()
    state = da.AdamWState()
    result = TrainResult(model)
    fixed = None
    if cfg.fixed_scene_seed is not None:
        fixed = make_scene(cfg, rig, cfg.fixed_scene_seed)
    for step in range(cfg.steps):
        lr = cosine_lr(cfg.lr, step, cfg.steps)
        seeds = ([cfg.fixed_scene_seed] * cfg.batch_size if fixed is not None else
                 [scene_seed(cfg.seed, TRAIN_STREAM, step, b) for b in range(cfg.batch_size)])
        model.zero_grad()
        with da.Tape():
            total = None
            for s in seeds:
                scene = fixed if fixed is not None else make_scene(cfg, rig, s)
                part = scene_loss(model, scene, cfg).total
                total = part if total is None else total + part
            loss = total * (1.0 / len(seeds))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged("non-finite loss", step, seeds)
            da.backward(loss)
        grads = _clip_grads([p.grad for p in params], cfg.grad_clip)
        da.adamw_step(params, grads, state, lr, cfg.weight_decay)
        result.losses.append(value)
        if on_step is not None:
            on_step(step, value)
        last = step == cfg.steps - 1
        row = None
        if step % cfg.log_every == 0 or last:
            row = {"step": step, "loss": value, "lr": lr}
        if cfg.eval_every and step > 0 and step % cfg.eval_every == 0 and not last:
            row = row or {"step": step, "loss": value, "lr": lr}
            row.update(evaluate_model(model, cfg).row())
        if row is not None:
            result.log_rows.append(row)
            log.info("step %d loss %.4f lr %.3g", step, value, lr)
    if cfg.n_eval_scenes:
        result.report = evaluate_model(model, cfg)
        result.report.loss_curve = list(enumerate(result.losses))
        if result.log_rows:
            result.log_rows[-1].update(result.report.row())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out / "checkpoint.bin")
        save_config(cfg, out / "config.json")
        write_metrics_csv(result.log_rows, out / "metrics.csv")
    return result


METRIC_COLUMNS = ["step", "loss", "lr"] + [f"ap@{t:g}" for t in THRESHOLDS] + ["mAP", "mATE"]


def metrics_csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, METRIC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def write_metrics_csv(rows: list[dict], path: str | Path) -> None:
    Path(path).write_text(metrics_csv_text(rows))


def save_checkpoint(model: PETR, path: str | Path) -> None:
    ckpt.write_records(path, model.state_dict())


def load_checkpoint(cfg: RunConfig, path: str | Path) -> PETR:
    model = PETR(cfg.model_config())
    model.load_state_dict(ckpt.read_records(path))
    return model


def predict(model: PETR, scene: Scene, score_threshold: float, scene_index: int = 0
            ) -> list[Detection]:
    """Last-layer detections: per query, best class and its sigmoid score."""
    with da.no_grad():
        head = model(scene.images(), scene.rig)[-1]
    scores = head.scores()
    centers, _, _ = head.decoded()
    cls = scores.argmax(axis=1)
    best = scores[np.arange(len(cls)), cls]
    return [Detection(scene_index, int(cls[i]), float(best[i]), centers[i])
            for i in np.flatnonzero(best >= score_threshold)]


def evaluate_model(model: PETR, cfg: RunConfig, n_scenes: int | None = None,
                   score_threshold: float | None = None) -> MetricsReport:
    n = cfg.n_eval_scenes if n_scenes is None else n_scenes
    thr = cfg.score_threshold if score_threshold is None else score_threshold
    rig = build_rig(cfg)
    dets: list[Detection] = []
    gts: list[GroundTruth] = []
    for i, scene in enumerate(eval_scenes(cfg, rig, n)):
        dets.extend(predict(model, scene, thr, i))
        gts.extend(GroundTruth(i, b.class_id, np.asarray(b.center)) for b in scene.boxes)
    return compute_metrics(dets, gts)


def evaluate(cfg: RunConfig, checkpoint: str | Path, n_scenes: int | None = None,
             score_threshold: float | None = None) -> MetricsReport:
    return evaluate_model(load_checkpoint(cfg, checkpoint), cfg, n_scenes, score_threshold)


def report_json(report: MetricsReport) -> str:
    return json.dumps({
        "ap": {f"{t:g}": v for t, v in report.ap.items()},
        "per_class": {f"{t:g}": {str(c): v for c, v in pc.items()}
                      for t, pc in report.per_class.items()},
        "mean_ap": report.mean_ap,
        "mean_translation_error": report.mean_translation_error,
        "n_predictions": report.n_predictions,
        "n_ground_truths": report.n_ground_truths,
    }, indent=2)
