"""
Run configuration: one flat table of knobs, loaded from JSON.

Defaults (desk scale):

==================  =====================  =========================================
key                 default                meaning
==================  =====================  =========================================
seed                0                      model init, training and eval scene streams
steps               5000                   optimizer steps
batch_size          1                      scenes per step
lr                  1e-3                   initial learning rate (cosine to 0)
weight_decay        0.01                   AdamW decoupled decay
grad_clip           35.0                   global grad-norm clip, 0 disables
lambda_cls          2.0                    classification loss weight
focal_alpha         0.25
focal_gamma         2.0
channels            64                     C
backbone_channels   64                     C_f
n_heads             4
n_layers            3                      decoder layers L
ffn_dim             256
n_classes           4
n_queries           100                    M (learned_3d / none)
anchor_mode         learned_3d             none | fix_bev | fix_3d | learned_3d
bev_grid            [10, 10]               fix_bev anchor grid
grid_3d             [5, 5, 4]              fix_3d anchor grid
use_2d_pe           false
use_mv_prior        false
use_3d_pe           true
no_pe               false                  baseline with no position embedding
fusion              add                    add | concat | multiply
pe_hidden           null                   3D PE hidden width, null = 4 * channels
depth_mode          LID                    UD | LID
depth_range         [1.0, 20.0]            (d_min, d_max) meters
n_depth             16                     D
roi                 [-12,-12,-2,12,12,2]   normalization region, meters
n_views             6
image_size          [96, 96]               (W_I, H_I)
stride              16
fov_deg             70.0
ring_radius         0.5
n_boxes             [1, 3]                 boxes per scene, inclusive
min_range           2.5                    no box centre closer (x-y) to the rig
min_separation      2.5                    minimum x-y distance between centres
fixed_scene_seed    null                   train on this one scene every step
n_eval_scenes       200
score_threshold     0.0                    detections scored below are dropped before AP
log_every           50                     metrics.csv row cadence
eval_every          0                      mid-training eval cadence, 0 = final only
==================  =====================  =========================================
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from ..errors import ConfigError, PetrError
from ..model import ANCHOR_MODES, ModelConfig
from ..posenc import FUSIONS, PEConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    steps: int = 5000
    batch_size: int = 1
    lr: float = 1e-3
    weight_decay: float = 0.01
    grad_clip: float = 35.0
    lambda_cls: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    channels: int = 64
    backbone_channels: int = 64
    n_heads: int = 4
    n_layers: int = 3
    ffn_dim: int = 256
    n_classes: int = 4
    n_queries: int = 100
    anchor_mode: str = "learned_3d"
    bev_grid: tuple = (10, 10)
    grid_3d: tuple = (5, 5, 4)
    use_2d_pe: bool = False
    use_mv_prior: bool = False
    use_3d_pe: bool = True
    no_pe: bool = False
    fusion: str = "add"
    pe_hidden: int | None = None
    depth_mode: str = "LID"
    depth_range: tuple = (1.0, 20.0)
    n_depth: int = 16
    roi: tuple = (-12.0, -12.0, -2.0, 12.0, 12.0, 2.0)
    n_views: int = 6
    image_size: tuple = (96, 96)
    stride: int = 16
    fov_deg: float = 70.0
    ring_radius: float = 0.5
    n_boxes: tuple = (1, 3)
    min_range: float = 2.5
    min_separation: float = 2.5
    fixed_scene_seed: int | None = None
    n_eval_scenes: int = 200
    score_threshold: float = 0.0
    log_every: int = 50
    eval_every: int = 0

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, list):
                object.__setattr__(self, f.name, tuple(val))
        checks = [
            (self.steps >= 0, "steps must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr >= 0, "lr must be >= 0"),
            (self.weight_decay >= 0, "weight_decay must be >= 0"),
            (self.lambda_cls > 0, "lambda_cls must be > 0"),
            (self.anchor_mode in ANCHOR_MODES, f"anchor_mode must be one of {ANCHOR_MODES}"),
            (self.fusion in FUSIONS, f"fusion must be one of {FUSIONS}"),
            (self.depth_mode in ("UD", "LID"), "depth_mode must be UD or LID"),
            (len(self.depth_range) == 2, "depth_range needs 2 values"),
            (len(self.roi) == 6, "roi needs 6 values"),
            (len(self.image_size) == 2, "image_size needs 2 values"),
            (len(self.n_boxes) == 2 and 0 <= self.n_boxes[0] <= self.n_boxes[1],
             "n_boxes must be [lo, hi] with 0 <= lo <= hi"),
            (self.n_boxes[1] <= self.n_queries_effective, "more boxes than queries"),
            (len(self.bev_grid) == 2, "bev_grid needs 2 values"),
            (len(self.grid_3d) == 3, "grid_3d needs 3 values"),
            (self.channels % self.n_heads == 0, "channels must be divisible by n_heads"),
            (not self.use_2d_pe or self.channels % 4 == 0, "2D PE needs channels divisible by 4"),
            (self.n_eval_scenes >= 0, "n_eval_scenes must be >= 0"),
            (self.log_every >= 1, "log_every must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def n_queries_effective(self) -> int:
        if self.anchor_mode == "fix_bev":
            return self.bev_grid[0] * self.bev_grid[1]
        if self.anchor_mode == "fix_3d":
            return self.grid_3d[0] * self.grid_3d[1] * self.grid_3d[2]
        return self.n_queries

    def pe_config(self) -> PEConfig:
        return PEConfig(self.use_2d_pe, self.use_mv_prior, self.use_3d_pe, self.fusion,
                        self.channels, self.pe_hidden, self.no_pe)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            channels=self.channels, backbone_channels=self.backbone_channels,
            n_heads=self.n_heads, n_layers=self.n_layers, ffn_dim=self.ffn_dim,
            n_classes=self.n_classes, n_queries=self.n_queries, anchor_mode=self.anchor_mode,
            bev_grid=tuple(self.bev_grid), grid_3d=tuple(self.grid_3d), stride=self.stride,
            depth_mode=self.depth_mode, depth_range=tuple(self.depth_range),
            n_depth=self.n_depth, roi=tuple(self.roi), n_views=self.n_views,
            pe=self.pe_config(), seed=self.seed)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}


# values reported in the paper's experiments, for full-size runs
PAPER_OVERRIDES = {
    "lr": 2e-4,
    "n_queries": 1500,
    "n_depth": 64,
    "depth_range": (1.0, 61.2),
    "roi": (-61.2, -61.2, -10.0, 61.2, 61.2, 10.0),
    "channels": 256,
    "backbone_channels": 256,
    "n_heads": 8,
    "n_layers": 6,
    "ffn_dim": 2048,
    "bev_grid": (39, 39),
    "grid_3d": (16, 16, 6),
}


def paper_config(**changes) -> RunConfig:
    return RunConfig(**{**PAPER_OVERRIDES, **changes})


_FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def _check_type(key: str, value: Any) -> bool:
    default = _FIELD_TYPES[key].default
    if value is None:
        return key in ("pe_hidden", "fixed_scene_seed")
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int) or key in ("pe_hidden", "fixed_scene_seed"):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, tuple):
        return isinstance(value, list) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
    return True


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def parse_config(text: str, **overrides) -> RunConfig:
    """Build a ``RunConfig`` from JSON text; errors carry the offending line."""
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, exc.lineno) from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", 1)
    for key, value in raw.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}", _line_of(text, key))
        if not _check_type(key, value):
            raise ConfigError(f"bad value for {key!r}: {value!r}", _line_of(text, key))
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**raw)
    except ConfigError as exc:
        key = next((k for k in raw if k in str(exc)), None)
        raise ConfigError(str(exc), _line_of(text, key) if key else None) from None
    except PetrError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, **overrides)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
