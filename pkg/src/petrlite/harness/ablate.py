"""Named ablation grids: every row trains with the same seeds and data stream."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Callable

from ..errors import ConfigError
from .config import RunConfig
from .metrics import THRESHOLDS, MetricsReport
from .train import train_loop

_PE_OFF = {"use_2d_pe": False, "use_mv_prior": False, "use_3d_pe": False}

GRIDS: dict[str, list[tuple[str, dict]]] = {
    "pe-table3": [
        ("2D-only", {**_PE_OFF, "use_2d_pe": True}),
        ("2D+MV", {**_PE_OFF, "use_2d_pe": True, "use_mv_prior": True}),
        ("3D-only", {**_PE_OFF, "use_3d_pe": True}),
        ("2D+3D", {**_PE_OFF, "use_2d_pe": True, "use_3d_pe": True}),
        ("2D+MV+3D", {"use_2d_pe": True, "use_mv_prior": True, "use_3d_pe": True}),
    ],
    "anchors-table4c": [
        ("None", {"anchor_mode": "none"}),
        ("Fix-BEV", {"anchor_mode": "fix_bev"}),
        ("Fix-3D", {"anchor_mode": "fix_3d"}),
        ("Learned-3D", {"anchor_mode": "learned_3d"}),
    ],
    "fusion-table4b": [
        ("Add", {"fusion": "add"}),
        ("Concat", {"fusion": "concat"}),
        ("Multiply", {"fusion": "multiply"}),
    ],
    "points-table4d": [(str(m), {"n_queries": m}) for m in (40, 60, 80, 100)],
    "depth": [("UD", {"depth_mode": "UD"}), ("LID", {"depth_mode": "LID"})],
}

COLUMNS = ["name"] + [f"ap@{t:g}" for t in THRESHOLDS] + ["mAP", "mATE", "final_loss"]


def grid_configs(name: str, base: RunConfig) -> list[tuple[str, RunConfig]]:
    if name not in GRIDS:
        raise ConfigError(f"unknown ablation grid {name!r}; choose from {sorted(GRIDS)}")
    return [(row, base.replace(**changes)) for row, changes in GRIDS[name]]


def run_grid(name: str, base: RunConfig, out_dir: str | Path | None = None,
             log: Callable[[str], None] | None = None) -> list[dict]:
    """Train and evaluate each row; writes ``ablation_<name>.csv`` plus one run dir per row."""
    rows = []
    for row, cfg in grid_configs(name, base):
        sub = Path(out_dir) / row.replace("+", "_") if out_dir is not None else None
        result = train_loop(cfg, sub)
        report: MetricsReport = result.report
        rec = {"name": row, **report.row(),
               "final_loss": result.losses[-1] if result.losses else math.nan}
        rows.append(rec)
        if log is not None:
            log(f"{row}: mAP {report.mean_ap:.4f}")
    if out_dir is not None:
        write_grid_csv(rows, Path(out_dir) / f"ablation_{name}.csv")
    return rows


def write_grid_csv(rows: list[dict], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
