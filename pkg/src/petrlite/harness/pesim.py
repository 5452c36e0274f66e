"""PE similarity maps: PGM heatmaps, raw CSV and the near-pair statistic."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .. import diffarray as da
from ..geometry import CameraRig, build_frustum_grid, unproject
from ..model import PETR
from ..posenc import neighbor_similarity_stats, pe_similarity_map


def position_embedding(model: PETR, rig: CameraRig) -> np.ndarray:
    """The model's position embedding for ``rig`` as (N, C, H_F, W_F)."""
    w, h = rig.feature_size
    with da.no_grad():
        tokens = model.encoder.embedding(model.coords(rig)).data
    return tokens.reshape(rig.n_views, h, w, -1).transpose(0, 3, 1, 2)


def mid_depth_points(model: PETR, rig: CameraRig) -> np.ndarray:
    """World (x, y, z) of every feature cell at the middle depth bin, (N, H_F, W_F, 3)."""
    grid = build_frustum_grid(rig, model.bins)
    mid = len(model.bins) // 2
    return np.stack([unproject(rig, v, grid)[mid, ..., :3] for v in range(rig.n_views)])


def near_pair_stats(model: PETR, rig: CameraRig, radius: float = 2.0) -> tuple[float, float, int]:
    return neighbor_similarity_stats(position_embedding(model, rig),
                                     mid_depth_points(model, rig), radius)


def to_gray(sim: np.ndarray) -> np.ndarray:
    """Map similarities in [-1, 1] to 8-bit gray, 1 -> 255."""
    return np.rint(255.0 * (np.clip(sim, -1.0, 1.0) + 1.0) / 2.0).astype(np.uint8)


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.astype(np.uint8).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, w, h, maxval, body = raw.split(maxsplit=4)
    if magic != b"P5" or int(maxval) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 image")
    return np.frombuffer(body, dtype=np.uint8, count=int(w) * int(h)).reshape(int(h), int(w))


def emit_similarity(model: PETR, rig: CameraRig, anchor: tuple[int, int, int],
                    out_dir: str | Path) -> np.ndarray:
    """Write pe_sim_view{i}.pgm per view and pe_sim.csv; returns the (N, H, W) maps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = pe_similarity_map(position_embedding(model, rig), anchor)
    for v, m in enumerate(sim):
        write_pgm(out / f"pe_sim_view{v}.pgm", to_gray(m))
    with open(out / "pe_sim.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["view", "row", "col", "similarity"])
        for (v, r, c), s in np.ndenumerate(sim):
            writer.writerow([v, r, c, repr(float(s))])
    return sim
