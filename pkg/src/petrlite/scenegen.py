"""
Synthetic multi-camera scenes: a ring of outward-looking pinhole cameras,
randomly placed class-coded 3D boxes, and a flat-shaded rasterizer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ckpt
from .errors import ParameterError
from .geometry import CameraRig, RoI, project_points

# nominal (w, l, h) in meters and flat colours, indexed by class id
CLASS_NAMES = ("car", "truck", "pedestrian", "cyclist", "bus", "barrier")
CLASS_SIZES = np.array([
    [1.9, 4.5, 1.6],
    [2.6, 7.5, 3.0],
    [0.8, 0.8, 1.8],
    [0.8, 1.8, 1.6],
    [2.9, 11.0, 3.4],
    [0.5, 2.5, 1.0],
])
CLASS_COLORS = np.array([
    [1.0, 0.15, 0.15],
    [0.15, 1.0, 0.15],
    [0.2, 0.35, 1.0],
    [1.0, 0.9, 0.1],
    [1.0, 0.2, 1.0],
    [0.1, 1.0, 1.0],
])

NEAR_PLANE = 0.1
SHADE_DEPTH = 4.0  # boxes nearer than this render at full brightness


@dataclass
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # (w, l, h)
    yaw: float
    class_id: int

    def corners(self) -> np.ndarray:
        """The 8 corners in world coordinates, shape (8, 3)."""
        w, l, h = self.size
        sx = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * l / 2
        sy = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * w / 2
        sz = np.array([1, -1, 1, -1, 1, -1, 1, -1]) * h / 2
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x = c * sx - s * sy
        y = s * sx + c * sy
        return np.stack([x, y, sz], axis=1) + np.asarray(self.center)

    def to_dict(self) -> dict:
        return {"center": list(self.center), "size": list(self.size),
                "yaw": self.yaw, "class_id": self.class_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(tuple(float(v) for v in d["center"]), tuple(float(v) for v in d["size"]),
                   float(d["yaw"]), int(d["class_id"]))


@dataclass
class Scene:
    boxes: list[Box3D]
    rig: CameraRig
    seed: int = 0
    _images: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def images(self) -> np.ndarray:
        if self._images is None:
            self._images = render(self)
        return self._images

    def to_dict(self) -> dict:
        return {"seed": int(self.seed), "rig": self.rig.to_dict(),
                "boxes": [b.to_dict() for b in self.boxes]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls([Box3D.from_dict(b) for b in d["boxes"]], CameraRig.from_dict(d["rig"]),
                   int(d["seed"]))


def make_ring_rig(n_views: int, radius: float, image_size: tuple[int, int], stride: int,
                  fov_deg: float, height: float = 0.0) -> CameraRig:
    """Cameras evenly spaced in azimuth on a horizontal ring, each looking outward.

    Camera ``i`` sits at azimuth ``2*pi*i/n_views``; its frame has x to the
    right, y down and z along the outward radial direction.  ``fov_deg`` is the
    horizontal field of view; pixels are square.
    """
    if n_views < 1:
        raise ParameterError(f"need at least one camera, got {n_views}")
    if not 0 < fov_deg < 180:
        raise ParameterError(f"field of view must lie in (0, 180) degrees, got {fov_deg}")
    w, h = image_size
    f = (w / 2) / math.tan(math.radians(fov_deg) / 2)
    intr = np.array([[f, 0, w / 2, 0], [0, f, h / 2, 0], [0, 0, 1, 0], [0, 0, 0, 1.0]])
    mats = []
    for i in range(n_views):
        phi = 2 * math.pi * i / n_views
        fwd = np.array([math.cos(phi), math.sin(phi), 0.0])
        right = np.array([math.sin(phi), -math.cos(phi), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        rot = np.stack([right, down, fwd])
        pos = np.array([radius * math.cos(phi), radius * math.sin(phi), height])
        ext = np.eye(4)
        ext[:3, :3] = rot
        ext[:3, 3] = -rot @ pos
        mats.append(intr @ ext)
    return CameraRig(np.stack(mats), (w, h), stride)


def sample_scene(seed: int, rig: CameraRig, roi: RoI, n_boxes_range: tuple[int, int],
                 class_count: int, margin: float = 0.1, min_range: float = 0.0,
                 min_separation: float = 0.0, max_tries: int = 100) -> Scene:
    """Draw a random scene; identical arguments give an identical scene.

    Centres are uniform in ``roi`` shrunk by ``margin`` of its extent per side.
    Candidates closer than ``min_range`` (in x-y) to the world origin or
    closer than ``min_separation`` to an accepted box are redrawn.
    """
    if not 1 <= class_count <= len(CLASS_SIZES):
        raise ParameterError(f"class_count must lie in [1, {len(CLASS_SIZES)}], got {class_count}")
    lo_n, hi_n = n_boxes_range
    if not 0 <= lo_n <= hi_n:
        raise ParameterError(f"bad box-count range {n_boxes_range}")
    rng = np.random.default_rng(seed)
    inner = roi.shrink(margin)
    n = int(rng.integers(lo_n, hi_n + 1))
    boxes: list[Box3D] = []
    for _ in range(n):
        for _ in range(max_tries):
            c = rng.uniform(inner.lo, inner.hi)
            far = math.hypot(c[0], c[1]) >= min_range
            apart = all(math.hypot(c[0] - b.center[0], c[1] - b.center[1]) >= min_separation
                        for b in boxes)
            if far and apart:
                break
        else:
            continue
        cls = int(rng.integers(class_count))
        size = CLASS_SIZES[cls] * rng.uniform(0.8, 1.2, size=3)
        # uniform on (-pi, pi]
        yaw = math.pi - rng.uniform(0.0, 2 * math.pi)
        boxes.append(Box3D(tuple(float(v) for v in c), tuple(float(v) for v in size),
                           float(yaw), cls))
    return Scene(boxes, rig, int(seed))


def background(image_size: tuple[int, int]) -> np.ndarray:
    """Fixed vertical grey gradient, shape (3, H, W)."""
    w, h = image_size
    ramp = 0.2 + 0.2 * (np.arange(h) + 0.5) / h
    return np.broadcast_to(ramp[None, :, None], (3, h, w)).copy()


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull (monotone chain) of (n, 2) points."""
    pts = sorted(set(map(tuple, pts.tolist())))
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _fill_hull(mask_shape: tuple[int, int], hull: np.ndarray) -> tuple[slice, slice, np.ndarray] | None:
    h, w = mask_shape
    if len(hull) < 3:
        return None
    c0 = max(int(math.floor(hull[:, 0].min())), 0)
    c1 = min(int(math.ceil(hull[:, 0].max())), w)
    r0 = max(int(math.floor(hull[:, 1].min())), 0)
    r1 = min(int(math.ceil(hull[:, 1].max())), h)
    if c0 >= c1 or r0 >= r1:
        return None
    px = np.arange(c0, c1) + 0.5
    py = np.arange(r0, r1) + 0.5
    gx, gy = np.meshgrid(px, py)
    inside = np.ones(gx.shape, dtype=bool)
    nxt = np.roll(hull, -1, axis=0)
    for (x0, y0), (x1, y1) in zip(hull, nxt):
        inside &= (x1 - x0) * (gy - y0) - (y1 - y0) * (gx - x0) >= 0
    return slice(r0, r1), slice(c0, c1), inside


def render(scene: Scene) -> np.ndarray:
    """Rasterize every view to (N, 3, H_I, W_I) floats in [0, 1].

    Each box is drawn as the filled convex hull of its in-front corners in a
    class colour dimmed with distance; far boxes are painted first.
    """
    rig = scene.rig
    w, h = rig.image_size
    bg = background((w, h))
    out = np.empty((rig.n_views, 3, h, w))
    corners = [b.corners() for b in scene.boxes]
    centers = np.array([b.center for b in scene.boxes]).reshape(-1, 3)
    for view in range(rig.n_views):
        img = bg.copy()
        _, _, dc = project_points(rig, view, centers)
        for k in np.argsort(-dc, kind="stable"):
            u, v, d = project_points(rig, view, corners[k])
            front = d > NEAR_PLANE
            if dc[k] <= NEAR_PLANE or not front.any():
                continue
            fill = _fill_hull((h, w), _convex_hull(np.stack([u[front], v[front]], axis=1)))
            if fill is None:
                continue
            rows, cols, inside = fill
            shade = min(1.0, SHADE_DEPTH / dc[k])
            color = CLASS_COLORS[scene.boxes[k].class_id] * shade
            patch = img[:, rows, cols]
            patch[:, inside] = color[:, None]
        out[view] = img
    return out


def save_scene(scene: Scene, json_path: str | Path, images_path: str | Path | None = None) -> None:
    Path(json_path).write_text(json.dumps(scene.to_dict(), indent=1))
    if images_path is not None:
        ckpt.write_records(images_path, {"images": scene.images()})


def load_scene(json_path: str | Path, images_path: str | Path | None = None) -> Scene:
    scene = Scene.from_dict(json.loads(Path(json_path).read_text()))
    if images_path is not None:
        scene._images = ckpt.read_records(images_path)["images"]
    return scene
