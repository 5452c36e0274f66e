"""
Camera frustum geometry: depth discretization, the shared frustum meshgrid,
inverse projection into world space and RoI normalization.

A camera's 4x4 transform ``K`` maps homogeneous world points ``(x, y, z, 1)``
to frustum points ``(u*d, v*d, d, 1)`` where ``(u, v)`` is the pixel and ``d``
the depth along the optical axis.  Frustum points are therefore linear in
``K``, and lifting a pixel at depth ``d`` back to the world is a single
matrix-vector product with ``K^-1``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .errors import DimensionError, GeometryError, ParameterError

DEPTH_MODES = ("UD", "LID")


@dataclass
class CameraRig:
    """N pinhole cameras sharing one image size and feature stride."""

    k_mats: np.ndarray  # (N, 4, 4) world -> frustum
    image_size: tuple[int, int]  # (W_I, H_I)
    feature_stride: int
    _lu: list = field(default_factory=list, init=False, repr=False, compare=False)
    _inv: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.k_mats = np.array(self.k_mats, dtype=np.float64).reshape(-1, 4, 4)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        self.feature_stride = int(self.feature_stride)
        w, h = self.image_size
        s = self.feature_stride
        if s < 1 or w % s or h % s:
            raise ParameterError(f"image size {self.image_size} not divisible by stride {s}")
        for i, k in enumerate(self.k_mats):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                lu, piv = scipy.linalg.lu_factor(k, check_finite=True)
            det = float(np.prod(np.diag(lu)))
            if not np.isfinite(det) or abs(det) <= 1e-12:
                raise GeometryError(f"camera {i} transform is singular (|det| = {abs(det):.3g})")
            self._lu.append((lu, piv))

    @property
    def n_views(self) -> int:
        return self.k_mats.shape[0]

    @property
    def feature_size(self) -> tuple[int, int]:
        """(W_F, H_F)."""
        return self.image_size[0] // self.feature_stride, self.image_size[1] // self.feature_stride

    def inverse(self, view: int) -> np.ndarray:
        """K_view^-1 from the cached LU factorization (partial pivoting)."""
        if not 0 <= view < self.n_views:
            raise ParameterError(f"view {view} out of range for {self.n_views} cameras")
        if self._inv is None:
            eye = np.eye(4)
            self._inv = np.stack([scipy.linalg.lu_solve(f, eye) for f in self._lu])
        return self._inv[view]

    def to_dict(self) -> dict:
        return {
            "n_views": self.n_views,
            "image_size": list(self.image_size),
            "stride": self.feature_stride,
            "k_mats": [k.reshape(-1).tolist() for k in self.k_mats],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        k = np.array(d["k_mats"], dtype=np.float64).reshape(-1, 4, 4)
        if k.shape[0] != int(d["n_views"]):
            raise DimensionError(f"n_views={d['n_views']} but {k.shape[0]} matrices given")
        return cls(k, tuple(d["image_size"]), int(d["stride"]))


@dataclass(frozen=True)
class RoI:
    """Axis-aligned world region (x_min, y_min, z_min, x_max, y_max, z_max) in meters."""

    bounds: tuple[float, float, float, float, float, float]

    def __post_init__(self):
        b = tuple(float(v) for v in self.bounds)
        if len(b) != 6:
            raise ParameterError(f"RoI needs 6 bounds, got {len(b)}")
        if not all(b[i + 3] > b[i] for i in range(3)):
            raise ParameterError(f"RoI max must exceed min on every axis: {b}")
        object.__setattr__(self, "bounds", b)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.bounds[:3])

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.bounds[3:])

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def normalize(self, xyz: np.ndarray) -> np.ndarray:
        return (np.asarray(xyz, dtype=np.float64) - self.lo) / self.extent

    def denormalize(self, xyz: np.ndarray) -> np.ndarray:
        return self.lo + np.asarray(xyz, dtype=np.float64) * self.extent

    def shrink(self, margin: float) -> "RoI":
        pad = self.extent * margin
        return RoI(tuple(self.lo + pad) + tuple(self.hi - pad))


def make_depth_bins(mode: str, d_min: float, d_max: float, n_bins: int) -> np.ndarray:
    """Depth of each frustum bin.

    ``UD`` spaces bins uniformly from ``d_min`` to ``d_max``.  ``LID`` grows the
    gap between consecutive bins linearly, ``d_j = d_min + (d_max - d_min) *
    j (j + 1) / (D (D - 1))``, so resolution is finest near the camera.
    """
    if not 0 < d_min < d_max:
        raise ParameterError(f"need 0 < d_min < d_max, got ({d_min}, {d_max})")
    if n_bins < 2:
        raise ParameterError(f"need at least 2 depth bins, got {n_bins}")
    j = np.arange(n_bins, dtype=np.float64)
    if mode == "UD":
        bins = d_min + j * (d_max - d_min) / (n_bins - 1)
        bins[-1] = d_max
        return bins
    if mode == "LID":
        return d_min + (d_max - d_min) * j * (j + 1) / (n_bins * (n_bins - 1))
    raise ParameterError(f"unknown depth mode {mode!r}; expected one of {DEPTH_MODES}")


@dataclass(frozen=True)
class FrustumGrid:
    """Meshgrid of homogeneous frustum points shared by every view.

    ``points[d, row, col] = (u*depth, v*depth, depth, 1)`` with ``(u, v)`` the
    pixel-space centre of feature cell ``(row, col)``.
    """

    points: np.ndarray  # (D, H_F, W_F, 4)
    depths: np.ndarray  # (D,)
    stride: int

    @property
    def dims(self) -> tuple[int, int, int]:
        d, h, w, _ = self.points.shape
        return w, h, d

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (col + 0.5) * self.stride, (row + 0.5) * self.stride


def build_frustum_grid(rig: CameraRig, bins) -> FrustumGrid:
    depths = np.asarray(bins, dtype=np.float64).reshape(-1)
    if depths.size == 0:
        raise ParameterError("frustum grid needs at least one depth bin")
    wf, hf = rig.feature_size
    s = rig.feature_stride
    u = (np.arange(wf) + 0.5) * s
    v = (np.arange(hf) + 0.5) * s
    d = depths[:, None, None]
    pts = np.empty((depths.size, hf, wf, 4))
    pts[..., 0] = u[None, None, :] * d
    pts[..., 1] = v[None, :, None] * d
    pts[..., 2] = d
    pts[..., 3] = 1.0
    pts.setflags(write=False)
    return FrustumGrid(pts, depths, s)


def unproject(rig: CameraRig, view: int, grid: FrustumGrid) -> np.ndarray:
    """World coordinates ``K_view^-1 p`` of every grid point, shape (D, H_F, W_F, 4)."""
    return grid.points @ rig.inverse(view).T


class Projection(NamedTuple):
    u: float
    v: float
    d: float
    visible: bool

    def frustum(self) -> np.ndarray:
        return np.array([self.u * self.d, self.v * self.d, self.d, 1.0])


def project(rig: CameraRig, view: int, world_pt) -> Projection:
    """Pixel ``(u, v)`` and depth of a homogeneous world point.

    Points at or behind the image plane come back with ``visible=False`` and
    ``u = v = nan``.
    """
    if not 0 <= view < rig.n_views:
        raise ParameterError(f"view {view} out of range for {rig.n_views} cameras")
    q = rig.k_mats[view] @ np.asarray(world_pt, dtype=np.float64)
    d = float(q[2])
    if d <= 0:
        return Projection(float("nan"), float("nan"), d, False)
    return Projection(float(q[0] / d), float(q[1] / d), d, True)


def project_points(rig: CameraRig, view: int, xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized ``project`` over (..., 3) world points; returns (u, v, d) arrays."""
    xyz = np.asarray(xyz, dtype=np.float64)
    k = rig.k_mats[view]
    q = xyz @ k[:3, :3].T + k[:3, 3]
    d = q[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(d > 0, q[..., 0] / d, np.nan)
        v = np.where(d > 0, q[..., 1] / d, np.nan)
    return u, v, d


def normalize_coords(raw: np.ndarray, roi: RoI) -> np.ndarray:
    """Map raw world coordinates (D, H_F, W_F, 4) into the RoI unit cube.

    Returns the (D*4, H_F, W_F) layout with channel ``4*d + k`` holding
    component ``k`` of depth bin ``d``.  Points outside the RoI are not
    clipped; the homogeneous component is emitted as 1.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 4 or raw.shape[-1] != 4:
        raise DimensionError(f"expected raw coords of shape (D, H, W, 4), got {raw.shape}")
    out = np.empty_like(raw)
    out[..., :3] = roi.normalize(raw[..., :3])
    out[..., 3] = 1.0
    d, h, w, _ = raw.shape
    return out.transpose(0, 3, 1, 2).reshape(d * 4, h, w)


def world_coord_grid(rig: CameraRig, bins, roi: RoI) -> np.ndarray:
    """Normalized coordinates for all views, shape (N, D*4, H_F, W_F)."""
    grid = build_frustum_grid(rig, bins)
    return np.stack([normalize_coords(unproject(rig, i, grid), roi) for i in range(rig.n_views)])
