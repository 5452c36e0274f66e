"""
3D position encoder.

Normalized frustum coordinates (D*4 channels per feature cell) pass through a
per-cell MLP to give a 3D position embedding, which is combined with the
projected 2D features of the same view.  Optional DETR-style 2D sine
embeddings and a learned per-view vector can be summed into the embedding
for the ablations.

Token layout: views are flattened as (view, row, col), so token
``(v * H_F + r) * W_F + c`` is cell ``(r, c)`` of view ``v``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffarray as da
from .diffarray import DiffArray, parameter
from .errors import DimensionError, ParameterError
from .layers import Linear, Module, make_rng

FUSIONS = ("add", "concat", "multiply")


@dataclass(frozen=True)
class PEConfig:
    use_2d_pe: bool = False
    use_mv_prior: bool = False
    use_3d_pe: bool = True
    fusion: str = "add"
    channels: int = 64
    pe_hidden: int | None = None  # defaults to 4 * channels
    no_pe: bool = False  # explicit baseline with every embedding disabled

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ParameterError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        enabled = self.use_2d_pe or self.use_mv_prior or self.use_3d_pe
        if enabled == self.no_pe:
            raise ParameterError("enable at least one position embedding, or set no_pe alone")
        if self.pe_hidden is None:
            object.__setattr__(self, "pe_hidden", 4 * self.channels)


def flatten_views(maps) -> DiffArray:
    """(N, C, H, W) -> (N*H*W, C)."""
    n, c, h, w = maps.shape
    return da.reshape(da.transpose(maps, (0, 2, 3, 1)), (n * h * w, c))


def unflatten_views(tokens, n: int, h: int, w: int) -> DiffArray:
    """(N*H*W, C) -> (N, C, H, W); inverse of ``flatten_views``."""
    if tokens.shape[0] != n * h * w:
        raise DimensionError(f"{tokens.shape[0]} tokens cannot fill {n} views of {h}x{w}")
    c = tokens.shape[1]
    return da.transpose(da.reshape(tokens, (n, h, w, c)), (0, 3, 1, 2))


class PE3DNet(Module):
    """Per-cell MLP: linear, ReLU, linear (equivalent to 1x1 conv, ReLU, 1x1 conv)."""

    def __init__(self, n_in: int, hidden: int, c: int, rng: np.random.Generator):
        self.fc1 = Linear(n_in, hidden, rng)
        self.fc2 = Linear(hidden, c, rng)

    def __call__(self, coords) -> DiffArray:
        return self.fc2(da.relu(self.fc1(coords)))


def encode_3d_pe(p3d: np.ndarray, net: PE3DNet) -> DiffArray:
    """3D position embedding maps (N, C, H_F, W_F) from coordinates (N, D*4, H_F, W_F)."""
    p3d = np.asarray(p3d, dtype=np.float64)
    if p3d.ndim == 3:
        p3d = p3d[None]
    n, dc, h, w = p3d.shape
    if dc != net.fc1.w.shape[0]:
        raise DimensionError(f"coordinate channels {dc} do not match PE input {net.fc1.w.shape[0]}")
    tokens = p3d.transpose(0, 2, 3, 1).reshape(-1, dc)
    return unflatten_views(net(tokens), n, h, w)


def encode_2d_pe(h: int, w: int, c: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed DETR sine embedding, shape (C, H, W).

    The first C/2 channels encode the row and the rest the column; within
    each half, channels (2i, 2i+1) are (sin, cos) at the same frequency.
    """
    if c % 4:
        raise ParameterError(f"2D sine embedding needs channels divisible by 4, got {c}")
    npf = c // 2
    scale = 2 * math.pi
    y = (np.arange(h, dtype=np.float64) + 1) / (h + 1e-6) * scale
    x = (np.arange(w, dtype=np.float64) + 1) / (w + 1e-6) * scale
    dim_t = temperature ** (2 * (np.arange(npf) // 2) / npf)

    def embed(pos):
        a = pos[:, None] / dim_t
        out = np.empty_like(a)
        out[:, 0::2] = np.sin(a[:, 0::2])
        out[:, 1::2] = np.cos(a[:, 1::2])
        return out

    ey, ex = embed(y), embed(x)  # (H, npf), (W, npf)
    pe = np.empty((c, h, w))
    pe[:npf] = ey.T[:, :, None]
    pe[npf:] = ex.T[:, None, :]
    return pe


class MVPrior(Module):
    """One learned vector per camera, N(0, 0.02^2) at init."""

    def __init__(self, n_views: int, c: int, rng: np.random.Generator):
        self.table = parameter(rng.normal(0.0, 0.02, size=(n_views, c)))

    def __call__(self, view: int) -> DiffArray:
        if not 0 <= view < self.table.shape[0]:
            raise ParameterError(f"view {view} out of range for {self.table.shape[0]} cameras")
        return self.table[view]

    def broadcast(self, n: int, h: int, w: int) -> DiffArray:
        """Per-token rows (N*H*W, C) in flattened view order."""
        if n != self.table.shape[0]:
            raise DimensionError(f"prior has {self.table.shape[0]} views, features have {n}")
        return da.take(self.table, np.repeat(np.arange(n), h * w), axis=0)


def encode_mv_prior(prior: MVPrior, view: int) -> DiffArray:
    return prior(view)


@dataclass
class PosAwareFeatures:
    tokens: DiffArray  # (N*H*W, C)
    n_views: int
    height: int
    width: int

    def maps(self) -> DiffArray:
        return unflatten_views(self.tokens, self.n_views, self.height, self.width)


def fuse(f2d: DiffArray, pe: DiffArray, mode: str, reduce: Linear | None = None) -> DiffArray:
    """Combine projected features with the position embedding, both (T, C) tokens.

    ``concat`` stacks the two along channels and maps 2C back to C with ``reduce``.
    """
    if f2d.shape != pe.shape:
        raise DimensionError(f"feature shape {f2d.shape} does not match embedding {pe.shape}")
    if mode == "add":
        return f2d + pe
    if mode == "multiply":
        return f2d * pe
    if mode == "concat":
        if reduce is None:
            raise ParameterError("concat fusion needs a reduction layer")
        return reduce(da.concat([f2d, pe], axis=1))
    raise ParameterError(f"fusion must be one of {FUSIONS}, got {mode!r}")


class PositionEncoder(Module):
    """Projects backbone features to C channels and fuses them with the embeddings."""

    def __init__(self, cfg: PEConfig, c_in: int, coord_channels: int, n_views: int, seed: int):
        self.cfg = cfg
        c = cfg.channels
        self.input_proj = Linear(c_in, c, make_rng(seed, "posenc.input_proj"))
        if cfg.use_3d_pe:
            self.pe3d = PE3DNet(coord_channels, cfg.pe_hidden, c, make_rng(seed, "posenc.pe3d"))
        if cfg.use_mv_prior:
            self.mv = MVPrior(n_views, c, make_rng(seed, "posenc.mv"))
        if cfg.fusion == "concat":
            self.reduce = Linear(2 * c, c, make_rng(seed, "posenc.reduce"))
        self._pe2d_cache: dict[tuple[int, int, int], np.ndarray] = {}

    def _pe2d_tokens(self, n: int, h: int, w: int) -> np.ndarray:
        key = (n, h, w)
        if key not in self._pe2d_cache:
            pe = encode_2d_pe(h, w, self.cfg.channels)
            self._pe2d_cache[key] = np.tile(pe.transpose(1, 2, 0).reshape(h * w, -1), (n, 1))
        return self._pe2d_cache[key]

    def embedding(self, p3d: np.ndarray) -> DiffArray:
        """Summed position embedding tokens (N*H*W, C) for coordinates (N, D*4, H, W)."""
        n, dc, h, w = p3d.shape
        c = self.cfg.channels
        terms: list = []
        if self.cfg.use_3d_pe:
            tokens = np.ascontiguousarray(p3d.transpose(0, 2, 3, 1)).reshape(-1, dc)
            terms.append(self.pe3d(tokens))
        if self.cfg.use_mv_prior:
            terms.append(self.mv.broadcast(n, h, w))
        if self.cfg.use_2d_pe:
            terms.append(da.constant(self._pe2d_tokens(n, h, w)))
        if not terms:
            return da.constant(np.zeros((n * h * w, c)))
        out = terms[0]
        for t in terms[1:]:
            out = out + t
        return out

    def __call__(self, f2d, p3d: np.ndarray) -> PosAwareFeatures:
        n, _, h, w = f2d.shape
        if p3d.shape[0] != n or p3d.shape[2:] != (h, w):
            raise DimensionError(f"coordinates {p3d.shape} do not match features {f2d.shape}")
        proj = self.input_proj(flatten_views(f2d))
        pe = self.embedding(p3d)
        fused = fuse(proj, pe, self.cfg.fusion, getattr(self, "reduce", None))
        return PosAwareFeatures(fused, n, h, w)


def pe_similarity_map(pe: np.ndarray, anchor: tuple[int, int, int]) -> np.ndarray:
    """Cosine similarity of every cell's embedding to the anchor cell's, shape (N, H, W).

    ``pe`` is (N, C, H, W); cells with a zero-norm embedding get similarity 0.
    """
    pe = np.asarray(pe, dtype=np.float64)
    n, _, h, w = pe.shape
    v, r, c = anchor
    if not (0 <= v < n and 0 <= r < h and 0 <= c < w):
        raise ParameterError(f"anchor {anchor} outside ({n}, {h}, {w})")
    ref = pe[v, :, r, c]
    dots = np.einsum("nchw,c->nhw", pe, ref)
    norms = np.linalg.norm(pe, axis=1) * np.linalg.norm(ref)
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(norms > 0, dots / norms, 0.0)
    return np.clip(sim, -1.0, 1.0)


def neighbor_similarity_stats(pe: np.ndarray, points: np.ndarray, radius: float = 2.0
                              ) -> tuple[float, float, int]:
    """Mean PE cosine similarity over cross-view cell pairs whose 3D points lie
    within ``radius``, the mean over all cross-view pairs, and the near-pair count.

    ``pe`` is (N, C, H, W); ``points`` is (N, H, W, 3) world positions per cell.
    """
    n, c, h, w = pe.shape
    vecs = pe.transpose(0, 2, 3, 1).reshape(-1, c)
    norms = np.linalg.norm(vecs, axis=1)
    unit = np.divide(vecs, norms[:, None], out=np.zeros_like(vecs), where=norms[:, None] > 0)
    sim = unit @ unit.T
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    view = np.repeat(np.arange(n), h * w)
    cross = view[:, None] != view[None, :]
    near = cross & (dist < radius)
    if not near.any():
        return float("nan"), float(sim[cross].mean()), 0
    # each unordered pair appears twice in both sets, which leaves the means unchanged
    return float(sim[near].mean()), float(sim[cross].mean()), int(near.sum() // 2)
