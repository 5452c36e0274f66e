"""
Detector: tiny strided-conv backbone, 3D position encoder, anchor-point query
generator, post-norm transformer decoder and a shared detection head.

Box encoding (8 values per box) used by both the head and the loss::

    (x, y, z, log w, log l, log h, sin yaw, cos yaw)

with the centre in meters.  The head regresses the centre as an offset from
its anchor in normalized RoI space, which is then mapped back to meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffarray as da
from .diffarray import DiffArray, parameter
from .errors import ConfigError, DimensionError, ParameterError
from .geometry import CameraRig, RoI, make_depth_bins, world_coord_grid
from .layers import Conv2d, LayerNorm, Linear, Module, make_rng
from .posenc import PEConfig, PositionEncoder

ANCHOR_MODES = ("none", "fix_bev", "fix_3d", "learned_3d")
BOX_DIM = 8
PRIOR_PROB = 0.01


def encode_boxes(boxes) -> np.ndarray:
    """(G, 8) encodings for a list of ``Box3D``."""
    out = np.zeros((len(boxes), BOX_DIM))
    for i, b in enumerate(boxes):
        out[i, :3] = b.center
        out[i, 3:6] = np.log(b.size)
        out[i, 6] = math.sin(b.yaw)
        out[i, 7] = math.cos(b.yaw)
    return out


def decode_boxes(enc: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Centers (K, 3), sizes (K, 3) and yaws (K,) from encodings (K, 8)."""
    enc = np.asarray(enc, dtype=np.float64).reshape(-1, BOX_DIM)
    return enc[:, :3].copy(), np.exp(enc[:, 3:6]), np.arctan2(enc[:, 6], enc[:, 7])


class TinyBackbone(Module):
    """log2(stride) non-overlapping 2x2 stride-2 convolutions with ReLU between."""

    def __init__(self, c_out: int, stride: int, seed: int, width: int = 16):
        n = int(round(math.log2(stride)))
        if stride < 2 or 2**n != stride:
            raise ParameterError(f"backbone stride must be a power of two >= 2, got {stride}")
        self.stride = stride
        chans = [3] + [min(width * 2**i, c_out) for i in range(n - 1)] + [c_out]
        self.convs = [Conv2d(chans[i], chans[i + 1], 2, 2, make_rng(seed, f"backbone.{i}"))
                      for i in range(n)]

    def __call__(self, images) -> DiffArray:
        x = images if isinstance(images, DiffArray) else da.constant(images)
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected images (N, 3, H, W), got {x.shape}")
        if x.shape[2] % self.stride or x.shape[3] % self.stride:
            raise DimensionError(f"image size {x.shape[2:]} not divisible by stride {self.stride}")
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = da.relu(x)
        return x


def grid_anchors(dims: Sequence[int], z: float | None = None) -> np.ndarray:
    """Cell-centre grid over the unit square (2 dims, at height ``z``) or cube (3 dims)."""
    axes = [(np.arange(n) + 0.5) / n for n in dims]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.reshape(-1) for m in mesh], axis=1)
    if len(dims) == 2:
        pts = np.concatenate([pts, np.full((len(pts), 1), 0.5 if z is None else z)], axis=1)
    return pts


class QuerySet(Module):
    """Anchor points plus the two-layer MLP that turns them into query embeddings.

    ``none`` skips anchors: M learned embeddings act as the queries and boxes
    are regressed relative to the RoI centre.
    """

    def __init__(self, mode: str, n_queries: int, c: int, seed: int,
                 bev_grid: Sequence[int] = (39, 39), grid_3d: Sequence[int] = (16, 16, 6)):
        if mode not in ANCHOR_MODES:
            raise ParameterError(f"anchor mode must be one of {ANCHOR_MODES}, got {mode!r}")
        self.mode = mode
        rng = make_rng(seed, "queries")
        if mode == "learned_3d":
            self.anchors = parameter(rng.uniform(0.0, 1.0, size=(n_queries, 3)))
        elif mode == "fix_bev":
            self.anchors = da.constant(grid_anchors(tuple(bev_grid), z=0.5))
        elif mode == "fix_3d":
            self.anchors = da.constant(grid_anchors(tuple(grid_3d)))
        else:
            self.anchors = da.constant(np.full((n_queries, 3), 0.5))
            self.content = parameter(rng.normal(0.0, 1.0, size=(n_queries, c)))
        if mode != "none":
            mlp_rng = make_rng(seed, "queries.mlp")
            self.fc1 = Linear(3, c, mlp_rng)
            self.fc2 = Linear(c, c, mlp_rng)
        self.c = c

    @property
    def n_queries(self) -> int:
        return self.anchors.shape[0]


def generate_queries(qs: QuerySet) -> tuple[DiffArray, DiffArray]:
    """Initial content Q_0 (zeros) and the query embedding, both (M, C)."""
    q0 = da.constant(np.zeros((qs.n_queries, qs.c)))
    if qs.mode == "none":
        return q0, qs.content
    return q0, qs.fc2(da.relu(qs.fc1(qs.anchors)))


class MultiHeadAttention(Module):
    def __init__(self, c: int, n_heads: int, rng: np.random.Generator):
        if c % n_heads:
            raise ConfigError(f"channels {c} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = Linear(c, c, rng)
        self.k = Linear(c, c, rng)
        self.v = Linear(c, c, rng)
        self.o = Linear(c, c, rng)

    def __call__(self, query, key, value) -> tuple[DiffArray, np.ndarray]:
        lq, c = query.shape
        lk = key.shape[0]
        h = self.n_heads
        dh = c // h
        q = da.transpose(da.reshape(self.q(query), (lq, h, dh)), (1, 0, 2))
        kt = da.transpose(da.reshape(self.k(key), (lk, h, dh)), (1, 2, 0))
        v = da.transpose(da.reshape(self.v(value), (lk, h, dh)), (1, 0, 2))
        attn = da.softmax(da.matmul(q, kt) * (1.0 / math.sqrt(dh)), axis=-1)
        out = da.reshape(da.transpose(da.matmul(attn, v), (1, 0, 2)), (lq, c))
        return self.o(out), attn.data


class DecoderLayer(Module):
    """Self-attention, cross-attention over image tokens, FFN; each post-normed."""

    def __init__(self, c: int, n_heads: int, ffn: int, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(c, n_heads, rng)
        self.cross_attn = MultiHeadAttention(c, n_heads, rng)
        self.ffn1 = Linear(c, ffn, rng)
        self.ffn2 = Linear(ffn, c, rng)
        self.norm1 = LayerNorm(c)
        self.norm2 = LayerNorm(c)
        self.norm3 = LayerNorm(c)
        self.last_attention: dict[str, np.ndarray] = {}

    def __call__(self, tgt, memory, query_pe) -> DiffArray:
        qk = tgt + query_pe
        sa, a_self = self.self_attn(qk, qk, tgt)
        tgt = self.norm1(tgt + sa)
        ca, a_cross = self.cross_attn(tgt + query_pe, memory, memory)
        tgt = self.norm2(tgt + ca)
        tgt = self.norm3(tgt + self.ffn2(da.relu(self.ffn1(tgt))))
        self.last_attention = {"self": a_self, "cross": a_cross}
        return tgt


class Decoder(Module):
    def __init__(self, n_layers: int, c: int, n_heads: int, ffn: int, seed: int):
        if n_layers < 1:
            raise ConfigError(f"decoder needs at least one layer, got {n_layers}")
        self.layers = [DecoderLayer(c, n_heads, ffn, make_rng(seed, f"decoder.{i}"))
                       for i in range(n_layers)]


def decoder_forward(dec: Decoder, f3d, q0, query_pe) -> list[DiffArray]:
    """Outputs (M, C) of every layer, first to last."""
    if f3d.shape[1] != q0.shape[1] or q0.shape != query_pe.shape:
        raise DimensionError(f"decoder shapes disagree: memory {f3d.shape}, "
                             f"queries {q0.shape}, embedding {query_pe.shape}")
    outs = []
    q = q0
    for layer in dec.layers:
        q = layer(q, f3d, query_pe)
        outs.append(q)
    return outs


class Head(Module):
    """Shared ReLU trunk, then class logits and the 8 box-regression values."""

    def __init__(self, c: int, n_classes: int, seed: int):
        rng = make_rng(seed, "head")
        self.trunk = Linear(c, c, rng)
        self.cls = Linear(c, n_classes, rng)
        self.cls.b.data[:] = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
        self.reg = Linear(c, BOX_DIM, rng, gain=0.1)


@dataclass
class HeadOutput:
    class_logits: DiffArray  # (M, n_classes)
    box_regression: DiffArray  # (M, 8) raw: (dx, dy, dz, log w, log l, log h, sin, cos)
    boxes: DiffArray  # (M, 8) encoded with centres in meters

    def scores(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.class_logits.data))

    def decoded(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return decode_boxes(self.boxes.data)


def head_forward(head: Head, q, anchors, roi: RoI) -> HeadOutput:
    """Apply the head to one layer's queries; centres are ``anchor + offset``
    in normalized RoI space, mapped to meters."""
    h = da.relu(head.trunk(q))
    logits = head.cls(h)
    reg = head.reg(h)
    m = reg.shape[0]
    if anchors.shape != (m, 3):
        raise DimensionError(f"anchors {anchors.shape} do not match {m} queries")
    centers = (anchors + reg[:, :3]) * np.tile(roi.extent, (m, 1)) + np.tile(roi.lo, (m, 1))
    boxes = da.concat([centers, reg[:, 3:]], axis=1)
    return HeadOutput(logits, reg, boxes)


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    backbone_channels: int = 64
    n_heads: int = 4
    n_layers: int = 3
    ffn_dim: int = 256
    n_classes: int = 4
    n_queries: int = 100
    anchor_mode: str = "learned_3d"
    bev_grid: tuple[int, int] = (39, 39)
    grid_3d: tuple[int, int, int] = (16, 16, 6)
    stride: int = 16
    depth_mode: str = "LID"
    depth_range: tuple[float, float] = (1.0, 61.2)
    n_depth: int = 16
    roi: tuple[float, ...] = (-61.2, -61.2, -10.0, 61.2, 61.2, 10.0)
    n_views: int = 6
    pe: PEConfig = PEConfig()
    seed: int = 0


class PETR(Module):
    def __init__(self, cfg: ModelConfig):
        if cfg.channels % cfg.n_heads:
            raise ConfigError(f"channels {cfg.channels} not divisible by {cfg.n_heads} heads")
        if cfg.pe.channels != cfg.channels:
            raise ConfigError(f"PE channels {cfg.pe.channels} differ from model channels {cfg.channels}")
        self.cfg = cfg
        self.roi = RoI(cfg.roi)
        self.bins = make_depth_bins(cfg.depth_mode, *cfg.depth_range, cfg.n_depth)
        self.backbone = TinyBackbone(cfg.backbone_channels, cfg.stride, cfg.seed)
        self.encoder = PositionEncoder(cfg.pe, cfg.backbone_channels, 4 * cfg.n_depth,
                                       cfg.n_views, cfg.seed)
        self.queries = QuerySet(cfg.anchor_mode, cfg.n_queries, cfg.channels, cfg.seed,
                                cfg.bev_grid, cfg.grid_3d)
        self.decoder = Decoder(cfg.n_layers, cfg.channels, cfg.n_heads, cfg.ffn_dim, cfg.seed)
        self.head = Head(cfg.channels, cfg.n_classes, cfg.seed)
        self._coords: dict[bytes, np.ndarray] = {}

    def coords(self, rig: CameraRig) -> np.ndarray:
        """Normalized frustum coordinates (N, D*4, H_F, W_F), cached per rig."""
        key = rig.k_mats.tobytes() + repr((rig.image_size, rig.feature_stride)).encode()
        if key not in self._coords:
            self._coords[key] = world_coord_grid(rig, self.bins, self.roi)
        return self._coords[key]

    def features(self, images: np.ndarray, rig: CameraRig):
        if rig.n_views != self.cfg.n_views:
            raise DimensionError(f"model built for {self.cfg.n_views} views, rig has {rig.n_views}")
        f2d = self.backbone(images)
        return self.encoder(f2d, self.coords(rig))

    def __call__(self, images: np.ndarray, rig: CameraRig) -> list[HeadOutput]:
        feats = self.features(images, rig)
        q0, query_pe = generate_queries(self.queries)
        outs = decoder_forward(self.decoder, feats.tokens, q0, query_pe)
        return [head_forward(self.head, q, self.queries.anchors, self.roi) for q in outs]
