"""Joint-centric temporal aggregation (JTA) and global restoring attention (GRA).

Frame features are stacked as ``[..., F, h*w, C]`` with ``F = 2T + 1`` frames in
temporal order; flattened for attention they become ``[..., F*h*w, C]``
(frame-major, then row-major spatial). Joint-specific masks use the same
layout along their last axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .nn import Params
from .tensor import Tensor


@dataclass(frozen=True)
class FusionConfig:
    jta_layers: int = 6
    gra_layers: int = 1
    phi: float = 0.2
    temporal_span: int = 1
    heads: int | None = None  # None: max(1, C // 64)
    attn_dim: int | None = None  # None: C
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.jta_layers < 0 or self.gra_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if not 0.0 < self.phi < 1.0:
            raise ValueError(f"phi must lie in (0, 1), got {self.phi}")
        if self.temporal_span < 0:
            raise ValueError("temporal_span must be >= 0")

    @property
    def n_frames(self) -> int:
        return 2 * self.temporal_span + 1

    def resolved_heads(self, channels: int) -> int:
        return self.heads if self.heads is not None else max(1, channels // 64)

    def resolved_dim(self, channels: int) -> int:
        return self.attn_dim if self.attn_dim is not None else channels


@dataclass
class AttnMask:
    """Boolean relevance mask ``[..., N, F*h*w]`` plus where the fallback fired.

    ``fallback[..., f, j]`` is True when joint ``j`` had no token at or above
    ``phi`` in frame ``f`` and its argmax token was unmasked instead.
    """

    relevant: np.ndarray
    fallback: np.ndarray
    n_frames: int
    grid: tuple[int, int]

    def frame_block(self, f: int) -> np.ndarray:
        hw = self.grid[0] * self.grid[1]
        return self.relevant[..., f * hw:(f + 1) * hw]


def init_fusion(cfg: FusionConfig, channels: int, n_joints: int, rng: np.random.Generator,
                dtype=np.float32) -> Params:
    p: Params = {}
    inner = cfg.resolved_dim(channels)
    p["joint_queries"] = Tensor(nn.trunc_normal(rng, (n_joints, channels), dtype=dtype), requires_grad=True)
    for i in range(cfg.jta_layers):
        pre = f"jta.layer{i}"
        nn.init_norm(p, f"{pre}.norm_q", channels, dtype)
        nn.init_norm(p, f"{pre}.norm_kv", channels, dtype)
        nn.init_attention(p, f"{pre}.cross", channels, inner, rng, dtype)
        nn.init_norm(p, f"{pre}.norm_self", channels, dtype)
        nn.init_attention(p, f"{pre}.self", channels, inner, rng, dtype)
        nn.init_norm(p, f"{pre}.norm_mlp", channels, dtype)
        nn.init_mlp(p, f"{pre}.mlp", channels, cfg.mlp_ratio, rng, dtype)
    for i in range(cfg.gra_layers):
        pre = f"gra.layer{i}"
        nn.init_norm(p, f"{pre}.norm_q", channels, dtype)
        nn.init_norm(p, f"{pre}.norm_kv", channels, dtype)
        nn.init_attention(p, f"{pre}.attn", channels, inner, rng, dtype)
    return p


def build_masks(aux_heatmaps: np.ndarray, phi: float, grid: tuple[int, int]) -> AttnMask:
    """Threshold per-frame heatmaps ``[..., F, N, 4h, 4w]`` into token masks.

    Each map is max-pooled by 4 onto the ``h x w`` token grid; a token is
    relevant iff its pooled value is ``>= phi``. When a (frame, joint) pair
    has no relevant token, its argmax token (lowest flat index on ties) is
    switched on so no attention row is ever fully masked.
    """
    maps = np.asarray(aux_heatmaps.data if isinstance(aux_heatmaps, Tensor) else aux_heatmaps)
    h, w = grid
    if maps.ndim < 4 or maps.shape[-2:] != (4 * h, 4 * w):
        raise T.DimensionError(f"build_masks: heatmaps {maps.shape} do not match token grid {h}x{w} (x4)")
    *lead, n_frames, n_joints, _, _ = maps.shape
    with T.no_grad():
        pooled = T.max_pool2d(Tensor(maps), 4).data.reshape(*lead, n_frames, n_joints, h * w)
    relevant = pooled >= phi
    fallback = ~relevant.any(axis=-1)
    if fallback.any():
        top = pooled.argmax(axis=-1)
        idx = np.nonzero(fallback)
        relevant[idx + (top[idx],)] = True
    # [..., F, N, hw] -> [..., N, F*hw]
    relevant = np.moveaxis(relevant, -3, -2).reshape(*lead, n_joints, n_frames * h * w)
    return AttnMask(relevant=relevant, fallback=fallback, n_frames=n_frames, grid=(h, w))


def _mask_array(mask) -> np.ndarray | None:
    if mask is None:
        return None
    return mask.relevant if isinstance(mask, AttnMask) else np.asarray(mask, dtype=bool)


def masked_cross_attention(q_prev: Tensor, f_all: Tensor, mask, params: Params, prefix: str,
                           heads: int, return_weights: bool = False):
    """Feature-to-joint attention: ``q_prev + attn(norm(q_prev), norm(f_all), mask)``."""
    m = _mask_array(mask)
    if m is not None and m.shape[-2:] != (q_prev.shape[-2], f_all.shape[-2]):
        raise T.DimensionError(f"mask {m.shape} does not match {q_prev.shape[-2]} queries x {f_all.shape[-2]} tokens")
    qn = nn.norm(q_prev, params, f"{prefix}.norm_q")
    fn = nn.norm(f_all, params, f"{prefix}.norm_kv")
    res = nn.attention(qn, fn, params, f"{prefix}.cross", heads, mask=m, return_weights=return_weights)
    if return_weights:
        return T.add(q_prev, res[0]), res[1]
    return T.add(q_prev, res)


def jta_layer(q_prev: Tensor, f_all: Tensor, mask, params: Params, prefix: str, heads: int) -> Tensor:
    q = masked_cross_attention(q_prev, f_all, mask, params, prefix, heads)
    y = nn.norm(q, params, f"{prefix}.norm_self")
    q = T.add(q, nn.attention(y, y, params, f"{prefix}.self", heads))
    return T.add(q, nn.mlp(nn.norm(q, params, f"{prefix}.norm_mlp"), params, f"{prefix}.mlp"))


def flatten_frames(frames: Tensor) -> Tensor:
    """``[..., F, h*w, C]`` -> ``[..., F*h*w, C]`` (frame-major)."""
    *lead, nf, hw, c = frames.shape
    return T.reshape(frames, (*lead, nf * hw, c))


def jta(q0: Tensor, frames: Tensor, mask, params: Params, cfg: FusionConfig, heads: int) -> Tensor:
    """Run ``cfg.jta_layers`` layers from ``q0`` over frame features ``[..., F, h*w, C]``."""
    f_all = flatten_frames(frames)
    m = _mask_array(mask)
    if m is not None and m.shape[-1] != f_all.shape[-2]:
        raise T.DimensionError(f"jta: mask covers {m.shape[-1]} tokens but features have {f_all.shape[-2]}")
    q = q0
    for i in range(cfg.jta_layers):
        q = jta_layer(q, f_all, m, params, f"jta.layer{i}", heads)
    return q


def gra(f_t: Tensor, q_tilde: Tensor, params: Params, cfg: FusionConfig, heads: int,
        return_weights: bool = False):
    """Current-frame tokens attend to the aggregated joint tokens, with residual."""
    f = f_t
    weights = []
    for i in range(cfg.gra_layers):
        pre = f"gra.layer{i}"
        res = nn.attention(nn.norm(f, params, f"{pre}.norm_q"), nn.norm(q_tilde, params, f"{pre}.norm_kv"),
                           params, f"{pre}.attn", heads, return_weights=return_weights)
        if return_weights:
            res, wts = res
            weights.append(wts)
        f = T.add(f, res)
    if return_weights:
        return f, weights
    return f


def broadcast_queries(queries: Tensor, lead: tuple[int, ...]) -> Tensor:
    """Tile ``[N, C]`` queries to ``[*lead, N, C]`` (gradients sum back)."""
    if not lead:
        return queries
    zeros = Tensor(np.zeros((*lead, *queries.shape), dtype=queries.dtype))
    return T.add(zeros, queries)


def fuse(frames: Tensor, aux_heatmaps: np.ndarray, params: Params, cfg: FusionConfig, grid: tuple[int, int]):
    """Masks -> JTA -> GRA over encoded frames ``[..., F, h*w, C]``.

    Returns the enhanced current-frame tokens ``[..., h*w, C]`` and the mask.
    """
    *lead, nf, hw, c = frames.shape
    if nf != cfg.n_frames:
        raise T.DimensionError(f"fuse: got {nf} frames, config expects {cfg.n_frames}")
    heads = cfg.resolved_heads(c)
    mask = build_masks(aux_heatmaps, cfg.phi, grid)
    q0 = broadcast_queries(params["joint_queries"], tuple(lead))
    q_tilde = jta(q0, frames, mask, params, cfg, heads)
    f_t = T.reshape(T.slice_axis(frames, cfg.temporal_span, cfg.temporal_span + 1, axis=-3), (*lead, hw, c))
    return gra(f_t, q_tilde, params, cfg, heads), mask
