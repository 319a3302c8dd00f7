"""End-to-end pipelines, the heatmap loss and the fusion FLOP estimator.

Clips enter as ``[..., F, 3, H, W]`` arrays or tensors (``F = 2T + 1``, current
frame at index ``T``); every pipeline returns current-frame heatmaps
``[..., N, 4h, 4w]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .backbone import BackboneConfig, decode, encode, init_backbone
from .fusion import FusionConfig, fuse, init_fusion
from .nn import Params
from .tensor import Tensor

VARIANTS = ("joint_specific", "self_all", "cross_only", "selfaux_then_cross", "single_frame")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    fusion_variant: str = "joint_specific"
    variant_layers: int = 2

    def __post_init__(self):
        if self.fusion_variant not in VARIANTS:
            raise ValueError(f"unknown fusion_variant {self.fusion_variant!r}; expected one of {VARIANTS}")
        if self.variant_layers < 0:
            raise ValueError("variant_layers must be >= 0")

    @property
    def n_frames(self) -> int:
        return 1 if self.fusion_variant == "single_frame" else self.fusion.n_frames


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Params:
    rng = np.random.default_rng(seed)
    p = init_backbone(cfg.backbone, rng, dtype)
    c = cfg.backbone.channels
    if cfg.fusion_variant == "joint_specific":
        p.update(init_fusion(cfg.fusion, c, cfg.backbone.n_joints, rng, dtype))
    elif cfg.fusion_variant != "single_frame":
        p.update(_init_variant(cfg, rng, dtype))
    return p


def _init_variant(cfg: ModelConfig, rng, dtype) -> Params:
    p: Params = {}
    c = cfg.backbone.channels
    inner = cfg.fusion.resolved_dim(c)
    ratio = cfg.fusion.mlp_ratio
    for i in range(cfg.variant_layers):
        pre = f"variant.layer{i}"
        if cfg.fusion_variant == "selfaux_then_cross":
            nn.init_norm(p, f"{pre}.norm_aux", c, dtype)
            nn.init_attention(p, f"{pre}.aux_attn", c, inner, rng, dtype)
        nn.init_norm(p, f"{pre}.norm1", c, dtype)
        if cfg.fusion_variant != "self_all":
            nn.init_norm(p, f"{pre}.norm_kv", c, dtype)
        nn.init_attention(p, f"{pre}.attn", c, inner, rng, dtype)
        nn.init_norm(p, f"{pre}.norm2", c, dtype)
        nn.init_mlp(p, f"{pre}.mlp", c, ratio, rng, dtype)
    return p


def _as_clip(clip) -> Tensor:
    return clip if isinstance(clip, Tensor) else Tensor(np.asarray(clip))


def _check_frames(frames: Tensor, cfg: ModelConfig) -> None:
    if frames.ndim < 4 or frames.shape[-4] != cfg.fusion.n_frames:
        raise T.DimensionError(f"clip {frames.shape} does not hold {cfg.fusion.n_frames} frames")


def forward(clip, params: Params, cfg: ModelConfig, return_mask: bool = False):
    """TAR pipeline: encode all frames, detached auxiliary decode, masks, JTA, GRA, decode."""
    if cfg.fusion_variant != "joint_specific":
        raise ValueError(f"forward() runs the joint_specific pipeline, config says {cfg.fusion_variant!r}")
    frames = _as_clip(clip)
    _check_frames(frames, cfg)
    feats = encode(frames, params, cfg.backbone)
    with T.no_grad():
        aux = decode(feats.detach(), params, cfg.backbone)
    fused, mask = fuse(feats, aux.data, params, cfg.fusion, cfg.backbone.grid)
    heat = decode(fused, params, cfg.backbone)
    return (heat, mask) if return_mask else heat


def forward_baseline(frame, params: Params, cfg: ModelConfig) -> Tensor:
    """Single-frame path: ``decode(encode(frame))`` on ``[..., 3, H, W]``."""
    return decode(encode(_as_clip(frame), params, cfg.backbone), params, cfg.backbone)


def _split_current(feats: Tensor, span: int):
    *lead, nf, hw, c = feats.shape
    cur = T.reshape(T.slice_axis(feats, span, span + 1, axis=-3), (*lead, hw, c))
    parts = []
    if span > 0:
        parts.append(T.slice_axis(feats, 0, span, axis=-3))
    if span + 1 < nf:
        parts.append(T.slice_axis(feats, span + 1, nf, axis=-3))
    aux = parts[0] if len(parts) == 1 else T.concat(parts, axis=-3)
    return cur, T.reshape(aux, (*lead, (nf - 1) * hw, c))


def fuse_variant(feats: Tensor, params: Params, cfg: ModelConfig) -> Tensor:
    """Fusion stage of the ablation variants on encoded frames ``[..., F, h*w, C]``."""
    variant = cfg.fusion_variant
    span = cfg.fusion.temporal_span
    *lead, nf, hw, c = feats.shape
    heads = cfg.fusion.resolved_heads(c)
    if variant == "self_all":
        x = T.reshape(feats, (*lead, nf * hw, c))
        for i in range(cfg.variant_layers):
            pre = f"variant.layer{i}"
            y = nn.norm(x, params, f"{pre}.norm1")
            x = T.add(x, nn.attention(y, y, params, f"{pre}.attn", heads))
            x = T.add(x, nn.mlp(nn.norm(x, params, f"{pre}.norm2"), params, f"{pre}.mlp"))
        return T.slice_axis(x, span * hw, (span + 1) * hw, axis=-2)
    if variant in ("cross_only", "selfaux_then_cross"):
        if span == 0:
            raise ValueError(f"{variant} needs auxiliary frames; temporal_span is 0")
        cur, aux = _split_current(feats, span)
        for i in range(cfg.variant_layers):
            pre = f"variant.layer{i}"
            if variant == "selfaux_then_cross":
                y = nn.norm(aux, params, f"{pre}.norm_aux")
                aux = T.add(aux, nn.attention(y, y, params, f"{pre}.aux_attn", heads))
            q = nn.norm(cur, params, f"{pre}.norm1")
            kv = nn.norm(aux, params, f"{pre}.norm_kv")
            cur = T.add(cur, nn.attention(q, kv, params, f"{pre}.attn", heads))
            cur = T.add(cur, nn.mlp(nn.norm(cur, params, f"{pre}.norm2"), params, f"{pre}.mlp"))
        return cur
    raise ValueError(f"fuse_variant: unknown variant {variant!r}")


def forward_variant(clip, params: Params, cfg: ModelConfig) -> Tensor:
    frames = _as_clip(clip)
    _check_frames(frames, cfg)
    feats = encode(frames, params, cfg.backbone)
    return decode(fuse_variant(feats, params, cfg), params, cfg.backbone)


def predict(clip, params: Params, cfg: ModelConfig) -> Tensor:
    """Dispatch on ``cfg.fusion_variant``; single_frame uses the current frame only."""
    frames = _as_clip(clip)
    if cfg.fusion_variant == "joint_specific":
        return forward(frames, params, cfg)
    if cfg.fusion_variant == "single_frame":
        if frames.shape[-4] == 1 or frames.ndim == 3:
            cur = frames if frames.ndim == 3 else T.reshape(frames, frames.shape[:-4] + frames.shape[-3:])
        else:
            span = (frames.shape[-4] - 1) // 2
            cur = T.slice_axis(frames, span, span + 1, axis=-4)
            cur = T.reshape(cur, frames.shape[:-4] + frames.shape[-3:])
        return forward_baseline(cur, params, cfg)
    return forward_variant(frames, params, cfg)


def loss(pred: Tensor, target, visibility) -> Tensor:
    """Sum of squared heatmap error over joints and pixels, averaged over clips.

    ``pred`` and ``target`` are ``[..., N, h, w]``; ``visibility`` is ``[..., N]``
    and zeroes the contribution of flagged-invisible joints.
    """
    g = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if g.shape != pred.shape:
        raise T.DimensionError(f"loss: prediction {pred.shape} vs target {g.shape}")
    vis = np.asarray(visibility, dtype=pred.dtype)
    if vis.shape != pred.shape[:-2]:
        raise T.DimensionError(f"loss: visibility {vis.shape} does not match {pred.shape[:-2]}")
    weight = np.broadcast_to(vis[..., None, None], pred.shape).copy()
    diff = T.sub(pred, Tensor(g))
    total = T.sum(T.mul(T.mul(diff, diff), Tensor(weight)))
    n_clips = int(np.prod(pred.shape[:-3])) if pred.ndim > 3 else 1
    return T.scale(total, 1.0 / n_clips) if n_clips > 1 else total


# --------------------------------------------------------------------------
# analytic FLOPs of the fusion stage
# --------------------------------------------------------------------------

def attention_flops(n_query: int, n_key: int, width: int, inner: int) -> int:
    """2 x MACs of one attention branch: projections, scores, weighted sum, output."""
    proj = 2 * n_query * width * inner + 2 * 2 * n_key * width * inner + 2 * n_query * inner * width
    scores = 2 * n_query * n_key * inner
    weighted = 2 * n_query * n_key * inner
    return proj + scores + weighted


def mlp_flops(n_tokens: int, width: int, ratio: int) -> int:
    return 2 * 2 * n_tokens * width * ratio * width


def flop_estimate(cfg: ModelConfig, variant: str | None = None, layers: int | None = None) -> int:
    """Matmul FLOPs of the fusion stage per clip (shared encoder/decoder excluded).

    ``layers`` overrides the depth of the ablation variants (default
    ``cfg.variant_layers``); the joint-specific variant always uses
    ``cfg.fusion.jta_layers`` / ``gra_layers``.
    """
    variant = variant or cfg.fusion_variant
    c = cfg.backbone.channels
    d = cfg.fusion.resolved_dim(c)
    r = cfg.fusion.mlp_ratio
    n = cfg.backbone.n_joints
    hw = cfg.backbone.n_tokens
    nf = cfg.fusion.n_frames
    depth = cfg.variant_layers if layers is None else layers
    aux = (nf - 1) * hw
    if variant == "joint_specific":
        per_layer = attention_flops(n, nf * hw, c, d) + attention_flops(n, n, c, d) + mlp_flops(n, c, r)
        return cfg.fusion.jta_layers * per_layer + cfg.fusion.gra_layers * attention_flops(hw, n, c, d)
    if variant == "self_all":
        return depth * (attention_flops(nf * hw, nf * hw, c, d) + mlp_flops(nf * hw, c, r))
    if variant == "cross_only":
        return depth * (attention_flops(hw, aux, c, d) + mlp_flops(hw, c, r))
    if variant == "selfaux_then_cross":
        return depth * (attention_flops(aux, aux, c, d) + attention_flops(hw, aux, c, d) + mlp_flops(hw, c, r))
    if variant == "single_frame":
        return 0
    raise ValueError(f"flop_estimate: unknown variant {variant!r}")


def flop_table(cfg: ModelConfig, equal_depth: bool = True) -> dict[str, int]:
    """FLOPs of the four temporal variants; ablations match JTA depth when ``equal_depth``."""
    layers = cfg.fusion.jta_layers if equal_depth else cfg.variant_layers
    return {v: flop_estimate(cfg, v, layers) for v in ("joint_specific", "cross_only", "selfaux_then_cross", "self_all")}


def vitb_scale_config() -> ModelConfig:
    """ViT-B-sized fusion setting: C=768, 384x288 input (24x18 tokens), T=2."""
    return ModelConfig(
        backbone=BackboneConfig(image_h=384, image_w=288, channels=768, depth=12, heads=12,
                                n_joints=15, decoder_mid_channels=256),
        fusion=FusionConfig(jta_layers=6, gra_layers=1, temporal_span=2, heads=12),
        variant_layers=6,
    )
