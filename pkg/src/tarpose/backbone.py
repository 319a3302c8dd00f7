"""Plain ViT encoder and the two-deconvolution heatmap decoder.

Token grids are tensors of shape ``[..., h*w, C]`` flattened row-major
(token index ``y*w + x``). Heatmaps are ``[..., N, 4h, 4w]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .nn import Params
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    image_h: int = 64
    image_w: int = 48
    patch: int = 16
    channels: int = 32
    depth: int = 2
    heads: int = 1
    mlp_ratio: int = 4
    n_joints: int = 15
    decoder_mid_channels: int = 32

    def __post_init__(self):
        if self.patch < 1 or self.image_h % self.patch or self.image_w % self.patch:
            raise ValueError(f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}")
        if self.patch % 4:
            # the decoder upsamples by 4, so heatmap pixels must map to whole input pixels
            raise ValueError(f"patch {self.patch} must be a multiple of 4")
        if self.channels < 1 or self.heads < 1 or self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.n_joints < 1:
            raise ValueError("n_joints must be >= 1")
        if self.depth < 0 or self.mlp_ratio < 1 or self.decoder_mid_channels < 1:
            raise ValueError("depth >= 0, mlp_ratio >= 1 and decoder_mid_channels >= 1 required")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch, self.image_w // self.patch

    @property
    def n_tokens(self) -> int:
        h, w = self.grid
        return h * w

    @property
    def heatmap_stride(self) -> int:
        """Input pixels per heatmap pixel."""
        return self.patch // 4

    @property
    def heatmap_size(self) -> tuple[int, int]:
        h, w = self.grid
        return 4 * h, 4 * w


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    p: Params = {}
    c, d = cfg.channels, cfg.patch
    nn.init_linear(p, "encoder.patch", 3 * d * d, c, rng, dtype)
    p["encoder.pos_embed"] = Tensor(nn.trunc_normal(rng, (cfg.n_tokens, c), dtype=dtype), requires_grad=True)
    for i in range(cfg.depth):
        pre = f"encoder.block{i}"
        nn.init_norm(p, f"{pre}.norm1", c, dtype)
        nn.init_attention(p, f"{pre}.attn", c, c, rng, dtype)
        nn.init_norm(p, f"{pre}.norm2", c, dtype)
        nn.init_mlp(p, f"{pre}.mlp", c, cfg.mlp_ratio, rng, dtype)

    m = cfg.decoder_mid_channels
    p["decoder.deconv1.weight"] = Tensor(nn.trunc_normal(rng, (c, m, 4, 4), dtype=dtype), requires_grad=True)
    p["decoder.deconv1.bias"] = Tensor(np.zeros(m, dtype=dtype), requires_grad=True)
    nn.init_norm(p, "decoder.norm1", m, dtype)
    p["decoder.deconv2.weight"] = Tensor(nn.trunc_normal(rng, (m, m, 4, 4), dtype=dtype), requires_grad=True)
    p["decoder.deconv2.bias"] = Tensor(np.zeros(m, dtype=dtype), requires_grad=True)
    nn.init_norm(p, "decoder.norm2", m, dtype)
    p["decoder.final.weight"] = Tensor(nn.trunc_normal(rng, (cfg.n_joints, m), dtype=dtype), requires_grad=True)
    p["decoder.final.bias"] = Tensor(np.zeros(cfg.n_joints, dtype=dtype), requires_grad=True)
    return p


def patch_embed(image, params: Params, cfg: BackboneConfig) -> Tensor:
    """``[..., 3, H, W]`` image -> ``[..., h*w, C]`` tokens with positional embedding."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    *lead, ch, hh, ww = image.shape
    d = cfg.patch
    if ch != 3 or hh % d or ww % d:
        raise T.DimensionError(f"patch_embed: image {image.shape} incompatible with patch {d}")
    h, w = hh // d, ww // d
    if (h, w) != cfg.grid:
        raise T.DimensionError(f"patch_embed: image {hh}x{ww} does not match config {cfg.image_h}x{cfg.image_w}")
    n = len(lead)
    x = T.reshape(image, (*lead, 3, h, d, w, d))
    x = T.transpose(x, (*range(n), n + 1, n + 3, n, n + 2, n + 4))
    x = T.reshape(x, (*lead, h * w, 3 * d * d))
    return T.add(nn.linear(x, params, "encoder.patch"), params["encoder.pos_embed"])


def encoder_block(tokens: Tensor, params: Params, prefix: str, heads: int) -> Tensor:
    y = nn.norm(tokens, params, f"{prefix}.norm1")
    x = T.add(tokens, nn.attention(y, y, params, f"{prefix}.attn", heads))
    return T.add(x, nn.mlp(nn.norm(x, params, f"{prefix}.norm2"), params, f"{prefix}.mlp"))


def encode(image, params: Params, cfg: BackboneConfig, depth: int | None = None) -> Tensor:
    x = patch_embed(image, params, cfg)
    for i in range(cfg.depth if depth is None else depth):
        x = encoder_block(x, params, f"encoder.block{i}", cfg.heads)
    return x


def _channel_norm_gelu(x: Tensor, params: Params, prefix: str) -> Tensor:
    # layer-style normalisation over channels at each pixel, per-channel affine
    nd = x.ndim
    y = T.transpose(x, (*range(nd - 3), nd - 2, nd - 1, nd - 3))
    y = T.gelu(nn.norm(y, params, prefix))
    return T.transpose(y, (*range(nd - 3), nd - 1, nd - 3, nd - 2))


def decode(tokens: Tensor, params: Params, cfg: BackboneConfig) -> Tensor:
    """``[..., h*w, C]`` tokens -> ``[..., N, 4h, 4w]`` heatmaps."""
    *lead, n_tok, c = tokens.shape
    h, w = cfg.grid
    if n_tok != h * w or c != cfg.channels:
        raise T.DimensionError(f"decode: tokens {tokens.shape} do not match grid {h}x{w}x{cfg.channels}")
    n = len(lead)
    x = T.transpose(T.reshape(tokens, (*lead, h, w, c)), (*range(n), n + 2, n, n + 1))
    x = T.deconv2d(x, params["decoder.deconv1.weight"], params["decoder.deconv1.bias"])
    x = _channel_norm_gelu(x, params, "decoder.norm1")
    x = T.deconv2d(x, params["decoder.deconv2.weight"], params["decoder.deconv2.bias"])
    x = _channel_norm_gelu(x, params, "decoder.norm2")
    return T.conv2d_1x1(x, params["decoder.final.weight"], params["decoder.final.bias"])
