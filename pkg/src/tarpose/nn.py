"""Parameter initialisation and the transformer sublayers shared by every module.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names
(``encoder.block0.attn.q.weight``); the same names are used in checkpoints.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

Params = dict[str, Tensor]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by redrawing outliers."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def init_linear(params: Params, prefix: str, fan_in: int, fan_out: int, rng, dtype=np.float32) -> None:
    params[f"{prefix}.weight"] = _param(trunc_normal(rng, (fan_in, fan_out), dtype=dtype))
    params[f"{prefix}.bias"] = _param(np.zeros(fan_out, dtype=dtype))


def init_norm(params: Params, prefix: str, width: int, dtype=np.float32) -> None:
    params[f"{prefix}.gain"] = _param(np.ones(width, dtype=dtype))
    params[f"{prefix}.bias"] = _param(np.zeros(width, dtype=dtype))


def init_attention(params: Params, prefix: str, width: int, inner: int, rng, dtype=np.float32) -> None:
    for name in ("q", "k", "v"):
        init_linear(params, f"{prefix}.{name}", width, inner, rng, dtype)
    init_linear(params, f"{prefix}.out", inner, width, rng, dtype)


def init_mlp(params: Params, prefix: str, width: int, ratio: int, rng, dtype=np.float32) -> None:
    init_linear(params, f"{prefix}.fc1", width, ratio * width, rng, dtype)
    init_linear(params, f"{prefix}.fc2", ratio * width, width, rng, dtype)


def linear(x: Tensor, params: Params, prefix: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{prefix}.weight"]), params[f"{prefix}.bias"])


def norm(x: Tensor, params: Params, prefix: str) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def mlp(x: Tensor, params: Params, prefix: str) -> Tensor:
    return linear(T.gelu(linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, inner = x.shape
    x = T.reshape(x, (*lead, length, heads, inner // heads))
    nd = x.ndim
    return T.transpose(x, (*range(nd - 3), nd - 2, nd - 3, nd - 1))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dh = x.shape
    nd = x.ndim
    x = T.transpose(x, (*range(nd - 3), nd - 2, nd - 3, nd - 1))
    return T.reshape(x, (*lead, length, heads * dh))


def attention(query_in: Tensor, kv_in: Tensor, params: Params, prefix: str, heads: int,
              mask=None, return_weights: bool = False):
    """Multi-head scaled dot-product attention branch (no residual).

    ``query_in`` is ``[..., Lq, C]``, ``kv_in`` is ``[..., Lk, C]``. ``mask`` is a
    boolean ``[..., Lq, Lk]`` array (True = may attend), shared across heads.
    """
    q = linear(query_in, params, f"{prefix}.q")
    k = linear(kv_in, params, f"{prefix}.k")
    v = linear(kv_in, params, f"{prefix}.v")
    inner = q.shape[-1]
    if inner % heads:
        raise T.DimensionError(f"attention width {inner} not divisible by {heads} heads")
    q, k, v = (_split_heads(t, heads) for t in (q, k, v))
    nd = k.ndim
    scores = T.scale(T.matmul(q, T.transpose(k, (*range(nd - 2), nd - 1, nd - 2))),
                     1.0 / math.sqrt(inner // heads))
    if mask is not None:
        mask = np.asarray(mask)[..., None, :, :]
    weights = T.softmax_lastdim(scores, mask)
    out = linear(_merge_heads(T.matmul(weights, v)), params, f"{prefix}.out")
    if return_weights:
        return out, weights
    return out


def zero_output_projections(params: Params, prefixes: tuple[str, ...]) -> Params:
    """Copy of ``params`` with every residual-branch output projection zeroed.

    Affects ``*.out.*`` (attention) and ``*.fc2.*`` (MLP) under the given prefixes.
    """
    out = {}
    for name, t in params.items():
        if name.startswith(prefixes) and (".out." in name or ".fc2." in name):
            out[name] = Tensor(np.zeros_like(t.data), requires_grad=t.requires_grad)
        else:
            out[name] = t
    return out
