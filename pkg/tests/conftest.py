import math

import numpy as np
import pytest

from tarpose.backbone import BackboneConfig
from tarpose.fusion import FusionConfig
from tarpose.model import ModelConfig


def ref_layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def ref_attention(xq, xkv, P, prefix, heads=1, mask=None):
    """Direct float64 formula for one attention branch; returns (output, weights)."""
    g = lambda n: np.asarray(P[f"{prefix}.{n}"].data, dtype=np.float64)  # noqa: E731
    q = xq @ g("q.weight") + g("q.bias")
    k = xkv @ g("k.weight") + g("k.bias")
    v = xkv @ g("v.weight") + g("v.bias")
    dh = q.shape[-1] // heads
    outs, weights = [], []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        if mask is not None:
            s = np.where(mask, s, -np.inf)
        s = s - s.max(-1, keepdims=True)
        w = np.exp(s)
        w = w / w.sum(-1, keepdims=True)
        weights.append(w)
        outs.append(w @ v[:, sl])
    return np.concatenate(outs, -1) @ g("out.weight") + g("out.bias"), np.stack(weights)


def to64(params):
    from tarpose.tensor import Tensor
    return {n: Tensor(np.asarray(p.data, dtype=np.float64), requires_grad=True) for n, p in params.items()}


@pytest.fixture
def tiny_cfg():
    """C=16, 32x32 input (2x2 tokens), N=3, T=1."""
    return ModelConfig(
        backbone=BackboneConfig(image_h=32, image_w=32, channels=16, depth=1, heads=2, n_joints=3,
                                decoder_mid_channels=8),
        fusion=FusionConfig(jta_layers=2, gra_layers=1, temporal_span=1, heads=2),
    )


@pytest.fixture
def desk_cfg():
    """The acceptance-scale tiny model: C=32, depth 2, two JTA layers, T=1, 64x48, N=15."""
    return ModelConfig(
        backbone=BackboneConfig(image_h=64, image_w=48, channels=32, depth=2, n_joints=15),
        fusion=FusionConfig(jta_layers=2, temporal_span=1),
    )


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
