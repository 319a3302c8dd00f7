#!/usr/bin/env python3
# Joint-specific masks, the plug-in property of the fusion block, and the
# analytical cost of the fusion variants.

# %%
import numpy as np

from tarpose import fusion as Fu
from tarpose import model as M
from tarpose import nn
from tarpose.backbone import BackboneConfig
from tarpose.fusion import FusionConfig

rng = np.random.default_rng(0)

# %% masks: a heatmap per (frame, joint) is max-pooled onto the token grid
maps = np.zeros((3, 2, 16, 12))
maps[0, 0, 5, 4] = 0.9   # joint 0 is confident in frame 0
maps[1, 0] = 0.05        # ... and nowhere in frame 1
maps[1, 0, 12, 2] = 0.1  # weak best guess
maps[:, 1] = rng.random((3, 16, 12)) * 0.4
mask = Fu.build_masks(maps, phi=0.2, grid=(4, 3))
print("joint 0, frame 0 tokens:\n", mask.frame_block(0)[0].reshape(4, 3).astype(int))
print("joint 0, frame 1 (fallback to argmax):\n", mask.frame_block(1)[0].reshape(4, 3).astype(int))
print("fallback fired:\n", mask.fallback)

# %% with zeroed output projections the temporal path reduces to the single-frame model
cfg = M.ModelConfig(BackboneConfig(), FusionConfig(jta_layers=2, temporal_span=1))
params = nn.zero_output_projections(M.init_params(cfg, 1), ("jta.", "gra."))
clip = rng.random((3, 3, 64, 48)).astype(np.float32)
same = M.forward(clip, params, cfg).data.tobytes() == M.forward_baseline(clip[1], params, cfg).data.tobytes()
print("zeroed fusion == single frame:", same)

# %% cost of the fusion stage at a ViT-B sized setting (5 frames, 432 tokens each)
big = M.vitb_scale_config()
for name, flops in sorted(M.flop_table(big).items(), key=lambda kv: kv[1]):
    print(f"{name:<20} {flops / 1e9:7.1f} GFLOPs")
