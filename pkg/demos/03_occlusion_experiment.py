#!/usr/bin/env python3
# Train the temporal model and the single-frame baseline on the occlusion
# benchmark and compare PCK on the hidden joints. A second test pass swaps the
# auxiliary frames for copies of the centre frame, which shows how much the
# temporal model actually reads from its neighbours.
#
# usage: python3 demos/03_occlusion_experiment.py [epochs] [seed]

# %%
import sys
import time

import numpy as np

from tarpose import model as M
from tarpose import synth
from tarpose import train as TR
from tarpose.backbone import BackboneConfig
from tarpose.fusion import FusionConfig
from tarpose.io import TrainConfig

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0

train_ds = synth.make_benchmark("occlusion", 64, 1, 100)
test_ds = synth.make_benchmark("occlusion", 32, 1, 200)
tc = TrainConfig(epochs=epochs, base_lr=1e-3, lr_decay_every=max(1, epochs // 3), augment=True,
                 supervise_occluded=True)

# %%
no_motion = [synth.PersonClip(np.stack([c.frames[1]] * 3), c.keypoints, 1) for c in test_ds.clips]
for variant in ("joint_specific", "single_frame"):
    cfg = M.ModelConfig(BackboneConfig(channels=32, depth=2), FusionConfig(jta_layers=2, temporal_span=1),
                        fusion_variant=variant)
    t0 = time.perf_counter()
    res = TR.train(cfg, train_ds, epochs, seed, tc)
    occ = TR.occluded_pck(res.params, cfg, test_ds, 0.1)
    allj = TR.evaluate(res.params, cfg, test_ds).mean[0.1]
    line = f"{variant:<15} occluded PCK@0.1 {occ:.3f}  visible PCK@0.1 {allj:.3f}  ({time.perf_counter() - t0:.0f}s)"
    if variant == "joint_specific":
        line += f"  [aux = centre frame: {TR.occluded_pck(res.params, cfg, no_motion, 0.1):.3f}]"
    print(line)
