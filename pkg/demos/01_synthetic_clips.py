#!/usr/bin/env python3
# Walk through the synthetic benchmark: a skeleton, a clip, an occluder,
# ground-truth heatmaps and the augmentation. Writes images to ./demo_out/clips.

# %%
from pathlib import Path

import numpy as np

from tarpose import synth
from tarpose.io import export_heatmap_pgm, export_overlay_ppm, write_ppm

out = Path("demo_out/clips")
out.mkdir(parents=True, exist_ok=True)
spec = synth.SkeletonSpec()
print("joints:", ", ".join(spec.names))

# %% one occlusion clip: three frames, the middle one is the frame we predict
ds = synth.make_benchmark("occlusion", 4, 1, seed=0)
clip, hidden = ds.clips[0], ds.occluded_joint[0]
print("frames", clip.frames.shape, "keypoints", clip.keypoints.shape)
print(f"hidden joint: {spec.names[hidden]}")
for f in range(3):
    print(f"  frame {f}: visible={bool(clip.keypoints[f, hidden, 2])} at {clip.keypoints[f, hidden, :2].round(1)}")
    write_ppm(out / f"frame_{f}.ppm", clip.frames[f])

# %% ground truth lives at quarter resolution
maps = synth.gt_heatmaps(clip.current_keypoints, 64, 48)
print("heatmaps", maps.shape, "peak", maps.max())
export_heatmap_pgm(maps[0], out / "gt_nose.pgm")
# the hidden joint has no target in the centre frame
print("hidden joint map sum:", maps[hidden].sum())

# %% the same random transform is applied to every frame
aug = synth.sample_augmentation(np.random.default_rng(3), 64, 48)
moved = synth.apply_augmentation(clip, aug)
print(aug)
export_overlay_ppm(moved.frames[1], moved.current_keypoints, out / "augmented_overlay.ppm", parents=spec.parents)
export_overlay_ppm(clip.frames[1], clip.current_keypoints, out / "overlay.ppm", parents=spec.parents)

# %% the manifest hash pins the whole suite
print("manifest sha256:", ds.manifest_hash()[:16])
print("images in", out)
