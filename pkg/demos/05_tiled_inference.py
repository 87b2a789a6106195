"""Whole-image prediction: mirror padding, 9-patch tiling, post-processing.

A valid-convolution network shrinks its input, so one forward pass cannot
label a full slice.  Inference mirrors the image outward, slides three
window starts per axis (9 patches per slice), and averages probabilities
where the windows overlap.  Same-padded 3D networks skip all of this and
predict the whole volume in one pass.
"""

import numpy as np

from femseg.data import generate_phantom
from femseg.inference import (
    binarize,
    largest_component,
    mirror_pad,
    plan_tiles,
    predict,
)
from femseg.model import UNetConfig, build, valid_sizes

# --- mirror padding, small enough to eyeball ---------------------------------
row = np.array([[1.0, 2.0, 3.0, 4.0]])
print("mirror_pad([[1 2 3 4]], margin 2 on x):")
print(" ", mirror_pad(row, ((0, 0), (2, 2)))[0])

# --- the 9-patch plan --------------------------------------------------------
# A 64x64 slice with an L=2 valid network: the smallest admissible window
# whose output covers a third of the image.
n_in, n_out = valid_sizes(2, 22)
plan = plan_tiles((64, 64), (n_in, n_out), (n_out, n_out))
print(f"\nslice 64x64, window {n_in} -> {n_out}:")
print(f"  starts per axis: {plan.starts}")
print(f"  patches: {len(plan.tiles())}")
print(f"  coverage counts: min {plan.counts.min()}, max {plan.counts.max()}")
covered = int((plan.counts >= 1).sum())
print(f"  voxels covered: {covered} of {plan.counts.size}")

# --- end to end on a phantom -------------------------------------------------
image, mask, _ = generate_phantom(seed=77, extents_xyz=(48, 48, 8))

config_2d = UNetConfig(rank=2, in_channels=3, features=2, levels=1,
                       padding="valid")
params_2d = build(config_2d, seed=3)
prob_2d = predict(params_2d, config_2d, image)
print(f"\n2D tiled prediction: {prob_2d.values.shape}, "
      f"range [{prob_2d.values.min():.3f}, {prob_2d.values.max():.3f}]")

config_3d = UNetConfig(rank=3, in_channels=1, features=2, levels=1,
                       padding="same")
params_3d = build(config_3d, seed=3)
prob_3d = predict(params_3d, config_3d, image)
print(f"3D single-pass prediction: {prob_3d.values.shape} "
      f"(extents preserved: {prob_3d.values.shape == image.values.shape})")

# --- thresholding and largest-component cleanup ------------------------------
# An untrained network outputs a smooth bias; thresholding at its median
# keeps half the volume.  The toy case below shows the actual cleanup rule.
level = float(np.median(prob_3d.values))
raw = binarize(prob_3d, level)
cleaned = largest_component(raw)
print(f"\nbinarized at the median ({level:.3f}): "
      f"{int(raw.values.sum())} foreground voxels")
print(f"largest component kept: {int(cleaned.values.sum())}")

# A hand-built two-cluster mask makes the rule obvious.
toy = np.zeros((4, 8, 8), dtype=np.uint8)
toy[1, 1:4, 1:4] = 1          # 3x3 block on one slice: 9 voxels
toy[2, 6, 6] = 1              # lone voxel
from femseg.data import MaskVolume
toy_mask = MaskVolume(values=toy, spacing=(1.0, 1.0, 1.0))
kept = largest_component(toy_mask)
print(f"toy mask: clusters of 9 and 1 -> kept {int(kept.values.sum())} voxels")
