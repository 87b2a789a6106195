"""Size arithmetic and parameter layout of the U-net builder.

The 2D network uses valid (unpadded) convolutions, so only certain input
sizes survive to the output; the builder exposes that arithmetic.  The 3D
network pads, so extents just need to divide the pooling granularity.
"""

import os
import tempfile

import numpy as np

from femseg.autodiff import Tensor
from femseg.model import (
    UNetConfig,
    admissible_below,
    build,
    forward,
    layer_shapes,
    load_checkpoint,
    save_checkpoint,
    valid_sizes,
)

# --- valid-size arithmetic --------------------------------------------------
# The classic 4-level valid U-net maps 572 -> 388.  For a target output
# size, valid_sizes() returns the smallest admissible (input, output).
print("levels=4, want >= 388 out:", valid_sizes(4, 388))
print("levels=1, want >=  16 out:", valid_sizes(1, 16))
print("levels=2, want >=   1 out:", valid_sizes(2, 1))

# Going the other way: the largest admissible pair that fits inside a
# fixed image extent (None when nothing fits).
for extent in (64, 44, 30, 17):
    print(f"largest valid pair fitting {extent}:", admissible_below(2, extent))

# --- parameter inventory ----------------------------------------------------
config = UNetConfig(rank=2, in_channels=3, classes=2, features=8, levels=2,
                    padding="valid")
shapes = layer_shapes(config)
total = sum(int(np.prod(s)) for s in shapes.values())
print(f"\n{config.rank}D net, F={config.features}, L={config.levels}: "
      f"{len(shapes)} tensors, {total} parameters")
for name, shape in list(shapes.items())[:6]:
    print(f"  {name:<24} {shape}")
print("  ...")

# Xavier kernels, constant 0.10 biases.
params = build(config, seed=42)
first_bias = next(name for name in params.names() if "bias" in name)
print("bias values:", np.unique(params[first_bias].values))

# --- a forward pass and a checkpoint round-trip -----------------------------
image = Tensor(np.random.default_rng(0).normal(size=(1, 44, 44, 3)))
probs = forward(params, config, image)
print("input (1, 44, 44, 3) ->", probs.shape, "(two softmax channels)")
print("probabilities sum to one:",
      np.allclose(probs.values.sum(axis=-1), 1.0))

with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "model.ckpt")
    save_checkpoint(path, config, params)
    config2, params2 = load_checkpoint(path)
    same = all(np.array_equal(params[n].values, params2[n].values)
               for n in params.names())
    print("checkpoint round-trip:", "bit-exact" if same else "MISMATCH",
          f"({os.path.getsize(path)} bytes)")
