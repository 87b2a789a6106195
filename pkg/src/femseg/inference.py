"""Full-image prediction: mirroring, 9-patch tiling, thresholding, cleanup.

The 2D network sees valid-padded patches, so full-image maps come from
mirror-extrapolating each slice triplet and averaging a 3-starts-per-axis
grid of overlapping patches by coverage count.  The 3D network is
same-padded and predicts a whole volume in one pass (zero-padding to the
pooling granularity when needed).  Binary masks follow by strict
thresholding, optionally keeping only the largest 26-connected component.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from math import ceil

import numpy as np
from scipy import ndimage

from .autodiff import Tensor
from .data import MaskVolume, Volume
from .model import ModelParams, UNetConfig, forward, valid_sizes


def _normalize_margins(image: np.ndarray, margins) -> list[tuple[int, int]]:
    if len(margins) != image.ndim:
        raise ValueError(f"{len(margins)} margin entries for a {image.ndim}-d image")
    pairs = []
    for axis, m in enumerate(margins):
        left, right = (m, m) if np.isscalar(m) else m
        left, right = int(left), int(right)
        if left < 0 or right < 0:
            raise ValueError(f"axis {axis}: negative margin {(left, right)}")
        if max(left, right) >= image.shape[axis]:
            raise ValueError(f"axis {axis}: margin {max(left, right)} must be smaller "
                             f"than the extent {image.shape[axis]}")
        pairs.append((left, right))
    return pairs


def mirror_pad(image: np.ndarray, margins) -> np.ndarray:
    """Reflect ``image`` beyond its borders without duplicating the border.

    ``margins`` holds one entry per axis: an int for symmetric padding or a
    (left, right) pair.  A row (a, b, c) padded by 2 on the left becomes
    (c, b, a, b, c).  Margins must stay below the axis extent.
    """
    image = np.asarray(image)
    return np.pad(image, _normalize_margins(image, margins), mode="reflect")


@dataclass(frozen=True)
class TilingPlan:
    """Where overlapping patches go and how often each voxel is covered.

    Starts index the mirror-padded image; a patch starting at ``a`` on axis
    ``i`` predicts original voxels ``[a, a + output)`` of that axis (clipped
    to the image).  ``counts`` is the per-voxel number of covering patches
    on the original grid.
    """

    image_extents: tuple
    input_extents: tuple
    output_extents: tuple
    starts: tuple
    pads: tuple
    counts: np.ndarray

    def tiles(self):
        """All start-coordinate combinations, row-major."""
        grids = np.meshgrid(*[np.asarray(s) for s in self.starts], indexing="ij")
        return [tuple(int(g[idx]) for g in grids)
                for idx in np.ndindex(*(len(s) for s in self.starts))]


def plan_tiles(image_extents, input_extents, output_extents) -> TilingPlan:
    """Three starts per axis — leading, centered, trailing — over the padding.

    Starts 0, (padded − input)//2 and padded − input tile the mirror-padded
    image; equal starts collapse, so an axis whose output already spans the
    image contributes a single tile.  An output larger than the image gives
    the degenerate single-tile plan padded out to one full input window.
    """
    image_extents = tuple(int(e) for e in image_extents)
    input_extents = tuple(int(e) for e in input_extents)
    output_extents = tuple(int(e) for e in output_extents)
    if not len(image_extents) == len(input_extents) == len(output_extents):
        raise ValueError("extent tuples must share one length")
    starts, pads, axis_counts = [], [], []
    for axis, (img, n_in, n_out) in enumerate(
            zip(image_extents, input_extents, output_extents)):
        if min(img, n_in, n_out) < 1:
            raise ValueError(f"axis {axis}: extents must be positive")
        if n_in < n_out or (n_in - n_out) % 2:
            raise ValueError(f"axis {axis}: input {n_in} and output {n_out} must "
                             f"differ by a non-negative even margin")
        margin = (n_in - n_out) // 2
        if n_out >= img:
            axis_starts = (0,)
            pads.append((margin, n_in - img - margin))
        else:
            if 3 * n_out < img:
                raise ValueError(f"axis {axis}: image extent {img} cannot be covered "
                                 f"by 3 windows of output {n_out}")
            padded = img + 2 * margin
            axis_starts = tuple(sorted({0, (padded - n_in) // 2, padded - n_in}))
            pads.append((margin, margin))
        starts.append(axis_starts)
        count = np.zeros(img, dtype=np.int64)
        for a in axis_starts:
            count[a:min(a + n_out, img)] += 1
        axis_counts.append(count)
    counts = reduce(np.multiply.outer, axis_counts)
    if counts.min() < 1:
        raise AssertionError("tiling left uncovered voxels")  # unreachable by construction
    return TilingPlan(image_extents=image_extents, input_extents=input_extents,
                      output_extents=output_extents, starts=tuple(starts),
                      pads=tuple(pads), counts=counts)


def _patch_sizes(levels: int, extent: int) -> tuple[int, int]:
    """Smallest valid (input, output) whose three-start tiling covers ``extent``."""
    return valid_sizes(levels, ceil(extent / 3))


def predict_2d(params: ModelParams, config: UNetConfig, volume: Volume) -> Volume:
    """Probability map from the 2D network, slice by slice.

    Each slice's triplet is mirror-extrapolated, divided into the 9-patch
    grid of :func:`plan_tiles`, and the per-patch probabilities are summed
    and divided by the coverage count.  The map shares the volume's grid.
    """
    from .data import slice_triplets

    if config.rank != 2:
        raise ValueError(f"predict_2d requires a rank-2 model, got rank {config.rank}")
    nz, ny, nx = volume.values.shape
    if nz < 3:
        raise ValueError(f"the 2D pipeline needs at least 3 slices, got {nz}")
    in_y, out_y = _patch_sizes(config.levels, ny)
    in_x, out_x = _patch_sizes(config.levels, nx)
    plan = plan_tiles((ny, nx), (in_y, in_x), (out_y, out_x))
    dtype = params.dtype
    out = np.zeros((nz, ny, nx), dtype=dtype)
    for s in range(nz):
        triplet = slice_triplets(volume, s).astype(dtype)
        padded = np.pad(triplet, [*plan.pads, (0, 0)], mode="reflect")
        tiles = plan.tiles()
        batch = np.stack([padded[ay:ay + in_y, ax:ax + in_x, :] for ay, ax in tiles])
        probs = forward(params, config, Tensor(np.ascontiguousarray(batch))).values[..., 1]
        for (ay, ax), p in zip(tiles, probs):
            ey, ex = min(ay + out_y, ny), min(ax + out_x, nx)
            out[s, ay:ey, ax:ex] += p[:ey - ay, :ex - ax]
    out /= plan.counts
    return Volume(out, volume.spacing, kind="map")


def predict_3d(params: ModelParams, config: UNetConfig, volume: Volume) -> Volume:
    """Probability map from the 3D network in a single padded forward pass.

    Extents not divisible by the pooling granularity are zero-padded at the
    trailing edge and the map is cropped back to the original grid.
    """
    if config.rank != 3:
        raise ValueError(f"predict_3d requires a rank-3 model, got rank {config.rank}")
    shape = volume.values.shape
    step = 2 ** config.levels
    pad = [(0, (-extent) % step) for extent in shape]
    values = volume.values.astype(params.dtype)
    if any(right for _, right in pad):
        values = np.pad(values, pad, mode="constant")
    prob = forward(params, config, Tensor(values[None, ..., None])).values[0, ..., 1]
    prob = prob[:shape[0], :shape[1], :shape[2]]
    return Volume(np.ascontiguousarray(prob), volume.spacing, kind="map")


def predict(params: ModelParams, config: UNetConfig, volume: Volume) -> Volume:
    """Rank-appropriate full-volume prediction."""
    if config.rank == 2:
        return predict_2d(params, config, volume)
    return predict_3d(params, config, volume)


def binarize(prob: Volume, threshold: float) -> MaskVolume:
    """Mask of voxels strictly above the threshold."""
    threshold = float(threshold)
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    if not isinstance(prob, Volume):
        raise TypeError(f"binarize expects a probability Volume, got {type(prob).__name__}")
    return MaskVolume((prob.values > threshold).astype(np.uint8), prob.spacing)


def largest_component(mask: MaskVolume) -> MaskVolume:
    """Keep only the largest 26-connected foreground component.

    Equal-size largest components tie-break toward the smallest label id,
    i.e. the component encountered first in scan order.  An empty mask is
    returned unchanged.
    """
    labels, count = ndimage.label(mask.values, structure=np.ones((3, 3, 3), dtype=bool))
    if count == 0:
        return mask
    sizes = np.bincount(labels.ravel())[1:]
    winner = int(np.argmax(sizes)) + 1
    return MaskVolume((labels == winner).astype(np.uint8), mask.spacing)
