"""Encoder-decoder segmentation networks over the autodiff core.

A network is described by a :class:`UNetConfig` and materialized as a
:class:`ModelParams` bundle of named tensors.  The 2D variant runs
valid-padded on slice triplets and shrinks spatially; the 3D variant runs
same-padded on whole slabs and preserves extents.  Layer paths are stable
strings (``enc0.conv1``, ``bottom.conv2``, ``dec1.upconv``, ``head``) with
``.kernel`` / ``.bias`` leaves, shared by the builder, the optimizer, and
the checkpoint format.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import (
    ConvSpec,
    ShapeError,
    Tensor,
    channel_softmax,
    conv,
    crop_concat,
    max_pool,
    relu,
    up_conv,
)

__all__ = [
    "UNetConfig",
    "ModelParams",
    "layer_shapes",
    "build",
    "forward",
    "output_size",
    "valid_sizes",
    "admissible_below",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"FSEGCKPT"

BIAS_INIT = 0.10


@dataclass(frozen=True)
class UNetConfig:
    """Architecture hyper-parameters.

    ``features`` is the first-level feature count (doubles per level down
    to the bottom); ``levels`` is the number of pooling steps.  Padding is
    tied to the rank: the 2D network is valid-padded, the 3D one
    same-padded, matching how each is applied (tiled patches vs whole
    slabs).
    """

    rank: int
    in_channels: int
    features: int
    levels: int
    padding: str
    classes: int = 2

    def __post_init__(self):
        if self.rank not in (2, 3):
            raise ValueError(f"rank must be 2 or 3, got {self.rank}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be positive, got {self.in_channels}")
        if self.features < 1:
            raise ValueError(f"features must be positive, got {self.features}")
        if self.levels < 1:
            raise ValueError(f"levels must be at least 1, got {self.levels}")
        if self.classes < 2:
            raise ValueError(f"classes must be at least 2, got {self.classes}")
        expected = "valid" if self.rank == 2 else "same"
        if self.padding != expected:
            raise ValueError(
                f"rank {self.rank} networks use {expected!r} padding, got {self.padding!r}"
            )


def layer_shapes(config: UNetConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Kernel/bias array shapes for every layer path, in build order."""
    r, f, ell = config.rank, config.features, config.levels
    k3, k2, k1 = (3,) * r, (2,) * r, (1,) * r
    shapes: "OrderedDict[str, tuple[int, ...]]" = OrderedDict()

    def block(path: str, kspatial, cin: int, cout: int) -> None:
        shapes[f"{path}.kernel"] = (*kspatial, cin, cout)
        shapes[f"{path}.bias"] = (cout,)

    for i in range(ell):
        cin = config.in_channels if i == 0 else f * 2 ** (i - 1)
        block(f"enc{i}.conv1", k3, cin, f * 2 ** i)
        block(f"enc{i}.conv2", k3, f * 2 ** i, f * 2 ** i)
    block("bottom.conv1", k3, f * 2 ** (ell - 1), f * 2 ** ell)
    block("bottom.conv2", k3, f * 2 ** ell, f * 2 ** ell)
    for i in reversed(range(ell)):
        block(f"dec{i}.upconv", k2, f * 2 ** (i + 1), f * 2 ** i)
        block(f"dec{i}.conv1", k3, f * 2 ** (i + 1), f * 2 ** i)
        block(f"dec{i}.conv2", k3, f * 2 ** i, f * 2 ** i)
    block("head", k1, f, config.classes)
    return shapes


class ModelParams:
    """Named parameter tensors in stable build order."""

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        """Overwrite parameter arrays in place (shapes must match)."""
        for name, t in self.tensors.items():
            src = values[name]
            if src.shape != t.shape:
                raise ShapeError(f"{name}: cannot load shape {src.shape} into {t.shape}")
            t.values[...] = src


def _validate_params(config: UNetConfig, params: ModelParams) -> None:
    expected = layer_shapes(config)
    have = set(params.tensors)
    missing = sorted(set(expected) - have)
    extra = sorted(have - set(expected))
    if missing or extra:
        raise ValueError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")


def build(config: UNetConfig, seed: int, dtype=np.float64) -> ModelParams:
    """Initialize parameters: Xavier-uniform kernels, all biases at 0.10.

    Xavier bounds are +/- sqrt(6 / (fan_in + fan_out)) with fans counted as
    channel count times kernel taps.  Draws happen in a fixed layer order
    from one seeded generator, so a seed fully determines the weights.
    """
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TypeError(f"dtype must be float32 or float64, got {dtype}")
    rng = np.random.default_rng(seed)
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in layer_shapes(config).items():
        if name.endswith(".bias"):
            arr = np.full(shape, BIAS_INIT, dtype=dtype)
        else:
            taps = int(np.prod(shape[:-2]))
            fan_in, fan_out = taps * shape[-2], taps * shape[-1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-bound, bound, size=shape).astype(dtype)
        tensors[name] = Tensor(arr, requires_grad=True)
    return ModelParams(tensors)


def output_size(levels: int, input_extent: int) -> int:
    """Spatial output extent of the valid-padded network on one axis.

    Raises :class:`ShapeError` if the extent is inadmissible (an encoder
    stage would see an odd or vanishing extent, or a conv would underflow).
    """
    s = input_extent
    for i in range(levels):
        s -= 4
        if s < 2:
            raise ShapeError(f"extent {input_extent}: encoder level {i} underflows")
        if s % 2:
            raise ShapeError(f"extent {input_extent}: encoder level {i} sees odd extent {s}")
        s //= 2
    s -= 4
    if s < 1:
        raise ShapeError(f"extent {input_extent}: bottom block underflows")
    for _ in range(levels):
        s = 2 * s - 4
        if s < 1:
            raise ShapeError(f"extent {input_extent}: decoder underflows")
    return s


def valid_sizes(levels: int, target_output: int) -> tuple[int, int]:
    """Smallest admissible (input, output) pair with output >= target."""
    if target_output < 1:
        raise ValueError(f"target output must be positive, got {target_output}")
    candidate = target_output + 1
    while True:
        try:
            out = output_size(levels, candidate)
        except ShapeError:
            candidate += 1
            continue
        if out >= target_output:
            return candidate, out
        candidate += 1


def admissible_below(levels: int, extent: int) -> tuple[int, int] | None:
    """Largest admissible (input, output) pair with input <= extent, if any."""
    candidate = extent
    while candidate > 0:
        try:
            return candidate, output_size(levels, candidate)
        except ShapeError:
            candidate -= 1
    return None


def _check_input_shape(config: UNetConfig, x: Tensor) -> None:
    if x.ndim != config.rank + 2:
        raise ShapeError(
            f"rank {config.rank} network expects {config.rank + 2}-d input "
            f"(batch, spatial..., channels), got shape {x.shape}"
        )
    if x.shape[-1] != config.in_channels:
        raise ShapeError(f"network expects {config.in_channels} input channels, "
                         f"got {x.shape[-1]}")
    spatial = x.shape[1:-1]
    if config.padding == "valid":
        for axis, extent in enumerate(spatial):
            try:
                output_size(config.levels, extent)
            except ShapeError as err:
                below = admissible_below(config.levels, extent - 1)
                hint = f"next above: input {valid_input_above(config.levels, extent)}"
                lo = f"largest below: input {below[0]}" if below else "none below"
                raise ShapeError(
                    f"axis {axis} extent {extent} is not admissible at "
                    f"levels={config.levels} ({err}); {lo}; {hint}"
                ) from None
    else:
        step = 2 ** config.levels
        for axis, extent in enumerate(spatial):
            if extent % step:
                padded = ((extent + step - 1) // step) * step
                raise ShapeError(
                    f"axis {axis} extent {extent} is not divisible by {step}; "
                    f"pad to {padded}"
                )


def valid_input_above(levels: int, extent: int) -> int:
    """Smallest admissible input extent >= the given extent."""
    candidate = max(extent, 1)
    while True:
        try:
            output_size(levels, candidate)
            return candidate
        except ShapeError:
            candidate += 1


def forward(params: ModelParams, config: UNetConfig, x: Tensor) -> Tensor:
    """Class probabilities for a batch; channels hold the class axis.

    Encoder blocks are two relu-followed 3-convs with pooling between;
    the decoder mirrors them with up-convs and skip concatenations
    (encoder features first), and a 1x1 head feeds the softmax.  Up-convs
    and the head carry no relu.
    """
    _validate_params(config, params)
    if x.dtype != params.dtype:
        raise TypeError(f"input dtype {x.dtype} != parameter dtype {params.dtype}")
    _check_input_shape(config, x)
    spec3 = ConvSpec(config.rank, 3, 1, config.padding)
    spec2 = ConvSpec(config.rank, 2, 2)
    spec1 = ConvSpec(config.rank, 1, 1)

    def block(h: Tensor, path: str) -> Tensor:
        h = relu(conv(h, params[f"{path}.conv1.kernel"], params[f"{path}.conv1.bias"], spec3))
        return relu(conv(h, params[f"{path}.conv2.kernel"], params[f"{path}.conv2.bias"], spec3))

    skips = []
    h = x
    for i in range(config.levels):
        h = block(h, f"enc{i}")
        skips.append(h)
        h = max_pool(h, spec2)
    h = block(h, "bottom")
    for i in reversed(range(config.levels)):
        h = up_conv(h, params[f"dec{i}.upconv.kernel"], spec2,
                    bias=params[f"dec{i}.upconv.bias"])
        h = crop_concat(skips[i], h)
        h = block(h, f"dec{i}")
    logits = conv(h, params["head.kernel"], params["head.bias"], spec1)
    return channel_softmax(logits)


def save_checkpoint(path, config: UNetConfig, params: ModelParams) -> None:
    """Write a self-describing checkpoint: magic, JSON header, raw arrays.

    Arrays are stored little-endian in build order; the header records the
    config and each array's name, dtype, and shape, so a reader needs no
    out-of-band knowledge.
    """
    _validate_params(config, params)
    entries = [{"name": name, "dtype": t.values.dtype.newbyteorder("<").str,
                "shape": list(t.shape)} for name, t in params.items()]
    header = {"format": 1, "config": asdict(config), "arrays": entries}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for _, t in params.items():
            fh.write(np.ascontiguousarray(t.values.astype(t.values.dtype.newbyteorder("<"),
                                                          copy=False)).tobytes())


def load_checkpoint(path) -> tuple[UNetConfig, ModelParams]:
    """Read a checkpoint; values round-trip exactly."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        header_line = fh.readline()
        if not header_line.endswith(b"\n"):
            raise ValueError("truncated checkpoint: unterminated header")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as err:
            raise ValueError(f"corrupt checkpoint header: {err}") from None
        if header.get("format") != 1:
            raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
        config = UNetConfig(**header["config"])
        tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
            buf = fh.read(nbytes)
            if len(buf) != nbytes:
                raise ValueError(f"truncated checkpoint: array {entry['name']!r} "
                                 f"has {len(buf)} of {nbytes} bytes")
            arr = np.frombuffer(buf, dtype=dtype).reshape(shape)
            tensors[entry["name"]] = Tensor(arr.astype(dtype.newbyteorder("=")),
                                            requires_grad=True)
        if fh.read(1):
            raise ValueError("corrupt checkpoint: trailing bytes after arrays")
    params = ModelParams(tensors)
    _validate_params(config, params)
    return config, params
