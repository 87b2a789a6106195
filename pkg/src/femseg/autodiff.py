"""Reverse-mode automatic differentiation over n-d numpy arrays.

Arrays are laid out batch-major with spatial axes next and channels last:
``(B, y, x, C)`` at rank 2 and ``(B, z, y, x, C)`` at rank 3.  Spatial axes
follow the volume convention (z, y, x).  Every op validates its operands,
computes the forward value eagerly, and registers a pullback per
differentiable input on the active :class:`Tape`.  :func:`backward` replays
the records in exact reverse order and returns one gradient per watched
leaf; leaves with no path to the loss get zeros.

Convolutions run as im2col + one BLAS matmul.  The channels-last layout is
deliberate: on a single core the im2col copy and the resulting GEMM shapes
are severalfold faster than the channels-first equivalent at the feature
counts used here.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "ConvSpec",
    "active_tape",
    "record",
    "backward",
    "conv",
    "max_pool",
    "up_conv",
    "relu",
    "channel_softmax",
    "crop_concat",
    "take_channel",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """An operand's shape violates an op's contract."""


class Tensor:
    """A numpy array plus a gradient-tracking flag.

    The wrapped array's shape is fixed for the tensor's lifetime.  Values
    may be updated in place between tapes (the optimizer does), but not
    while a tape recorded against this tensor is still awaiting backward.
    """

    __slots__ = ("values", "requires_grad", "uid")
    _uids = itertools.count()

    def __init__(self, values, requires_grad: bool = False):
        values = np.asarray(values)
        if values.dtype not in _FLOAT_DTYPES:
            raise TypeError(f"Tensor requires float32/float64 values, got {values.dtype}")
        self.values = values
        self.requires_grad = bool(requires_grad)
        self.uid = next(Tensor._uids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable ops, used as a context manager.

    Only the innermost active tape records.  A tape watches every leaf
    tensor (one not produced by an op recorded on it) that requires
    gradients, so :func:`backward` can hand back zeros for parameters that
    never reached the loss.
    """

    def __init__(self):
        self._records: list[tuple[int, list[tuple[Tensor, Callable]]]] = []
        self._watched: dict[int, Tensor] = {}
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        if popped is not self:
            raise RuntimeError("Tape context exits out of order")
        return False


def active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def record(out: Tensor, pulls: list[tuple[Tensor, Callable]]) -> None:
    """Register ``out``'s pullbacks on the active tape, if any.

    Each pull is ``(input_tensor, vjp)`` where ``vjp`` maps the output
    cotangent to that input's cotangent.  Pulls for inputs that do not
    require gradients are dropped here so ops need not special-case them.
    """
    tape = active_tape()
    if tape is None or not out.requires_grad:
        return
    kept = []
    for t, vjp in pulls:
        if not t.requires_grad:
            continue
        if t.uid not in tape._produced:
            tape._watched.setdefault(t.uid, t)
        kept.append((t, vjp))
    tape._records.append((out.uid, kept))
    tape._produced.add(out.uid)


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every leaf watched by the tape.

    Walks the records in exact reverse creation order.  Repeated calls
    recompute from scratch; nothing accumulates across calls.
    """
    if loss.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.uid: np.ones((), dtype=loss.dtype)}
    for out_uid, pulls in reversed(tape._records):
        g = grads.pop(out_uid, None)
        if g is None:
            continue
        for t, vjp in pulls:
            contrib = vjp(g)
            held = grads.get(t.uid)
            grads[t.uid] = contrib if held is None else held + contrib
    result: dict[Tensor, np.ndarray] = {}
    for uid, t in tape._watched.items():
        g = grads.get(uid)
        result[t] = np.zeros_like(t.values) if g is None else g
    return result


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a sliding-window op.

    ``kernel`` is the window extent on every spatial axis: 3 for the block
    convolutions, 1 for the channel-mixing head, 2 for pool/up-conv.  The
    stride is tied to the kernel (2-kernels stride 2, others stride 1).
    ``padding`` is "valid" or "same"; same-padding pads with zeros.
    """

    rank: int
    kernel: int
    stride: int
    padding: str = "valid"

    def __post_init__(self):
        if self.rank not in (2, 3):
            raise ValueError(f"rank must be 2 or 3, got {self.rank}")
        if self.kernel not in (1, 2, 3):
            raise ValueError(f"kernel extent must be 1, 2, or 3, got {self.kernel}")
        expected = 2 if self.kernel == 2 else 1
        if self.stride != expected:
            raise ValueError(
                f"kernel {self.kernel} requires stride {expected}, got {self.stride}"
            )
        if self.padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {self.padding!r}")


def _require_finite(name: str, a: np.ndarray) -> None:
    # min/max propagate NaN and expose infinities without a temporary bool array.
    if a.size and not (np.isfinite(a.min()) and np.isfinite(a.max())):
        raise ValueError(f"{name} contains non-finite values")


def _check_operand_dtypes(op: str, *tensors: Tensor) -> np.dtype:
    dtypes = {t.dtype for t in tensors if t is not None}
    if len(dtypes) != 1:
        raise TypeError(f"{op} operands must share one dtype, got {sorted(map(str, dtypes))}")
    return tensors[0].dtype


def _spatial(shape: tuple[int, ...]) -> tuple[int, ...]:
    return shape[1:-1]


def _im2col(padded: np.ndarray, k: int, rank: int) -> tuple[np.ndarray, tuple[int, ...]]:
    """Flatten every kxk(xk) window into a row: (B*P, k**rank * C).

    Row entries are ordered window-offset-major, channels last, matching a
    kernel of shape (k, ..., C_in, C_out) raveled row-major.
    """
    chans = padded.shape[-1]
    if k == 1:
        return padded.reshape(-1, chans), padded.shape[1:-1]
    win = np.lib.stride_tricks.sliding_window_view(
        padded, (k,) * rank, axis=tuple(range(1, rank + 1))
    )
    # win axes: (B, out..., C, win...) -> (B, out..., win..., C)
    order = (0, *range(1, rank + 1), *range(rank + 2, 2 * rank + 2), rank + 1)
    t = win.transpose(order)
    out_spatial = t.shape[1:rank + 1]
    cols = t.reshape(-1, (k ** rank) * chans)
    return cols, out_spatial


def conv(x: Tensor, kernel: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Cross-correlation of x (B, spatial..., C_in) with kernel (k..., C_in, C_out).

    Valid mode shrinks each spatial extent by k - 1; same mode zero-pads to
    preserve it.  Deterministic: im2col plus one GEMM, no atomics.
    """
    rank, k = spec.rank, spec.kernel
    if k == 2:
        raise ValueError("conv is for stride-1 kernels; use max_pool/up_conv for 2-kernels")
    dtype = _check_operand_dtypes("conv", x, kernel, bias)
    if x.ndim != rank + 2:
        raise ShapeError(f"conv rank {rank} expects {rank + 2}-d input, got shape {x.shape}")
    if kernel.shape[:rank] != (k,) * rank:
        raise ShapeError(f"kernel spatial extents {kernel.shape[:rank]} != {(k,) * rank}")
    cin, cout = kernel.shape[rank], kernel.shape[rank + 1]
    if x.shape[-1] != cin:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernel expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    pad = (k - 1) // 2 if spec.padding == "same" else 0
    if spec.padding == "valid":
        for axis, extent in enumerate(_spatial(x.shape)):
            if extent < k:
                raise ShapeError(
                    f"spatial axis {axis} extent {extent} is smaller than kernel {k}"
                )
    _require_finite("conv input", x.values)
    _require_finite("conv kernel", kernel.values)
    if bias is not None:
        _require_finite("conv bias", bias.values)

    xv = x.values
    if pad:
        widths = [(0, 0), *([(pad, pad)] * rank), (0, 0)]
        xv = np.pad(xv, widths)
    cols, out_spatial = _im2col(xv, k, rank)
    y2 = cols @ kernel.values.reshape(-1, cout)
    if bias is not None:
        y2 += bias.values
    batch = x.shape[0]
    out = Tensor(
        y2.reshape(batch, *out_spatial, cout),
        requires_grad=x.requires_grad or kernel.requires_grad
        or (bias is not None and bias.requires_grad),
    )

    def pull_kernel(g: np.ndarray) -> np.ndarray:
        return (cols.T @ g.reshape(-1, cout)).reshape(kernel.shape)

    def pull_bias(g: np.ndarray) -> np.ndarray:
        return g.reshape(-1, cout).sum(axis=0)

    def pull_x(g: np.ndarray) -> np.ndarray:
        # Full correlation of the cotangent with the spatially flipped,
        # channel-transposed kernel undoes the forward geometry.
        q = k - 1 - pad
        if q:
            g = np.pad(g, [(0, 0), *([(q, q)] * rank), (0, 0)])
        gcols, _ = _im2col(g, k, rank)
        wf = np.flip(kernel.values, axis=tuple(range(rank))).swapaxes(-1, -2)
        return (gcols @ wf.reshape(-1, cin)).reshape(x.shape)

    pulls = [(kernel, pull_kernel), (x, pull_x)]
    if bias is not None:
        pulls.append((bias, pull_bias))
    record(out, pulls)
    return out


def max_pool(x: Tensor, spec: ConvSpec) -> Tensor:
    """2x down-sampling by window maximum; ties go to the first window
    offset in row-major (z, y, x) order.  Odd spatial extents are rejected."""
    rank = spec.rank
    if spec.kernel != 2:
        raise ValueError("max_pool requires a 2-kernel spec")
    if x.ndim != rank + 2:
        raise ShapeError(f"max_pool rank {rank} expects {rank + 2}-d input, got {x.shape}")
    spatial = _spatial(x.shape)
    for axis, extent in enumerate(spatial):
        if extent % 2:
            raise ShapeError(f"spatial axis {axis} extent {extent} is odd; pooling needs even")
    batch, chans = x.shape[0], x.shape[-1]
    half = tuple(d // 2 for d in spatial)
    split = (batch, *itertools.chain.from_iterable((d, 2) for d in half), chans)
    order = (0, *range(1, 2 * rank, 2), 2 * rank + 1, *range(2, 2 * rank + 1, 2))
    windows = x.values.reshape(split).transpose(order).reshape(batch, *half, chans, 2 ** rank)

    if not (x.requires_grad and active_tape() is not None):
        return Tensor(windows.max(axis=-1), requires_grad=x.requires_grad)

    idx = windows.argmax(axis=-1)
    out_vals = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    out = Tensor(out_vals, requires_grad=True)

    def pull_x(g: np.ndarray) -> np.ndarray:
        buf = np.zeros(windows.shape, dtype=g.dtype)
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        transposed_shape = tuple(split[i] for i in order)
        return buf.reshape(transposed_shape).transpose(np.argsort(order)).reshape(x.shape)

    record(out, [(x, pull_x)])
    return out


def up_conv(x: Tensor, kernel: Tensor, spec: ConvSpec, bias: Tensor | None = None) -> Tensor:
    """Transposed 2-kernel stride-2 convolution: doubles every spatial extent.

    Each input voxel paints a disjoint 2x2(x2) output block with
    value * kernel, so a 1x1(x1) input with kernel (a, b, c, d) yields the
    2x2 block (a, b; c, d) scaled by the input.
    """
    rank = spec.rank
    if spec.kernel != 2 or spec.stride != 2:
        raise ValueError("up_conv requires a 2-kernel stride-2 spec")
    dtype = _check_operand_dtypes("up_conv", x, kernel, bias)
    if x.ndim != rank + 2:
        raise ShapeError(f"up_conv rank {rank} expects {rank + 2}-d input, got {x.shape}")
    if kernel.shape[:rank] != (2,) * rank:
        raise ShapeError(f"kernel spatial extents {kernel.shape[:rank]} != {(2,) * rank}")
    cin, cout = kernel.shape[rank], kernel.shape[rank + 1]
    if x.shape[-1] != cin:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernel expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    _require_finite("up_conv input", x.values)
    _require_finite("up_conv kernel", kernel.values)

    batch, spatial = x.shape[0], _spatial(x.shape)
    t = np.tensordot(x.values, kernel.values, axes=([x.ndim - 1], [rank]))
    # t axes: (B, s..., win..., C_out) -> interleave windows into space.
    order = (0, *itertools.chain.from_iterable((1 + i, 1 + rank + i) for i in range(rank)),
             1 + 2 * rank)
    y = t.transpose(order).reshape(batch, *(2 * d for d in spatial), cout)
    if bias is not None:
        y = y + bias.values
    out = Tensor(
        y,
        requires_grad=x.requires_grad or kernel.requires_grad
        or (bias is not None and bias.requires_grad),
    )

    def windowed(g: np.ndarray) -> np.ndarray:
        # (B, 2s..., C_out) -> (B, s..., 2..., C_out)
        split = (batch, *itertools.chain.from_iterable((d, 2) for d in spatial), cout)
        order2 = (0, *range(1, 2 * rank, 2), *range(2, 2 * rank + 1, 2), 2 * rank + 1)
        return g.reshape(split).transpose(order2)

    def pull_x(g: np.ndarray) -> np.ndarray:
        gw = windowed(g)
        win_axes = list(range(rank + 1, 2 * rank + 1))
        return np.tensordot(gw, kernel.values,
                            axes=(win_axes + [2 * rank + 1], list(range(rank)) + [rank + 1]))

    def pull_kernel(g: np.ndarray) -> np.ndarray:
        gw = windowed(g)
        lead = list(range(rank + 1))
        res = np.tensordot(x.values, gw, axes=(lead, lead))  # (C_in, 2..., C_out)
        return np.moveaxis(res, 0, rank)

    def pull_bias(g: np.ndarray) -> np.ndarray:
        return g.reshape(-1, cout).sum(axis=0)

    pulls = [(x, pull_x), (kernel, pull_kernel)]
    if bias is not None:
        pulls.append((bias, pull_bias))
    record(out, pulls)
    return out


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); the subgradient at exactly 0 is taken as 0."""
    out = Tensor(np.maximum(x.values, 0), requires_grad=x.requires_grad)

    def pull_x(g: np.ndarray) -> np.ndarray:
        return g * (x.values > 0)

    record(out, [(x, pull_x)])
    return out


def channel_softmax(x: Tensor) -> Tensor:
    """Softmax over the channel axis, stabilized by the per-voxel max."""
    v = x.values
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, requires_grad=x.requires_grad)

    def pull_x(g: np.ndarray) -> np.ndarray:
        gp = g * p
        return gp - p * gp.sum(axis=-1, keepdims=True)

    record(out, [(x, pull_x)])
    return out


def crop_concat(enc: Tensor, dec: Tensor) -> Tensor:
    """Center-crop ``enc`` spatially to ``dec`` and concatenate channels.

    Encoder channels come first in the output.  Extent differences must be
    non-negative and even so the crop is symmetric; equal extents reduce to
    a plain concatenation.
    """
    _check_operand_dtypes("crop_concat", enc, dec)
    if enc.ndim != dec.ndim:
        raise ShapeError(f"rank mismatch: {enc.shape} vs {dec.shape}")
    if enc.shape[0] != dec.shape[0]:
        raise ShapeError(f"batch mismatch: {enc.shape[0]} vs {dec.shape[0]}")
    enc_sp, dec_sp = _spatial(enc.shape), _spatial(dec.shape)
    starts = []
    for axis, (e, d) in enumerate(zip(enc_sp, dec_sp)):
        diff = e - d
        if diff < 0:
            raise ShapeError(f"spatial axis {axis}: encoder extent {e} < decoder extent {d}")
        if diff % 2:
            raise ShapeError(f"spatial axis {axis}: extent difference {diff} is odd")
        starts.append(diff // 2)
    window = (slice(None), *(slice(s, s + d) for s, d in zip(starts, dec_sp)), slice(None))
    cropped = enc.values[window]
    out = Tensor(
        np.concatenate([cropped, dec.values], axis=-1),
        requires_grad=enc.requires_grad or dec.requires_grad,
    )
    enc_chans = enc.shape[-1]

    def pull_enc(g: np.ndarray) -> np.ndarray:
        buf = np.zeros(enc.shape, dtype=g.dtype)
        buf[window] = g[..., :enc_chans]
        return buf

    def pull_dec(g: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(g[..., enc_chans:])

    record(out, [(enc, pull_enc), (dec, pull_dec)])
    return out


def take_channel(x: Tensor, index: int) -> Tensor:
    """Select one channel, dropping the channel axis."""
    if not -x.shape[-1] <= index < x.shape[-1]:
        raise ShapeError(f"channel {index} out of range for {x.shape[-1]} channels")
    out = Tensor(np.ascontiguousarray(x.values[..., index]), requires_grad=x.requires_grad)

    def pull_x(g: np.ndarray) -> np.ndarray:
        buf = np.zeros(x.shape, dtype=g.dtype)
        buf[..., index] = g
        return buf

    record(out, [(x, pull_x)])
    return out
