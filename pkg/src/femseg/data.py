"""Volume I/O, manifests, resampling, slice sampling, and synthetic phantoms.

In-memory voxel arrays are (z, y, x) row-major; file headers and user-facing
tuples expose extents as (x, y, slices) and spacing as (x, y, z) millimetres.
The on-disk volume format is an 8-byte magic, one JSON header line, then the
raw little-endian voxel payload in array order.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

__all__ = [
    "Volume",
    "MaskVolume",
    "ManifestEntry",
    "VOLUME_MAGIC",
    "read_volume",
    "write_volume",
    "load_manifest",
    "save_manifest",
    "central_slab",
    "bicubic_resample",
    "upsample_mask_nearest",
    "slice_triplets",
    "generate_phantom",
]

VOLUME_MAGIC = b"FSEGVOL1"

_KIND_DTYPES = {"image": {"<f4", "<f8"}, "map": {"<f4", "<f8"}, "mask": {"|u1"}}


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive finite numbers, got {spacing}")
    return spacing


@dataclass
class Volume:
    """A scalar volume: image intensities or a probability map."""

    values: np.ndarray                    # (z, y, x)
    spacing: tuple[float, float, float]   # (x, y, z) mm
    kind: str = "image"

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"volume values must be 3-d (z, y, x), got {self.values.ndim}-d")
        if self.values.dtype not in (np.float32, np.float64):
            raise TypeError(f"volume values must be float32/float64, got {self.values.dtype}")
        if self.kind not in ("image", "map"):
            raise ValueError(f"volume kind must be 'image' or 'map', got {self.kind!r}")
        self.spacing = _check_spacing(self.spacing)

    @property
    def extents(self) -> tuple[int, int, int]:
        """(x, y, slices)."""
        z, y, x = self.values.shape
        return (x, y, z)


@dataclass
class MaskVolume:
    """A binary segmentation volume, voxel values in {0, 1}."""

    values: np.ndarray                    # (z, y, x) uint8
    spacing: tuple[float, float, float]   # (x, y, z) mm

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"mask values must be 3-d (z, y, x), got {self.values.ndim}-d")
        if self.values.dtype != np.uint8:
            raise TypeError(f"mask values must be uint8, got {self.values.dtype}")
        if self.values.size and self.values.max() > 1:
            raise ValueError("mask voxels must be 0 or 1")
        self.spacing = _check_spacing(self.spacing)

    @property
    def extents(self) -> tuple[int, int, int]:
        z, y, x = self.values.shape
        return (x, y, z)


def write_volume(path, vol: Volume | MaskVolume) -> None:
    """Serialize a volume: magic, one JSON header line, little-endian voxels."""
    if isinstance(vol, MaskVolume):
        kind, dtype = "mask", np.dtype("|u1")
    elif isinstance(vol, Volume):
        kind, dtype = vol.kind, vol.values.dtype.newbyteorder("<")
    else:
        raise TypeError(f"cannot serialize {type(vol).__name__}")
    header = {
        "format": 1,
        "kind": kind,
        "extents_xyz": list(vol.extents),
        "spacing_mm_xyz": list(vol.spacing),
        "dtype": dtype.str if kind != "mask" else "|u1",
        "axis_order": "zyx",
    }
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(vol.values.astype(dtype, copy=False)).tobytes())


def read_volume(path) -> Volume | MaskVolume:
    """Parse a volume file, validating structure, extents, and payload size."""
    with open(path, "rb") as fh:
        magic = fh.read(len(VOLUME_MAGIC))
        if magic != VOLUME_MAGIC:
            raise ValueError(f"{path}: not a volume file (magic {magic!r})")
        header_line = fh.readline()
        if not header_line.endswith(b"\n"):
            raise ValueError(f"{path}: truncated header")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as err:
            raise ValueError(f"{path}: corrupt header: {err}") from None
        required = {"format", "kind", "extents_xyz", "spacing_mm_xyz", "dtype", "axis_order"}
        if set(header) != required:
            raise ValueError(f"{path}: header keys {sorted(header)} != {sorted(required)}")
        if header["format"] != 1:
            raise ValueError(f"{path}: unsupported format {header['format']!r}")
        kind = header["kind"]
        if kind not in _KIND_DTYPES:
            raise ValueError(f"{path}: unknown volume kind {kind!r}")
        if header["dtype"] not in _KIND_DTYPES[kind]:
            raise ValueError(f"{path}: dtype {header['dtype']!r} invalid for kind {kind!r}")
        if header["axis_order"] != "zyx":
            raise ValueError(f"{path}: unsupported axis order {header['axis_order']!r}")
        ex, ey, ez = (int(v) for v in header["extents_xyz"])
        if min(ex, ey, ez) < 1:
            raise ValueError(f"{path}: non-positive extents {header['extents_xyz']}")
        spacing = _check_spacing(header["spacing_mm_xyz"])
        dtype = np.dtype(header["dtype"])
        nbytes = ez * ey * ex * dtype.itemsize
        payload = fh.read(nbytes)
        if len(payload) != nbytes:
            raise ValueError(f"{path}: truncated payload ({len(payload)} of {nbytes} bytes)")
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after payload")
    values = np.frombuffer(payload, dtype=dtype).reshape(ez, ey, ex)
    values = values.astype(dtype.newbyteorder("="))
    if kind == "mask":
        return MaskVolume(values, spacing)
    return Volume(values, spacing, kind=kind)


@dataclass
class ManifestEntry:
    """One subject: image/mask paths plus stratification metadata."""

    subject_id: str
    image_path: str
    mask_path: str
    laterality: str
    fold: int | None = None

    def __post_init__(self):
        if not self.subject_id:
            raise ValueError("subject_id must be non-empty")
        if self.laterality not in ("left", "right"):
            raise ValueError(f"{self.subject_id}: laterality must be 'left' or 'right', "
                             f"got {self.laterality!r}")
        if self.fold is not None and (not isinstance(self.fold, int) or self.fold < 0):
            raise ValueError(f"{self.subject_id}: fold must be a non-negative int or null")


def save_manifest(path, entries: list[ManifestEntry]) -> None:
    """Write a manifest as a JSON array; paths are stored as given."""
    seen = set()
    for e in entries:
        if e.subject_id in seen:
            raise ValueError(f"duplicate subject_id {e.subject_id!r}")
        seen.add(e.subject_id)
    rows = [{"subject_id": e.subject_id, "image": str(e.image_path),
             "mask": str(e.mask_path), "laterality": e.laterality, "fold": e.fold}
            for e in entries]
    Path(path).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_manifest(path, check_files: bool = True) -> list[ManifestEntry]:
    """Read a manifest; relative paths resolve against the manifest directory."""
    path = Path(path)
    try:
        rows = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ValueError(f"{path}: not valid JSON: {err}") from None
    if not isinstance(rows, list):
        raise ValueError(f"{path}: manifest must be a JSON array")
    base = path.parent
    entries = []
    seen = set()
    for i, row in enumerate(rows):
        if not isinstance(row, dict):
            raise ValueError(f"{path}: entry {i} is not an object")
        extra = set(row) - {"subject_id", "image", "mask", "laterality", "fold"}
        if extra:
            raise ValueError(f"{path}: entry {i} has unknown keys {sorted(extra)}")
        try:
            entry = ManifestEntry(
                subject_id=row["subject_id"],
                image_path=str(base / row["image"]),
                mask_path=str(base / row["mask"]),
                laterality=row["laterality"],
                fold=row.get("fold"),
            )
        except KeyError as err:
            raise ValueError(f"{path}: entry {i} is missing key {err}") from None
        if entry.subject_id in seen:
            raise ValueError(f"{path}: duplicate subject_id {entry.subject_id!r}")
        seen.add(entry.subject_id)
        if check_files:
            for p in (entry.image_path, entry.mask_path):
                if not Path(p).is_file():
                    raise FileNotFoundError(f"{path}: entry {entry.subject_id!r} "
                                            f"references missing file {p}")
        entries.append(entry)
    return entries


def central_slab(vol, count: int = 48):
    """Keep the central ``count`` slices.

    When the trimmed slice count is odd the slab sits one slice closer to
    the front (lower z).  A volume with exactly ``count`` slices passes
    through; fewer slices than the slab is an error.
    """
    if count < 1:
        raise ValueError(f"slab size must be positive, got {count}")
    nz = vol.values.shape[0]
    if nz < count:
        raise ValueError(f"volume has {nz} slices, fewer than the {count}-slice slab")
    if nz == count:
        return vol
    start = (nz - count) // 2
    log.info("central_slab: %d -> %d slices (keeping %d..%d)",
             nz, count, start, start + count - 1)
    return replace(vol, values=vol.values[start:start + count])


def _catmull_rom_weights(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) interpolation matrix, Catmull-Rom kernel (a=-0.5).

    Sample positions use the pixel-center convention; taps outside the
    signal are clamped to the edge sample.
    """
    a = -0.5
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        base = math.floor(src)
        t = src - base
        for tap in (-1, 0, 1, 2):
            d = abs(t - tap)
            if d <= 1.0:
                coeff = (a + 2.0) * d ** 3 - (a + 3.0) * d ** 2 + 1.0
            elif d < 2.0:
                coeff = a * (d ** 3 - 5.0 * d ** 2 + 8.0 * d - 4.0)
            else:
                continue
            w[i, min(max(base + tap, 0), n_in - 1)] += coeff
    return w


def bicubic_resample(vol: Volume, target_xy: tuple[int, int]) -> Volume:
    """Resample every slice to (x, y) extents with separable Catmull-Rom.

    Interpolates at pixel centers with edge-clamped taps; the kernel
    reproduces linear ramps away from the clamped border.  Spacing rescales
    to preserve physical extent.  Masks are not bicubic material; use
    :func:`upsample_mask_nearest` for them.
    """
    if isinstance(vol, MaskVolume):
        raise TypeError("bicubic_resample interpolates scalar volumes, not masks")
    tx, ty = (int(v) for v in target_xy)
    if tx < 2 or ty < 2:
        raise ValueError(f"target extents must be at least 2, got {(tx, ty)}")
    nz, ny, nx = vol.values.shape
    log.info("bicubic_resample: (%d, %d) -> (%d, %d) in-plane", nx, ny, tx, ty)
    wy = _catmull_rom_weights(ny, ty)
    wx = _catmull_rom_weights(nx, tx)
    out = np.einsum("oy,zyx,px->zop", wy, vol.values, wx, optimize=True)
    sx, sy, sz = vol.spacing
    return Volume(out.astype(vol.values.dtype),
                  (sx * nx / tx, sy * ny / ty, sz), kind=vol.kind)


def upsample_mask_nearest(mask: MaskVolume, target_xy: tuple[int, int]) -> MaskVolume:
    """Nearest-neighbour in-plane resample of a binary mask."""
    tx, ty = (int(v) for v in target_xy)
    if tx < 1 or ty < 1:
        raise ValueError(f"target extents must be positive, got {(tx, ty)}")
    nz, ny, nx = mask.values.shape
    if (tx, ty) != (nx, ny):
        log.info("upsample_mask_nearest: (%d, %d) -> (%d, %d) in-plane", nx, ny, tx, ty)
    iy = np.minimum((np.arange(ty) + 0.5) * ny / ty, ny - 1).astype(np.int64)
    ix = np.minimum((np.arange(tx) + 0.5) * nx / tx, nx - 1).astype(np.int64)
    out = mask.values[:, iy[:, None], ix[None, :]]
    sx, sy, sz = mask.spacing
    return MaskVolume(np.ascontiguousarray(out), (sx * nx / tx, sy * ny / ty, sz))


def slice_triplets(vol: Volume, index: int) -> np.ndarray:
    """Slice ``index`` with its two z-neighbours as channels, (y, x, 3).

    Boundary slices replicate themselves in place of the missing
    neighbour.
    """
    nz = vol.values.shape[0]
    if not 0 <= index < nz:
        raise IndexError(f"slice {index} out of range for {nz} slices")
    lo, hi = max(index - 1, 0), min(index + 1, nz - 1)
    return np.stack([vol.values[lo], vol.values[index], vol.values[hi]], axis=-1)


def _unit_noise(rng: np.random.Generator, shape, sigma) -> np.ndarray:
    field = gaussian_filter(rng.standard_normal(shape), sigma=sigma)
    sd = field.std()
    return field / sd if sd > 0 else field


def _capsule_depth(coords, a, b, radius) -> np.ndarray:
    """radius - distance from each voxel to segment ab (positive inside)."""
    z, y, x = coords
    av = np.array(a)
    d = np.array(b) - av
    denom = float(d @ d)
    pz, py, px = z - av[0], y - av[1], x - av[2]
    t = (pz * d[0] + py * d[1] + px * d[2]) / denom if denom > 0 else 0.0
    t = np.clip(t, 0.0, 1.0)
    dist = np.sqrt((pz - t * d[0]) ** 2 + (py - t * d[1]) ** 2 + (px - t * d[2]) ** 2)
    return radius - dist


def generate_phantom(seed: int,
                     extents_xyz: tuple[int, int, int] = (64, 64, 32),
                     difficulty: float = 0.35,
                     spacing_mm_xyz: tuple[float, float, float] = (1.0, 1.0, 1.5),
                     laterality: str | None = None) -> tuple[Volume, MaskVolume, str]:
    """Synthesize a proximal-femur-like MR volume, its mask, and laterality.

    The bone is a union of three smooth primitives (ellipsoidal head, neck
    and shaft capsules) with seeded jitter, rendered dark on a brighter,
    banded background with a smooth bias field and voxel noise.
    ``difficulty`` in [0, 1] scales edge blur, inhomogeneity, and noise
    (all three vanish at 0; the banded background, blob field, and
    trabecular texture stay).  The side is drawn from the seed unless
    forced via ``laterality``; a
    right-sided subject is the exact x-mirror of the left-sided one with
    the same seed.  Foreground stays within 3..25% of the voxels.
    """
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError(f"difficulty must lie in [0, 1], got {difficulty}")
    if laterality not in (None, "left", "right"):
        raise ValueError(f"laterality must be 'left' or 'right', got {laterality!r}")
    nx, ny, nz = (int(v) for v in extents_xyz)
    if min(nx, ny) < 32:
        raise ValueError(f"in-plane extents must be at least 32, got {extents_xyz}")
    if nz < 8:
        raise ValueError(f"at least 8 slices required, got {nz}")
    spacing = _check_spacing(spacing_mm_xyz)
    rng = np.random.default_rng(seed)
    drawn_side = "right" if rng.random() < 0.5 else "left"
    side = laterality if laterality is not None else drawn_side

    # Physical normalized coordinates: shapes are round in millimetres.
    lengths = (nz * spacing[2], ny * spacing[1], nx * spacing[0])
    lmax = max(lengths)
    axes = [np.linspace(0.0, L / lmax, n, endpoint=True)
            for L, n in zip(lengths, (nz, ny, nx))]
    coords = np.meshgrid(*axes, indexing="ij", sparse=True)
    z_span = lengths[0] / lmax

    mask = None
    for _ in range(20):
        jit = rng.uniform(-1.0, 1.0, size=12)
        scale = 1.0 + 0.12 * rng.uniform(-1.0, 1.0, size=3)
        zc = z_span / 2
        head_c = (zc + 0.04 * jit[0] * z_span, 0.33 + 0.025 * jit[1], 0.64 + 0.025 * jit[2])
        head_r = 0.155 * scale[0]
        neck_b = (zc + 0.03 * jit[3] * z_span, 0.47 + 0.02 * jit[4], 0.50 + 0.02 * jit[5])
        shaft_a = (zc + 0.03 * jit[6] * z_span, 0.46 + 0.02 * jit[7], 0.49 + 0.02 * jit[8])
        shaft_b = (zc + 0.04 * jit[9] * z_span, 0.93 + 0.02 * jit[10], 0.43 + 0.03 * jit[11])
        depth = np.maximum(
            _capsule_depth(coords, head_c, head_c, head_r),
            np.maximum(
                _capsule_depth(coords, head_c, neck_b, 0.085 * scale[1]),
                _capsule_depth(coords, shaft_a, shaft_b, 0.105 * scale[2]),
            ),
        )
        candidate = (depth > 0).astype(np.uint8)
        fraction = candidate.mean()
        if 0.03 <= fraction <= 0.25:
            mask = candidate
            break
    if mask is None:
        raise RuntimeError(f"phantom geometry never reached 3..25% foreground (seed {seed})")

    shape = (nz, ny, nx)
    yn = np.linspace(0.0, 1.0, ny)[None, :, None]
    xn = np.linspace(0.0, 1.0, nx)[None, None, :]
    phase = rng.uniform(0.0, 2.0 * np.pi)
    bands = np.sin(2.0 * np.pi * (2.8 * yn + 0.9 * xn) + phase)
    blobs = _unit_noise(rng, shape, sigma=6.0)
    trabecular = _unit_noise(rng, shape, sigma=0.8)
    bias = _unit_noise(rng, shape, sigma=12.0)
    noise = rng.standard_normal(shape)

    # The inhomogeneity field is the dominant hardness axis: a smooth
    # additive drift defeats global thresholding (intensity histograms of
    # the classes overlap across regions) while local contrast survives,
    # mimicking the usual MR failure mode.
    edge_sigma = 1.1 * difficulty
    soft = mask.astype(np.float64)
    if edge_sigma > 0.0:
        soft = gaussian_filter(soft, sigma=edge_sigma)
    foreground = 0.34 + 0.05 * trabecular
    background = 0.66 + 0.07 * bands + 0.05 * blobs
    img = background * (1.0 - soft) + foreground * soft
    img += 0.6 * difficulty * bias
    img += 0.15 * difficulty * noise
    img = np.clip(img, 0.0, 1.4).astype(np.float32)

    if side == "right":
        img = img[:, :, ::-1].copy()
        mask = mask[:, :, ::-1].copy()
    return Volume(img, spacing), MaskVolume(np.ascontiguousarray(mask), spacing), side
