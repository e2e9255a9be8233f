"""Volume/mask containers, file I/O, intensity windowing, patch sampling,
augmentation, multi-scale targets and synthetic cases.

Arrays are stored in (D, H, W) order, i.e. depth (slice index) first, and
spacing follows the same order as (sz, sy, sx) in millimetres.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidWindow, MalformedFile, ShapeError, UnsupportedFormat

VOL3_MAGIC = b"VOL3"
VOL3_VERSION = 1
KIND_INTENSITY = 0
KIND_MASK = 1
_VOL3_HEADER = struct.Struct("<4sIB3I3d")

LUNG_WINDOW = (-1000.0, 400.0)
NOISE_SIGMA_HU = 10.0
N_SCALES = 5


def _check_geometry(shape, spacing):
    if len(shape) != 3:
        raise ShapeError(f"expected a 3D grid, got shape {shape}")
    if min(shape) < 1:
        raise ShapeError(f"zero-sized grid {shape}")
    if len(spacing) != 3 or not all(float(s) > 0 for s in spacing):
        raise ShapeError(f"spacing must be three positive values, got {spacing}")


@dataclass(eq=False)
class Volume3D:
    """Scalar intensity grid with physical voxel spacing."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        _check_geometry(self.voxels.shape, self.spacing)

    @property
    def dims(self) -> tuple:
        return tuple(self.voxels.shape)

    def __eq__(self, other):
        return (
            isinstance(other, Volume3D)
            and self.spacing == other.spacing
            and np.array_equal(self.voxels, other.voxels)
        )


@dataclass(eq=False)
class Mask3D:
    """Binary label grid aligned with a Volume3D."""

    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.dtype != np.bool_ and labels.size and not np.isin(labels, (0, 1)).all():
            raise ShapeError("mask labels must be 0 or 1")
        self.labels = np.ascontiguousarray(labels, dtype=np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        _check_geometry(self.labels.shape, self.spacing)

    @property
    def dims(self) -> tuple:
        return tuple(self.labels.shape)

    def __eq__(self, other):
        return (
            isinstance(other, Mask3D)
            and self.spacing == other.spacing
            and np.array_equal(self.labels, other.labels)
        )


@dataclass
class PatchPair:
    image: Volume3D
    mask: Optional[Mask3D]
    origin: tuple = (0, 0, 0)


@dataclass
class MultiScaleTarget:
    targets: list = field(default_factory=list)

    def __len__(self):
        return len(self.targets)

    def __getitem__(self, k):
        return self.targets[k]


# ---------------------------------------------------------------------------
# file I/O


def _write_vol3(path, kind, array, spacing):
    d, h, w = array.shape
    header = _VOL3_HEADER.pack(VOL3_MAGIC, VOL3_VERSION, kind, d, h, w, *spacing)
    dtype = "<f4" if kind == KIND_INTENSITY else "u1"
    payload = np.ascontiguousarray(array).astype(dtype, copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def _read_vol3(path):
    raw = Path(path).read_bytes()
    if len(raw) < _VOL3_HEADER.size:
        raise MalformedFile(f"{path}: truncated header")
    magic, version, kind, d, h, w, sz, sy, sx = _VOL3_HEADER.unpack_from(raw)
    if magic != VOL3_MAGIC:
        raise MalformedFile(f"{path}: bad magic {magic!r}")
    if version != VOL3_VERSION:
        raise UnsupportedFormat(f"{path}: unsupported .vol3 version {version}")
    if kind not in (KIND_INTENSITY, KIND_MASK):
        raise MalformedFile(f"{path}: unknown kind {kind}")
    dtype = np.dtype("<f4") if kind == KIND_INTENSITY else np.dtype("u1")
    n = d * h * w
    payload = raw[_VOL3_HEADER.size:]
    if n == 0 or len(payload) != n * dtype.itemsize:
        raise MalformedFile(
            f"{path}: declared dims {(d, h, w)} need {n * dtype.itemsize} payload bytes, "
            f"found {len(payload)}"
        )
    array = np.frombuffer(payload, dtype=dtype).reshape(d, h, w)
    return kind, array, (sz, sy, sx)


_NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}


def _read_nifti1(path):
    raw = Path(path).read_bytes()
    if str(path).endswith(".gz"):
        raw = gzip.decompress(raw)
    if len(raw) < 348:
        raise MalformedFile(f"{path}: truncated NIfTI header")
    for endian in "<>":
        if struct.unpack_from(endian + "i", raw, 0)[0] == 348:
            break
    else:
        raise MalformedFile(f"{path}: not a NIfTI-1 header")
    if raw[344:347] not in (b"n+1", b"ni1"):
        raise UnsupportedFormat(f"{path}: only single-file NIfTI-1 is supported")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype = struct.unpack_from(endian + "h", raw, 70)[0]
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset, slope, inter = struct.unpack_from(endian + "3f", raw, 108)
    if dim[0] < 3 or any(n > 1 for n in dim[4:dim[0] + 1]):
        raise UnsupportedFormat(f"{path}: expected a single 3D volume, dim={dim}")
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedFormat(f"{path}: unsupported NIfTI datatype {datatype}")
    nx, ny, nz = dim[1:4]
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    start = int(vox_offset) if vox_offset >= 348 else 352
    count = nx * ny * nz
    if len(raw) < start + count * dtype.itemsize:
        raise MalformedFile(f"{path}: truncated voxel data")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    # NIfTI stores x fastest, which is C order (z, y, x)
    array = data.reshape(nz, ny, nx).astype(np.float64)
    if slope not in (0.0,) and np.isfinite(slope):
        array = array * slope + inter
    spacing = tuple(abs(float(p)) or 1.0 for p in (pixdim[3], pixdim[2], pixdim[1]))
    return array, spacing


def _read_any(path):
    path = Path(path)
    name = path.name.lower()
    if name.endswith(".vol3"):
        return _read_vol3(path)
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        array, spacing = _read_nifti1(path)
        return None, array, spacing
    raise UnsupportedFormat(f"{path}: unknown extension")


def load_volume(path) -> Volume3D:
    """Read an intensity volume from a ``.vol3`` or NIfTI-1 file."""
    _, array, spacing = _read_any(path)
    return Volume3D(array, spacing)


def load_mask(path) -> Mask3D:
    kind, array, spacing = _read_any(path)
    if kind == KIND_INTENSITY:
        raise MalformedFile(f"{path}: file holds intensities, not a mask")
    if not np.isin(array, (0, 1)).all():
        raise MalformedFile(f"{path}: mask values outside {{0, 1}}")
    return Mask3D(array, spacing)


def save_volume(v: Volume3D, path) -> None:
    _write_vol3(path, KIND_INTENSITY, v.voxels, v.spacing)


def save_mask(m: Mask3D, path) -> None:
    _write_vol3(path, KIND_MASK, m.labels, m.spacing)


# ---------------------------------------------------------------------------
# intensity handling


def window_normalize(v: Volume3D, lo: float = LUNG_WINDOW[0], hi: float = LUNG_WINDOW[1]) -> Volume3D:
    """Clip intensities to ``[lo, hi]`` and map them linearly onto ``[0, 1]``."""
    if not lo < hi:
        raise InvalidWindow(f"window lower bound {lo} must be below upper bound {hi}")
    x = (v.voxels.astype(np.float64) - lo) / (hi - lo)
    return Volume3D(np.clip(x, 0.0, 1.0), v.spacing)


def noise_sigma_normalized(sigma_hu: float = NOISE_SIGMA_HU, window=LUNG_WINDOW) -> float:
    """Express a noise level given in HU on the [0, 1] windowed scale."""
    return sigma_hu / (window[1] - window[0])


# ---------------------------------------------------------------------------
# patches


def pad_to(array: np.ndarray, size) -> tuple:
    """Zero-pad ``array`` symmetrically so every axis is at least ``size``.

    Returns the padded array and the per-axis (before, after) pad widths.
    """
    widths = []
    for n, s in zip(array.shape, size):
        extra = max(0, s - n)
        widths.append((extra // 2, extra - extra // 2))
    if any(w != (0, 0) for w in widths):
        array = np.pad(array, widths)
    return array, widths


def sample_patch(
    v: Volume3D,
    m: Optional[Mask3D],
    size: Sequence[int],
    rng: np.random.Generator,
    fg_prob: float = 0.0,
) -> PatchPair:
    """Crop a random block of ``size`` from ``v`` (and ``m`` when given).

    With probability ``fg_prob`` and a nonempty mask, the origin is drawn
    among the placements that contain a randomly chosen foreground voxel.
    """
    size = tuple(int(s) for s in size)
    if m is not None and m.dims != v.dims:
        raise ShapeError(f"mask dims {m.dims} differ from volume dims {v.dims}")
    image, _ = pad_to(v.voxels, size)
    labels = pad_to(m.labels, size)[0] if m is not None else None
    dims = image.shape

    use_fg = labels is not None and fg_prob > 0 and rng.random() < fg_prob
    fg = np.flatnonzero(labels) if use_fg else ()
    if len(fg):
        point = np.unravel_index(fg[rng.integers(len(fg))], dims)
        origin = tuple(
            int(rng.integers(max(0, p - s + 1), min(p, n - s) + 1))
            for p, s, n in zip(point, size, dims)
        )
    else:
        origin = tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(dims, size))

    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    image_patch = Volume3D(image[sl], v.spacing)
    mask_patch = Mask3D(labels[sl], m.spacing) if labels is not None else None
    return PatchPair(image_patch, mask_patch, origin)


def augment_flip(p: PatchPair, rng: Optional[np.random.Generator] = None, flips=None) -> PatchPair:
    """Flip each axis independently with probability 0.5.

    ``flips`` (three booleans) overrides the random draw.
    """
    if flips is None:
        flips = rng.random(3) < 0.5
    axes = tuple(i for i, f in enumerate(flips) if f)
    if not axes:
        return p
    image = Volume3D(np.flip(p.image.voxels, axes), p.image.spacing)
    mask = Mask3D(np.flip(p.mask.labels, axes), p.mask.spacing) if p.mask is not None else None
    return PatchPair(image, mask, p.origin)


def augment_noise(p: PatchPair, sigma: float, rng: np.random.Generator) -> PatchPair:
    """Add zero-mean Gaussian noise (std ``sigma``, normalized units) to the image."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return p
    noise = rng.normal(0.0, sigma, size=p.image.dims)
    image = np.clip(p.image.voxels + noise, 0.0, 1.0)
    return PatchPair(Volume3D(image, p.image.spacing), p.mask, p.origin)


def _maxpool2(labels: np.ndarray) -> np.ndarray:
    # trailing zero pad so odd axes pool to ceil(n / 2)
    padded = np.pad(labels, [(0, n % 2) for n in labels.shape])
    d, h, w = padded.shape
    return padded.reshape(d // 2, 2, h // 2, 2, w // 2, 2).max(axis=(1, 3, 5))


def downsample_mask(m: Mask3D, levels: int = N_SCALES) -> MultiScaleTarget:
    """Build per-scale targets by repeated 2x2x2 max-pooling (ceil sizing)."""
    targets = [m]
    labels, spacing = m.labels, m.spacing
    for _ in range(levels - 1):
        labels = _maxpool2(labels)
        spacing = tuple(2 * s for s in spacing)
        targets.append(Mask3D(labels, spacing))
    return MultiScaleTarget(targets)


# ---------------------------------------------------------------------------
# synthetic data


def make_synthetic_case(
    rng: np.random.Generator,
    dims=(64, 64, 64),
    spacing=(1.0, 1.0, 1.0),
    n_blobs: int = 3,
    noise: float = 0.05,
    background: float = 0.2,
    contrast: float = 0.35,
) -> tuple:
    """Random ellipsoid lesions on a flat background, intensities in [0, 1].

    The mask is the union of ``n_blobs`` ellipsoids. Texture noise is
    Gaussian-smoothed white noise rescaled to standard deviation ``noise``.
    """
    dims = tuple(int(n) for n in dims)
    if min(dims) < 16:
        raise ShapeError(f"synthetic cases need every dim >= 16, got {dims}")
    grid = np.indices(dims, dtype=np.float64)
    labels = np.zeros(dims, dtype=bool)
    small = min(dims)
    for _ in range(max(1, n_blobs)):
        radii = rng.uniform(0.08, 0.2, size=3) * small
        radii = np.maximum(radii, 2.0)
        centre = [rng.uniform(r + 1, n - r - 2) for r, n in zip(radii, dims)]
        dist = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, centre, radii))
        labels |= dist <= 1.0
    image = background + contrast * labels.astype(np.float64)
    if noise > 0:
        tex = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=1.0)
        tex *= noise / tex.std()
        image = image + tex
    image = np.clip(image, 0.0, 1.0)
    return Volume3D(image, spacing), Mask3D(labels, spacing)
