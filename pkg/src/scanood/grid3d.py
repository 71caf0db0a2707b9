"""3D volume and mask primitives.

Arrays are indexed ``[i, j, k]`` with shape ``(nx, ny, nz)``. On disk the
voxel order is x-fastest (linear index ``i + nx * (j + ny * k)``), which is
numpy's Fortran order for that shape.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from ._percentile import nearest_rank
from .errors import DataFormatError

DEFAULT_HU_WINDOW = (-400.0, 400.0)

_CROSS = ndimage.generate_binary_structure(3, 1)
_FULL = ndimage.generate_binary_structure(3, 3)


def _frozen(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def _check_triple(name, values, positive=False):
    values = tuple(float(v) for v in values)
    if len(values) != 3:
        raise ValueError(f"{name} must have three components, got {len(values)}")
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"{name} must be finite, got {values}")
    if positive and not all(v > 0 for v in values):
        raise ValueError(f"{name} must be > 0 per axis, got {values}")
    return values


@dataclass(frozen=True)
class BoxRegion:
    corner: tuple[int, int, int]
    size: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "corner", tuple(int(c) for c in self.corner))
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        if len(self.corner) != 3 or len(self.size) != 3:
            raise ValueError("corner and size must be triples")
        if min(self.size) < 1:
            raise ValueError(f"box size must be >= 1 per axis, got {self.size}")

    @property
    def stop(self):
        return tuple(c + s for c, s in zip(self.corner, self.size))

    @property
    def center(self):
        return tuple(c + s / 2.0 for c, s in zip(self.corner, self.size))

    def slices(self):
        return tuple(slice(c, c + s) for c, s in zip(self.corner, self.size))

    def contains(self, other: BoxRegion):
        return all(
            c <= oc and oc + os <= c + s
            for c, s, oc, os in zip(self.corner, self.size, other.corner, other.size)
        )

    def inside(self, dims):
        return all(c >= 0 and c + s <= d for c, s, d in zip(self.corner, self.size, dims))


@dataclass(frozen=True)
class NormalizationWindow:
    lo_hu: float = DEFAULT_HU_WINDOW[0]
    hi_hu: float = DEFAULT_HU_WINDOW[1]

    def __post_init__(self):
        if not self.lo_hu < self.hi_hu:
            raise ValueError(f"window needs lo < hi, got [{self.lo_hu}, {self.hi_hu}]")


@dataclass(frozen=True)
class VolumeGrid:
    """Scalar intensities (float32) with physical voxel spacing in mm."""

    values: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D array, got shape {values.shape}")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "spacing_mm", _check_triple("spacing_mm", self.spacing_mm, positive=True))

    @property
    def dims(self):
        return tuple(int(n) for n in self.values.shape)


@dataclass(frozen=True)
class LabelMask:
    bits: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 3 or min(bits.shape) < 1:
            raise ValueError(f"mask must be a non-empty 3D array, got shape {bits.shape}")
        object.__setattr__(self, "bits", _frozen(bits.astype(bool)))
        object.__setattr__(self, "spacing_mm", _check_triple("spacing_mm", self.spacing_mm, positive=True))

    @property
    def dims(self):
        return tuple(int(n) for n in self.bits.shape)

    @property
    def count(self):
        return int(self.bits.sum())

    def _like(self, bits):
        return LabelMask(bits, self.spacing_mm)


@dataclass(frozen=True)
class Component:
    voxel_list: np.ndarray  # (m, 3) integer voxel indices
    bbox: BoxRegion
    volume_mm3: float

    @property
    def n_voxels(self):
        return int(self.voxel_list.shape[0])


class BandSplit(NamedTuple):
    boundary: LabelMask
    interior: LabelMask
    interior_empty: bool


# -- intensity ------------------------------------------------------------------


def normalize_hu(volume: VolumeGrid, window: NormalizationWindow = NormalizationWindow()) -> VolumeGrid:
    """Clamp to the HU window and rescale linearly onto [0, 1]."""
    lo, hi = float(window.lo_hu), float(window.hi_hu)
    v = np.clip(volume.values.astype(np.float64), lo, hi)
    return VolumeGrid(((v - lo) / (hi - lo)).astype(np.float32), volume.spacing_mm)


def resample(volume, target_spacing_mm, mode="trilinear"):
    """Resample a volume or mask to a new voxel spacing.

    Output dims are ``round(dims * spacing / target)`` (at least 1). Voxel
    centers sit at ``(index + 0.5) * spacing``; samples outside the input's
    center lattice take the nearest edge value.

    Parameters
    ----------
    volume : VolumeGrid or LabelMask
    target_spacing_mm : triple of float
    mode : {'trilinear', 'nearest'}
        Use ``'nearest'`` for masks.
    """
    target = _check_triple("target_spacing_mm", target_spacing_mm, positive=True)
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resample mode {mode!r}")
    is_mask = isinstance(volume, LabelMask)
    data = volume.bits if is_mask else volume.values
    spacing = volume.spacing_mm
    if target == spacing:
        return LabelMask(data, target) if is_mask else VolumeGrid(data, target)

    out_dims = [max(1, int(round(n * s / t))) for n, s, t in zip(data.shape, spacing, target)]
    axes = [
        np.clip((np.arange(m) + 0.5) * t / s - 0.5, 0.0, n - 1)
        for m, n, s, t in zip(out_dims, data.shape, spacing, target)
    ]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    order = 1 if mode == "trilinear" else 0
    out = ndimage.map_coordinates(data.astype(np.float64), coords, order=order, mode="nearest")
    if is_mask:
        return LabelMask(out > 0.5, target)
    return VolumeGrid(out.astype(np.float32), target)


# -- components and morphology ------------------------------------------------


def _linear_index(ijk, dims):
    i, j, k = ijk
    return int(i) + dims[0] * (int(j) + dims[1] * int(k))


def connected_components(mask: LabelMask, connectivity=26) -> list[Component]:
    """Maximal connected foreground sets, largest first.

    Ties in voxel count are broken by the x-fastest linear index of the
    bounding-box corner, then of the first voxel.
    """
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    structure = _CROSS if connectivity == 6 else _FULL
    labels, n = ndimage.label(mask.bits, structure=structure)
    if n == 0:
        return []
    voxel_mm3 = float(np.prod(mask.spacing_mm))
    dims = mask.dims
    comps = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        local = np.argwhere(labels[sl] == lab)
        offset = np.array([s.start for s in sl])
        voxels = local + offset
        # F-order sort puts the x-fastest smallest voxel first.
        lin = voxels[:, 0] + dims[0] * (voxels[:, 1] + dims[1] * voxels[:, 2])
        voxels = voxels[np.argsort(lin, kind="stable")]
        bbox = BoxRegion(offset, [s.stop - s.start for s in sl])
        comps.append(Component(_frozen(voxels), bbox, voxels.shape[0] * voxel_mm3))
    comps.sort(
        key=lambda c: (-c.n_voxels, _linear_index(c.bbox.corner, dims), _linear_index(c.voxel_list[0], dims))
    )
    return comps


def _check_radius(radius_vox):
    r = int(radius_vox)
    if r != radius_vox or r < 0:
        raise ValueError(f"radius must be a non-negative integer, got {radius_vox}")
    return r


def erode(mask: LabelMask, radius_vox: int) -> LabelMask:
    """Binary erosion by the 6-neighbourhood ball of the given radius.

    Voxels outside the grid count as background.
    """
    r = _check_radius(radius_vox)
    if r == 0 or not mask.bits.any():
        return mask._like(mask.bits)
    return mask._like(ndimage.binary_erosion(mask.bits, structure=_CROSS, iterations=r, border_value=0))


def dilate(mask: LabelMask, radius_vox: int) -> LabelMask:
    r = _check_radius(radius_vox)
    if r == 0 or not mask.bits.any():
        return mask._like(mask.bits)
    return mask._like(ndimage.binary_dilation(mask.bits, structure=_CROSS, iterations=r))


def boundary_interior_split(mask: LabelMask) -> BandSplit:
    """Split a region into an interior core and a ~3-voxel band around its contour.

    interior = erode(mask, 1); boundary = dilate(mask, 1) minus interior.
    """
    if not mask.bits.any():
        raise ValueError("boundary_interior_split needs a non-empty mask")
    interior = erode(mask, 1)
    boundary = mask._like(dilate(mask, 1).bits & ~interior.bits)
    return BandSplit(boundary, interior, not interior.bits.any())


# -- segmentation quality ------------------------------------------------------


def _same_dims(a, b):
    if a.dims != b.dims:
        raise ValueError(f"mask dims differ: {a.dims} vs {b.dims}")


def dice(a: LabelMask, b: LabelMask) -> float:
    _same_dims(a, b)
    sa, sb = int(a.bits.sum()), int(b.bits.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((a.bits & b.bits).sum()) / (sa + sb)


def surface_voxels(bits):
    """Foreground voxels with at least one background 6-neighbour (out-of-grid is background)."""
    bits = np.asarray(bits, dtype=bool)
    return bits & ~ndimage.binary_erosion(bits, structure=_CROSS, border_value=0)


def hd95(a: LabelMask, b: LabelMask, spacing_mm=None) -> float:
    """95th percentile (nearest rank) of pooled symmetric surface distances, in mm."""
    _same_dims(a, b)
    if not a.bits.any() or not b.bits.any():
        raise ValueError("hd95 is undefined when either mask is empty")
    spacing = np.asarray(_check_triple("spacing_mm", spacing_mm or a.spacing_mm, positive=True))
    pa = np.argwhere(surface_voxels(a.bits)) * spacing
    pb = np.argwhere(surface_voxels(b.bits)) * spacing
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return nearest_rank(np.concatenate([d_ab, d_ba]), 0.95)


# -- RVOL files ------------------------------------------------------------------

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _spatial_reversed(ndim):
    lead = ndim - 3
    return tuple(range(lead)) + (ndim - 1, ndim - 2, ndim - 3)


def rvol_paths(path):
    """Return ``(sidecar.json, payload.raw)`` for either path of an RVOL pair."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".raw") else path
    return stem.with_suffix(".json"), stem.with_suffix(".raw")


def write_raw_array(path, data, spacing_mm, dtype, extra=None):
    """Write an x-fastest array (spatial axes last three) as an RVOL pair."""
    meta_path, raw_path = rvol_paths(path)
    data = np.asarray(data)
    header = {
        "dims": [int(n) for n in data.shape[-3:]],
        "spacing_mm": [float(s) for s in spacing_mm],
        "dtype": dtype,
        "order": "x-fastest",
    }
    header.update(extra or {})
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    meta_path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    # x-fastest within each spatial block; leading (channel) axes stay slowest.
    flat = np.transpose(data, _spatial_reversed(data.ndim)).astype(_DTYPES[dtype])
    raw_path.write_bytes(np.ascontiguousarray(flat).tobytes())
    return meta_path


def read_raw_array(path, leading=()):
    """Read an RVOL pair; returns ``(header, array)`` with shape ``leading + dims``."""
    meta_path, raw_path = rvol_paths(path)
    try:
        header = json.loads(meta_path.read_text())
        dims = tuple(int(n) for n in header["dims"])
        dtype = _DTYPES[header["dtype"]]
        spacing = header["spacing_mm"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"{meta_path}: bad RVOL sidecar ({exc})") from exc
    if header.get("order", "x-fastest") != "x-fastest":
        raise DataFormatError(f"{meta_path}: unsupported order {header['order']!r}")
    if len(dims) != 3 or min(dims) < 1 or len(spacing) != 3:
        raise DataFormatError(f"{meta_path}: dims/spacing must be positive triples")
    shape = tuple(leading) + dims
    try:
        payload = raw_path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"{raw_path}: {exc}") from exc
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise DataFormatError(f"{raw_path}: payload has {len(payload)} bytes, expected {expected}")
    flat = np.frombuffer(payload, dtype=dtype).reshape(tuple(leading) + dims[::-1])
    return header, np.transpose(flat, _spatial_reversed(len(shape)))


def write_rvol(path, grid):
    if isinstance(grid, LabelMask):
        return write_raw_array(path, grid.bits.astype(np.uint8), grid.spacing_mm, "u8")
    return write_raw_array(path, grid.values, grid.spacing_mm, "f32")


def read_rvol(path):
    """Load an RVOL pair: ``u8`` payloads become LabelMask, ``f32`` become VolumeGrid."""
    header, data = read_raw_array(path)
    spacing = tuple(header["spacing_mm"])
    try:
        if header["dtype"] == "u8":
            if data.max(initial=0) > 1:
                raise DataFormatError(f"{path}: mask payload must be 0/1")
            return LabelMask(data.astype(bool), spacing)
        if not np.all(np.isfinite(data)):
            raise DataFormatError(f"{path}: non-finite intensities")
        return VolumeGrid(data, spacing)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
