"""Tumor-anchored and background ROI geometry."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NoSegmentation
from .grid3d import BoxRegion, LabelMask, VolumeGrid, connected_components

TUMOR_ANCHORED = "tumor_anchored"
BACKGROUND = "background"

MAX_BACKGROUND_TUMOR_FRACTION = 0.10
MAX_BACKGROUND_ATTEMPTS = 100


@dataclass(frozen=True)
class RoiConfig:
    n_rois: int = 4
    crop_size_vox: int = 128
    rng_seed: int = 0
    connectivity: int = 26

    def __post_init__(self):
        if self.n_rois < 1:
            raise ValueError(f"n_rois must be >= 1, got {self.n_rois}")
        if self.crop_size_vox < 8:
            raise ValueError(f"crop_size_vox must be >= 8, got {self.crop_size_vox}")


@dataclass(frozen=True)
class RoiSpec:
    box: BoxRegion
    anchor_component: int | None
    kind: str
    seed_draw: int
    metadata: dict = field(default_factory=dict, compare=False)

    def to_record(self, scan_id):
        rec = {
            "scan_id": scan_id,
            "kind": self.kind,
            "corner": list(self.box.corner),
            "size": list(self.box.size),
            "anchor_component": self.anchor_component,
            "seed_draw": self.seed_draw,
        }
        rec.update(self.metadata)
        return rec


def _crop_extent(crop, dim):
    # Grids smaller than the crop can only hold a crop as large as themselves.
    return min(crop, dim)


def _anchor_axis(rng, b0, bs, extent, dim):
    """Corner along one axis for a crop of ``extent`` that should contain [b0, b0+bs)."""
    if bs > extent:
        # Oversized lesion: center on the bbox, then clamp.
        corner = int(np.floor(b0 + bs / 2.0 - extent / 2.0))
        return min(max(corner, 0), dim - extent)
    lo = max(b0 + bs - extent, 0)
    hi = min(b0, dim - extent)
    if lo > hi:
        # No in-grid corner keeps the bbox inside; clamp the nearest containing corner.
        return min(max(b0 + bs - extent, 0), dim - extent)
    return int(rng.integers(lo, hi + 1))


def anchor_rois(mask: LabelMask, grid_dims, cfg: RoiConfig, rng) -> list[RoiSpec]:
    """Place ``cfg.n_rois`` crops so each contains a predicted tumor component.

    Components are visited largest first and assigned round-robin. Along each
    axis where the component's bbox fits in the crop, the corner is drawn
    uniformly from the in-grid corners that keep the bbox inside the crop;
    otherwise the crop is centered on the bbox.
    """
    dims = tuple(int(d) for d in grid_dims)
    if tuple(mask.dims) != dims:
        raise ValueError(f"mask dims {mask.dims} do not match grid dims {dims}")
    comps = connected_components(mask, cfg.connectivity)
    if not comps:
        raise NoSegmentation("no predicted tumor voxels; cannot anchor ROIs")
    extent = tuple(_crop_extent(cfg.crop_size_vox, d) for d in dims)
    rois = []
    for draw in range(cfg.n_rois):
        ci = draw % len(comps)
        bbox = comps[ci].bbox
        corner = [
            _anchor_axis(rng, b0, bs, e, d) for b0, bs, e, d in zip(bbox.corner, bbox.size, extent, dims)
        ]
        box = BoxRegion(corner, extent)
        rois.append(RoiSpec(box, ci, TUMOR_ANCHORED, draw, {"contains_anchor": box.contains(bbox)}))
    return rois


def _box_fraction(bits, box):
    return float(bits[box.slices()].mean())


def sample_background_rois(mask: LabelMask, grid_dims, n: int, cfg: RoiConfig, rng) -> list[RoiSpec]:
    """Draw ``n`` crops uniformly over the grid, avoiding predicted tumor.

    A draw with more than 10% tumor voxels is rejected and redrawn; after 100
    attempts the least-overlapping draw is kept and flagged with
    ``overlap_violation`` in its metadata.
    """
    dims = tuple(int(d) for d in grid_dims)
    c = cfg.crop_size_vox
    if any(d < c for d in dims):
        raise ValueError(f"grid {dims} is smaller than the crop size {c}")
    if tuple(mask.dims) != dims:
        raise ValueError(f"mask dims {mask.dims} do not match grid dims {dims}")
    rois = []
    for draw in range(n):
        best = None
        for attempt in range(MAX_BACKGROUND_ATTEMPTS):
            corner = [int(rng.integers(0, d - c + 1)) for d in dims]
            box = BoxRegion(corner, (c, c, c))
            frac = _box_fraction(mask.bits, box)
            if best is None or frac < best[1]:
                best = (box, frac)
            if frac <= MAX_BACKGROUND_TUMOR_FRACTION:
                break
        box, frac = best
        meta = {
            "tumor_fraction": frac,
            "attempts": attempt + 1,
            "overlap_violation": frac > MAX_BACKGROUND_TUMOR_FRACTION,
        }
        rois.append(RoiSpec(box, None, BACKGROUND, draw, meta))
    return rois


def crop(volume: VolumeGrid, box: BoxRegion, pad_value=0.0) -> VolumeGrid:
    """Extract ``box`` from ``volume``; parts outside the grid are filled with ``pad_value``."""
    out = np.full(box.size, pad_value, dtype=np.float32)
    src, dst = [], []
    for c, s, d in zip(box.corner, box.size, volume.dims):
        lo, hi = max(c, 0), min(c + s, d)
        if lo >= hi:
            return VolumeGrid(out, volume.spacing_mm)
        src.append(slice(lo, hi))
        dst.append(slice(lo - c, hi - c))
    out[tuple(dst)] = volume.values[tuple(src)]
    return VolumeGrid(out, volume.spacing_mm)


def write_manifest(path, scan_id, rois):
    """Write ROI specs as JSON lines, one record per ROI."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for roi in rois:
            fh.write(json.dumps(roi.to_record(scan_id), sort_keys=True) + "\n")


def read_manifest(path):
    """Returns a list of ``(scan_id, RoiSpec)``."""
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        scan_id = rec.pop("scan_id")
        box = BoxRegion(rec.pop("corner"), rec.pop("size"))
        out.append(
            (scan_id, RoiSpec(box, rec.pop("anchor_component"), rec.pop("kind"), rec.pop("seed_draw"), rec))
        )
    return out
