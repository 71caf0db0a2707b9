"""Pooled encoder descriptors: GAP over stage maps, stage slicing, tables and a synthetic generator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._seeding import make_rng
from .errors import DataFormatError
from .grid3d import read_raw_array, rvol_paths, write_raw_array

STAGE_WIDTHS = (48, 96, 192, 384, 768)
STAGE_OFFSETS = tuple(int(o) for o in np.cumsum((0,) + STAGE_WIDTHS[:-1]))
FULL_DIM = sum(STAGE_WIDTHS)  # 1488

ID_LABEL, OOD_LABEL = 0, 1
ID_TAG = "ID"
BACKGROUND_TAG = "BACKGROUND"


@dataclass(frozen=True)
class StageSelection:
    included_stages: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        stages = tuple(sorted(set(int(s) for s in self.included_stages)))
        if not stages:
            raise ValueError("stage selection must be nonempty")
        bad = [s for s in stages if not 0 <= s < len(STAGE_WIDTHS)]
        if bad:
            raise ValueError(f"unknown encoder stages {bad}")
        object.__setattr__(self, "included_stages", stages)

    @classmethod
    def parse(cls, text):
        """``"all"`` or a comma list such as ``"1,2"``."""
        if text in (None, "", "all"):
            return cls()
        return cls(tuple(int(t) for t in str(text).split(",") if t.strip()))

    @property
    def dim(self):
        return sum(STAGE_WIDTHS[s] for s in self.included_stages)

    def indices(self):
        return np.concatenate(
            [np.arange(STAGE_OFFSETS[s], STAGE_OFFSETS[s] + STAGE_WIDTHS[s]) for s in self.included_stages]
        )


@dataclass(frozen=True)
class StageFeatureMap:
    stage_index: int
    values: np.ndarray  # (channels, *grid)

    def __post_init__(self):
        if not 0 <= self.stage_index < len(STAGE_WIDTHS):
            raise ValueError(f"stage_index must be in 0..4, got {self.stage_index}")
        values = np.asarray(self.values)
        if values.ndim < 2 or values.shape[0] != STAGE_WIDTHS[self.stage_index]:
            raise ValueError(
                f"stage {self.stage_index} expects {STAGE_WIDTHS[self.stage_index]} channels, "
                f"got array of shape {values.shape}"
            )
        if values[0].size == 0:
            raise ValueError("feature map has an empty spatial grid")
        object.__setattr__(self, "values", values)

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def grid(self):
        return self.values.shape[1:]


def gap_pool(maps, selection: StageSelection = StageSelection()) -> np.ndarray:
    """Global average pool each selected stage map and concatenate in stage order."""
    by_stage = {}
    for m in maps:
        by_stage[m.stage_index] = m
    parts = []
    for s in selection.included_stages:
        if s not in by_stage:
            raise ValueError(f"missing feature map for selected stage {s}")
        v = by_stage[s].values.reshape(STAGE_WIDTHS[s], -1).astype(np.float64)
        if not np.all(np.isfinite(v)):
            raise ValueError(f"stage {s} feature map has non-finite values")
        parts.append(v.mean(axis=1))
    return np.concatenate(parts)


def stage_subset(vector, selection: StageSelection) -> np.ndarray:
    """Slice selected stages out of a full 1488-long descriptor (or a matrix of them)."""
    vector = np.asarray(vector)
    if vector.shape[-1] != FULL_DIM:
        raise ValueError(f"stage_subset needs full-length ({FULL_DIM}) descriptors, got {vector.shape[-1]}")
    return vector[..., selection.indices()]


def read_stage_map(path):
    """Load a channel-major stage map stored as an RVOL pair with ``stage``/``channels`` keys."""
    meta_path, _ = rvol_paths(path)
    try:
        header = json.loads(meta_path.read_text())
        stage, channels = int(header["stage"]), int(header["channels"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"{meta_path}: not a stage-map sidecar ({exc})") from exc
    _, data = read_raw_array(path, leading=(channels,))
    try:
        return StageFeatureMap(stage, data)
    except ValueError as exc:
        raise DataFormatError(f"{meta_path}: {exc}") from exc


def write_stage_map(path, fmap: StageFeatureMap):
    return write_raw_array(
        path,
        fmap.values,
        (1.0, 1.0, 1.0),
        "f32",
        extra={"stage": fmap.stage_index, "channels": fmap.channels},
    )


# -- descriptor sets -----------------------------------------------------------


@dataclass(frozen=True)
class ScanDescriptor:
    scan_id: str
    roi_index: int
    dataset_tag: str
    label: int
    vector: np.ndarray


@dataclass
class DescriptorSet:
    """Rows of ROI descriptors with scan/cohort provenance. ``X`` is float32."""

    X: np.ndarray
    scan_id: np.ndarray
    roi_index: np.ndarray
    dataset: np.ndarray
    label: np.ndarray
    kind: np.ndarray = field(default=None)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float32)
        if self.X.ndim != 2:
            self.X = self.X.reshape(len(self.X), -1) if self.X.size else np.zeros((0, 0), np.float32)
        n = self.X.shape[0]
        self.scan_id = np.asarray(self.scan_id, dtype=object).reshape(n)
        self.roi_index = np.asarray(self.roi_index, dtype=np.int64).reshape(n)
        self.dataset = np.asarray(self.dataset, dtype=object).reshape(n)
        self.label = np.asarray(self.label, dtype=np.int8).reshape(n)
        if self.kind is None:
            self.kind = np.full(n, "tumor_anchored", dtype=object)
        self.kind = np.asarray(self.kind, dtype=object).reshape(n)
        if not np.all(np.isfinite(self.X)):
            raise DataFormatError("descriptor matrix contains non-finite values")
        if n and not np.all(np.isin(self.label, (ID_LABEL, OOD_LABEL))):
            raise DataFormatError("labels must be 0 (ID) or 1 (OOD)")

    def __len__(self):
        return self.X.shape[0]

    def __getitem__(self, i):
        return ScanDescriptor(self.scan_id[i], int(self.roi_index[i]), self.dataset[i], int(self.label[i]), self.X[i])

    @property
    def dim(self):
        return self.X.shape[1]

    def take(self, rows):
        rows = np.asarray(rows)
        if rows.dtype != bool:
            rows = rows.astype(np.intp)
        return DescriptorSet(
            self.X[rows], self.scan_id[rows], self.roi_index[rows], self.dataset[rows], self.label[rows], self.kind[rows]
        )

    def where(self, **criteria):
        keep = np.ones(len(self), bool)
        for name, value in criteria.items():
            col = getattr(self, name)
            keep &= np.isin(col, value if isinstance(value, (list, tuple, set)) else [value])
        return self.take(np.flatnonzero(keep))

    def select_features(self, indices):
        out = self.take(np.arange(len(self)))
        out.X = np.ascontiguousarray(self.X[:, np.asarray(indices)])
        return out

    def datasets(self):
        return sorted(set(self.dataset.tolist()))

    def scans(self):
        """Unique scan ids in first-appearance order."""
        return list(dict.fromkeys(self.scan_id.tolist()))

    def take_scans(self, scan_ids):
        return self.take(np.flatnonzero(np.isin(self.scan_id, list(scan_ids))))

    def groups(self):
        """Map scan_id -> row indices."""
        out = {}
        for i, s in enumerate(self.scan_id.tolist()):
            out.setdefault(s, []).append(i)
        return {s: np.asarray(v) for s, v in out.items()}

    @staticmethod
    def concat(sets):
        sets = [s for s in sets if len(s)]
        if not sets:
            return empty_set()
        dims = {s.dim for s in sets}
        if len(dims) != 1:
            raise ValueError(f"descriptor sets have different dims {sorted(dims)}")
        return DescriptorSet(
            np.concatenate([s.X for s in sets]),
            np.concatenate([s.scan_id for s in sets]),
            np.concatenate([s.roi_index for s in sets]),
            np.concatenate([s.dataset for s in sets]),
            np.concatenate([s.label for s in sets]),
            np.concatenate([s.kind for s in sets]),
        )


def empty_set(dim=0):
    return DescriptorSet(np.zeros((0, dim), np.float32), [], [], [], [])


# -- synthetic descriptors ------------------------------------------------------

DEFAULT_COHORTS = (("RSNA-PE", 0.5), ("MIDRC-C19", 0.5), ("KiTS", 3.0), ("PancreasCT", 3.0))


@dataclass(frozen=True)
class SynthConfig:
    """Desk-scale stand-in for encoder descriptors.

    Every scan contributes ``n_rois`` rows. A row is ``scan_center + roi_noise``
    where both terms are diagonal Gaussians and the per-dimension standard
    deviation is ``overlap * scale_j`` (``scale_j`` log-normal around 1,
    shared by all cohorts). Each OOD cohort shifts its own random
    ``informative_fraction`` of dimensions by ``shift * overlap * scale_j`` with
    random signs. Background rows (for LODO+) are ID-like scans whose ROIs are
    each shifted by ``background_shift`` standard deviations on a fresh random
    ``background_fraction`` of dimensions (``None`` reuses
    ``informative_fraction``).
    """

    dim: int = FULL_DIM
    n_id: int = 200
    n_ood: int = 150
    cohorts: tuple = DEFAULT_COHORTS
    overlap: float = 1.0
    informative_fraction: float = 0.05
    n_rois: int = 4
    roi_correlation: float = 0.5
    scale_spread: float = 0.5
    n_background: int = 0
    background_shift: float = 3.0
    background_fraction: float | None = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.informative_fraction <= 1:
            raise ValueError("informative_fraction must be in (0, 1]")
        if any(shift < 0 for _, shift in self.cohorts):
            raise ValueError("cohort shifts must be >= 0")
        if self.overlap <= 0 or self.dim < 1 or self.n_rois < 1:
            raise ValueError("overlap, dim and n_rois must be positive")
        if not 0 <= self.roi_correlation <= 1:
            raise ValueError("roi_correlation must be in [0, 1]")
        object.__setattr__(self, "cohorts", tuple((str(n), float(s)) for n, s in self.cohorts))

    @property
    def n_informative(self):
        return max(1, int(round(self.informative_fraction * self.dim)))

    def cohort_means(self):
        """``{name: mean vector}`` for every OOD cohort (ID is the zero vector)."""
        scale = self._scale()
        out = {}
        for name, shift in self.cohorts:
            rng = make_rng(self.rng_seed, "synth-dims", name)
            dims = rng.choice(self.dim, self.n_informative, replace=False)
            signs = rng.choice([-1.0, 1.0], self.n_informative)
            mean = np.zeros(self.dim)
            mean[dims] = signs * shift * self.overlap * scale[dims]
            out[name] = mean
        return out

    def _scale(self):
        rng = make_rng(self.rng_seed, "synth-scale")
        return np.exp(self.scale_spread * rng.standard_normal(self.dim))


def _draw_scans(cfg, rng, mean, sd, n_scans, tag, label, prefix, kind="tumor_anchored", roi_shift=None):
    r = cfg.n_rois
    rho = cfg.roi_correlation
    centers = mean + math.sqrt(rho) * sd * rng.standard_normal((n_scans, cfg.dim))
    noise = math.sqrt(1.0 - rho) * sd * rng.standard_normal((n_scans, r, cfg.dim))
    X = centers[:, None, :] + noise
    if roi_shift is not None:
        X = X + roi_shift(rng, n_scans, r).reshape(n_scans, r, cfg.dim)
    ids = [f"{prefix}{i:05d}" for i in range(n_scans)]
    return DescriptorSet(
        X.reshape(n_scans * r, cfg.dim),
        np.repeat(ids, r),
        np.tile(np.arange(r), n_scans),
        np.full(n_scans * r, tag, dtype=object),
        np.full(n_scans * r, label),
        np.full(n_scans * r, kind, dtype=object),
    )


def synth_generate(cfg: SynthConfig) -> dict[str, DescriptorSet]:
    """Generate ``{"ID": ..., cohort: ..., ["BACKGROUND": ...]}`` descriptor sets."""
    sd = cfg.overlap * cfg._scale()
    out = {ID_TAG: _draw_scans(cfg, make_rng(cfg.rng_seed, "synth", ID_TAG), 0.0, sd, cfg.n_id, ID_TAG, ID_LABEL, "id-")}
    for name, mean in cfg.cohort_means().items():
        rng = make_rng(cfg.rng_seed, "synth", name)
        out[name] = _draw_scans(cfg, rng, mean, sd, cfg.n_ood, name, OOD_LABEL, f"{name.lower()}-")
    if cfg.n_background:
        frac = cfg.informative_fraction if cfg.background_fraction is None else cfg.background_fraction
        k = max(1, int(round(frac * cfg.dim)))

        def roi_shift(rng, n_scans, r):
            shifts = np.zeros((n_scans * r, cfg.dim))
            for row in shifts:
                dims = rng.choice(cfg.dim, k, replace=False)
                row[dims] = rng.choice([-1.0, 1.0], k) * cfg.background_shift * sd[dims]
            return shifts

        rng = make_rng(cfg.rng_seed, "synth", BACKGROUND_TAG)
        out[BACKGROUND_TAG] = _draw_scans(
            cfg, rng, 0.0, sd, cfg.n_background, BACKGROUND_TAG, OOD_LABEL, "bg-", "background", roi_shift
        )
    return out


# -- feature tables -------------------------------------------------------------

_META_COLS = ["scan_id", "roi_index", "dataset", "label"]


def feature_columns(dim):
    return [f"f{j:04d}" for j in range(dim)]


def save_feature_table(dset: DescriptorSet, path):
    """Write a table; ``.csv`` gives text, anything else the binary variant."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".csv":
        _save_csv(dset, path)
    else:
        _save_binary(dset, path)
    return path


def load_feature_table(path) -> DescriptorSet:
    path = Path(path)
    if path.suffix == ".csv":
        return _load_csv(path)
    return _load_binary(path)


def _save_csv(dset, path):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_META_COLS + feature_columns(dset.dim))
        for i in range(len(dset)):
            row = [dset.scan_id[i], int(dset.roi_index[i]), dset.dataset[i], int(dset.label[i])]
            # repr of the float64 image of a float32 round-trips exactly.
            row.extend(repr(float(v)) for v in dset.X[i])
            w.writerow(row)


def _load_csv(path):
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file (missing header)") from None
        if header[:4] != _META_COLS or header[4:] != feature_columns(len(header) - 4):
            raise DataFormatError(f"{path}: malformed header")
        dim = len(header) - 4
        cols = {k: [] for k in _META_COLS}
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise DataFormatError(f"{path}: row {lineno} has {len(rec)} fields, expected {len(header)}")
            try:
                vec = [float(v) for v in rec[4:]]
                cols["roi_index"].append(int(rec[1]))
                cols["label"].append(int(rec[3]))
            except ValueError as exc:
                raise DataFormatError(f"{path}: row {lineno}: {exc}") from exc
            if not all(math.isfinite(v) for v in vec):
                raise DataFormatError(f"{path}: row {lineno} has non-finite values")
            cols["scan_id"].append(rec[0])
            cols["dataset"].append(rec[2])
            rows.append(vec)
    X = np.asarray(rows, dtype=np.float32).reshape(len(rows), dim)
    return DescriptorSet(X, cols["scan_id"], cols["roi_index"], cols["dataset"], cols["label"])


def _save_binary(dset, path):
    header = {
        "format": "scanood-feature-table",
        "version": 1,
        "rows": len(dset),
        "dim": dset.dim,
        "scan_id": [str(s) for s in dset.scan_id],
        "roi_index": [int(v) for v in dset.roi_index],
        "dataset": [str(s) for s in dset.dataset],
        "label": [int(v) for v in dset.label],
        "kind": [str(s) for s in dset.kind],
    }
    with path.open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(dset.X, dtype="<f4").tobytes())


def _load_binary(path):
    with path.open("rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line)
        n, dim = int(header["rows"]), int(header["dim"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"{path}: malformed header ({exc})") from exc
    if len(payload) != n * dim * 4:
        raise DataFormatError(f"{path}: payload has {len(payload)} bytes, expected {n * dim * 4}")
    X = np.frombuffer(payload, dtype="<f4").reshape(n, dim).astype(np.float32)
    if not np.all(np.isfinite(X)):
        raise DataFormatError(f"{path}: non-finite entries")
    return DescriptorSet(
        X, header["scan_id"], header["roi_index"], header["dataset"], header["label"], header.get("kind")
    )
