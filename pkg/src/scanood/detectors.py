"""OOD detectors: RF-Deep, MD-Deep, logit-based scores and training strategies.

Every score is oriented so that higher means more OOD.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.special import expit

from ._seeding import derive_seed, make_rng
from .errors import DataFormatError, EstimationError, NoSegmentation
from .evaluation import ScoreRow
from .features import BACKGROUND_TAG, ID_LABEL, OOD_LABEL, DescriptorSet
from .forest import ForestModel, ForestParams, fit
from .grid3d import LabelMask, boundary_interior_split, read_raw_array, write_raw_array

BUNDLE_FORMAT = "scanood-detector"
BUNDLE_VERSION = 1


@dataclass(frozen=True)
class OodScore:
    scan_id: str
    method: str
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite OOD score for {self.scan_id}")


def _mean(values):
    # fsum is exactly rounded, so the mean does not depend on the order of values.
    values = [float(v) for v in values]
    if not values:
        raise NoSegmentation("no ROI descriptors to score")
    return math.fsum(values) / len(values)


# -- Mahalanobis ----------------------------------------------------------------


def ledoit_wolf(X):
    """Ledoit-Wolf shrinkage towards a scaled identity.

    Returns ``(sigma, delta)`` with ``sigma = (1 - delta) S + delta mu I``,
    where ``S`` is the empirical covariance divided by ``n`` and ``mu =
    trace(S) / d``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("ledoit_wolf needs an (n, d) matrix with n >= 2")
    if not np.all(np.isfinite(X)):
        raise ValueError("ledoit_wolf input contains non-finite values")
    n, d = X.shape
    Xc = X - X.mean(axis=0)
    S = Xc.T @ Xc / n
    mu = np.trace(S) / d
    target_gap = S - mu * np.eye(d)
    d2 = float(np.sum(target_gap**2))
    # sum_k ||x_k x_k^T - S||_F^2 = sum_k ||x_k||^4 - n ||S||_F^2
    sq = np.sum(Xc**2, axis=1)
    fourth = float(np.sum(sq**2))
    b_bar = fourth - n * float(np.sum(S**2))
    # The difference is exactly 0 when all centered rows are collinear with equal
    # norms (always the case for n = 2); drop the rounding residue.
    b_bar = b_bar / n**2 if b_bar > 1e-12 * fourth else 0.0
    delta = min(b_bar, d2) / d2 if d2 > 0 else 0.0
    sigma = (1.0 - delta) * S + delta * mu * np.eye(d)
    return sigma, delta


@dataclass
class GaussianOodModel:
    mean: np.ndarray
    covariance: np.ndarray
    shrinkage: float
    _chol: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        if self._chol is None:
            try:
                self._chol = linalg.cholesky(self.covariance, lower=True)
            except linalg.LinAlgError as exc:
                raise EstimationError(f"covariance is not positive definite (shrinkage={self.shrinkage})") from exc
            diag = np.abs(np.diag(self._chol))
            if diag.min() ** 2 <= 1e-12 * diag.max() ** 2:
                raise EstimationError(f"covariance is numerically singular (shrinkage={self.shrinkage})")

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def precision(self):
        inv = linalg.cho_solve((self._chol, True), np.eye(self.dim))
        return (inv + inv.T) / 2.0

    def distances(self, X):
        """Per-row Mahalanobis distance."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} features, got {X.shape[1]}")
        z = linalg.solve_triangular(self._chol, (X - self.mean).T, lower=True)
        return np.sqrt(np.sum(z * z, axis=0))


def md_fit(id_rois, shrinkage="auto") -> GaussianOodModel:
    """Fit a single Gaussian on ID descriptors.

    ``shrinkage="auto"`` uses the Ledoit-Wolf intensity; a number in [0, 1]
    forces it.
    """
    X = id_rois.X if isinstance(id_rois, DescriptorSet) else id_rois
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("md_fit needs at least 2 ID descriptors")
    sigma, delta = ledoit_wolf(X)
    if shrinkage != "auto":
        delta = float(shrinkage)
        if not 0.0 <= delta <= 1.0:
            raise ValueError("shrinkage must be in [0, 1]")
        S = np.cov(X, rowvar=False, bias=True).reshape(X.shape[1], X.shape[1])
        sigma = (1.0 - delta) * S + delta * np.trace(S) / X.shape[1] * np.eye(X.shape[1])
    return GaussianOodModel(X.mean(axis=0), sigma, delta)


def md_score(model: GaussianOodModel, scan_rois) -> float:
    """Mean Mahalanobis distance over a scan's ROI descriptors."""
    X = np.atleast_2d(np.asarray(scan_rois, dtype=np.float64))
    if X.shape[0] == 0:
        raise NoSegmentation("no ROI descriptors to score")
    return _mean(model.distances(X))


def save_gaussian(model: GaussianOodModel, path):
    """Header JSON plus a raw little-endian float64 blob ``[mean | covariance]``."""
    path = Path(path)
    header = {"format": "scanood-gaussian", "version": 1, "dim": model.dim, "shrinkage": model.shrinkage, "dtype": "<f8"}
    path.with_suffix(".json").write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    blob = np.concatenate([model.mean, model.covariance.ravel()]).astype("<f8")
    path.with_suffix(".bin").write_bytes(blob.tobytes())


def load_gaussian(path) -> GaussianOodModel:
    path = Path(path)
    try:
        header = json.loads(path.with_suffix(".json").read_text())
        d = int(header["dim"])
        blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    except (OSError, ValueError, KeyError) as exc:
        raise DataFormatError(f"{path}: unreadable Gaussian model ({exc})") from exc
    if blob.size != d + d * d:
        raise DataFormatError(f"{path}: blob has {blob.size} values, expected {d + d * d}")
    return GaussianOodModel(blob[:d].copy(), blob[d:].reshape(d, d).copy(), float(header["shrinkage"]))


# -- logit-based scores ----------------------------------------------------------


@dataclass(frozen=True)
class LogitVolume:
    """Background/tumor logits ``f0``, ``f1`` on one grid.

    The predicted tumor set is ``f1 >= f0`` (ties go to tumor). With
    ``threshold`` set, a voxel also needs softmax tumor probability >= threshold.
    """

    f0: np.ndarray
    f1: np.ndarray
    threshold: float | None = None

    def __post_init__(self):
        f0 = np.asarray(self.f0, dtype=np.float64)
        f1 = np.asarray(self.f1, dtype=np.float64)
        if f0.shape != f1.shape:
            raise ValueError(f"logit fields differ in shape: {f0.shape} vs {f1.shape}")
        if not (np.all(np.isfinite(f0)) and np.all(np.isfinite(f1))):
            raise ValueError("logits must be finite")
        object.__setattr__(self, "f0", f0)
        object.__setattr__(self, "f1", f1)

    @property
    def dims(self):
        return self.f0.shape

    def tumor_mask(self):
        bits = self.f1 >= self.f0
        if self.threshold is not None:
            bits &= expit(self.f1 - self.f0) >= self.threshold
        return bits

    def _tumor(self):
        bits = self.tumor_mask()
        if not bits.any():
            raise NoSegmentation("no voxel is predicted as tumor")
        return bits

    @classmethod
    def read(cls, path, threshold=None):
        """Two-channel RVOL (channel 0 = background, 1 = tumor)."""
        _, data = read_raw_array(path, leading=(2,))
        return cls(data[0], data[1], threshold)

    def write(self, path, spacing_mm=(1.0, 1.0, 1.0)):
        return write_raw_array(path, np.stack([self.f0, self.f1]), spacing_mm, "f32", extra={"channels": 2})


def maxsoftmax_score(lv: LogitVolume) -> float:
    bits = lv._tumor()
    return -_mean(expit(lv.f1[bits] - lv.f0[bits]))


def maxlogit_score(lv: LogitVolume) -> float:
    bits = lv._tumor()
    return -_mean(lv.f1[bits])


def energy_score(lv: LogitVolume) -> float:
    bits = lv._tumor()
    return -_mean(np.logaddexp(lv.f0[bits], lv.f1[bits]))


LOGIT_SCORES = {"maxsoftmax": maxsoftmax_score, "maxlogit": maxlogit_score, "energy": energy_score}


@dataclass(frozen=True)
class RegionStats:
    mean: float
    sd: float
    n_voxels: int


def _stats(values):
    return RegionStats(_mean(values), float(np.std(values)), int(values.size))


def boundary_interior_stats(lv: LogitVolume):
    """Raw tumor-logit mean and (population) sd over the predicted tumor, its
    boundary band and its interior. ``interior`` is None when erosion empties it."""
    bits = lv._tumor()
    split = boundary_interior_split(LabelMask(bits))
    boundary = bits & split.boundary.bits
    interior = bits & split.interior.bits
    return {
        "overall": _stats(lv.f1[bits]),
        "boundary": _stats(lv.f1[boundary]),
        "interior": None if split.interior_empty else _stats(lv.f1[interior]),
    }


# -- RF-Deep ---------------------------------------------------------------------


def rf_deep_train(id_rois: DescriptorSet, ood_rois: DescriptorSet, params: ForestParams = ForestParams(), n_threads=1):
    """Forest on individual ROI rows: ID rows labeled 0, OOD rows labeled 1."""
    if len(id_rois) == 0 or len(ood_rois) == 0:
        raise ValueError("rf_deep_train needs nonempty ID and OOD descriptor sets")
    if id_rois.dim != ood_rois.dim:
        raise ValueError(f"descriptor length mismatch: {id_rois.dim} vs {ood_rois.dim}")
    X = np.concatenate([id_rois.X, ood_rois.X])
    y = np.concatenate([np.full(len(id_rois), ID_LABEL), np.full(len(ood_rois), OOD_LABEL)])
    return fit(X, y, params, n_threads=n_threads)


def rf_deep_score(model: ForestModel, scan_rois) -> float:
    """Mean OOD probability over a scan's ROI descriptors."""
    X = np.atleast_2d(np.asarray(scan_rois, dtype=np.float64))
    if X.shape[0] == 0:
        raise NoSegmentation("no ROI descriptors to score")
    return _mean(model.predict_proba(X))


# -- training strategies -----------------------------------------------------------

MODES = ("dataset_specific", "ensemble", "unified", "lodo", "lodo_plus")
_ALIASES = {"ds": "dataset_specific", "lodo+": "lodo_plus"}


@dataclass(frozen=True)
class StrategyConfig:
    mode: str = "dataset_specific"
    held_out_dataset: str | None = None
    background_roi_count: int | None = None

    def __post_init__(self):
        mode = _ALIASES.get(self.mode, self.mode).replace("-", "_")
        if mode not in MODES:
            raise ValueError(f"unknown strategy {self.mode!r}; expected one of {', '.join(MODES)}")
        object.__setattr__(self, "mode", mode)
        if mode in ("lodo", "lodo_plus") and not self.held_out_dataset:
            raise ValueError(f"strategy {mode} needs a held-out dataset")
        if self.background_roi_count is not None and self.background_roi_count < 0:
            raise ValueError("background_roi_count must be >= 0")


def ood_datasets(dset: DescriptorSet):
    return sorted({d for d, lab in zip(dset.dataset, dset.label) if lab == OOD_LABEL and d != BACKGROUND_TAG})


@dataclass
class RfDetector:
    """Forests produced by one training strategy.

    ``forests`` maps a forest name (an OOD dataset for the dataset-specific
    mode, else the mode name) to a model; ``train_datasets`` records which
    dataset tags each forest saw.
    """

    config: StrategyConfig
    forests: dict
    train_datasets: dict
    stages: list | None = None

    @property
    def method(self):
        return f"rf-deep/{self.config.mode}"

    def targets(self, datasets):
        """``(target, forest names)`` pairs; an empty target means every cohort."""
        mode = self.config.mode
        if mode == "dataset_specific":
            return [(d, [d]) for d in sorted(self.forests) if d in datasets or not datasets]
        if mode == "ensemble":
            return [("", sorted(self.forests))]
        if mode == "unified":
            return [("", ["unified"])]
        return [(self.config.held_out_dataset, [mode])]

    def score_scan(self, X, names):
        return _mean([rf_deep_score(self.forests[n], X) for n in names])

    def score_table(self, dset: DescriptorSet):
        return _score_scans(dset, self.method, self.targets(set(ood_datasets(dset))), self.score_scan)


@dataclass
class MdDetector:
    model: GaussianOodModel
    stages: list | None = None
    method: str = "md-deep"

    def score_table(self, dset: DescriptorSet):
        return _score_scans(dset, self.method, [("", None)], lambda X, _: md_score(self.model, X))


def _score_scans(dset, method, targets, scorer):
    rows = []
    groups = dset.groups()
    for scan, idx in groups.items():
        ds = dset.dataset[idx[0]]
        label = int(dset.label[idx[0]])
        if ds == BACKGROUND_TAG:
            continue
        X = dset.X[idx]
        for target, names in targets:
            if target and label == OOD_LABEL and ds != target:
                continue
            rows.append(ScoreRow(str(scan), str(ds), label, method, scorer(X, names), target))
    return rows


def _forest_params(params: ForestParams, name):
    return params.replace(rng_seed=derive_seed(params.rng_seed, "forest", name))


def _fit_forest(train, name, ood_tags, params, n_threads, extra=None):
    id_rows = train.where(label=ID_LABEL)
    ood_rows = train.where(dataset=list(ood_tags))
    if extra is not None:
        ood_rows = DescriptorSet.concat([ood_rows, extra])
    if len(id_rows) == 0 or len(ood_rows) == 0:
        raise ValueError(f"forest {name!r} has an empty cohort")
    model = rf_deep_train(id_rows, ood_rows, _forest_params(params, name), n_threads)
    seen = sorted(set(id_rows.dataset.tolist()) | set(ood_rows.dataset.tolist()))
    return model, seen


def run_strategy(cfg: StrategyConfig, train: DescriptorSet, params: ForestParams = ForestParams(), n_threads=1):
    """Train the forests for one strategy from a pooled, labeled descriptor set.

    ``train`` holds ID rows (label 0), OOD cohorts (label 1, tagged by
    dataset) and, for LODO+, background rows tagged ``BACKGROUND`` which are
    added as OOD rows.
    """
    cohorts = ood_datasets(train)
    if not cohorts:
        raise ValueError("training data has no OOD cohort")
    if len(train.where(label=ID_LABEL)) == 0:
        raise ValueError("training data has no ID rows")
    mode = cfg.mode
    forests, seen = {}, {}
    if mode in ("dataset_specific", "ensemble"):
        for d in cohorts:
            forests[d], seen[d] = _fit_forest(train, d, [d], params, n_threads)
    elif mode == "unified":
        forests[mode], seen[mode] = _fit_forest(train, mode, cohorts, params, n_threads)
    else:
        held = cfg.held_out_dataset
        if held not in cohorts:
            raise ValueError(f"held-out dataset {held!r} is not among the OOD cohorts {cohorts}")
        if len(cohorts) < 2:
            raise ValueError("leave-one-dataset-out needs at least 2 OOD cohorts")
        extra = None
        if mode == "lodo_plus":
            bg = train.where(dataset=BACKGROUND_TAG)
            if len(bg) == 0:
                raise ValueError("lodo_plus needs background ROI rows in the training data")
            k = len(bg) if cfg.background_roi_count is None else min(cfg.background_roi_count, len(bg))
            pick = np.sort(make_rng(params.rng_seed, "background", held).choice(len(bg), k, replace=False))
            extra = bg.take(pick)
            extra.label[:] = OOD_LABEL
        forests[mode], seen[mode] = _fit_forest(train, mode, [d for d in cohorts if d != held], params, n_threads, extra)
        assert held not in seen[mode]
    return RfDetector(cfg, forests, seen)


# -- bundles ------------------------------------------------------------------------


def save_bundle(detector, directory):
    """Write a detector directory: ``manifest.json`` plus forest or Gaussian files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format": BUNDLE_FORMAT, "version": BUNDLE_VERSION, "stages": detector.stages}
    if isinstance(detector, RfDetector):
        files = {}
        for i, name in enumerate(sorted(detector.forests)):
            files[name] = f"forest_{i:02d}.json"
            detector.forests[name].save(directory / files[name])
        manifest.update(
            method="rf-deep",
            strategy=asdict(detector.config),
            forests=files,
            train_datasets=detector.train_datasets,
        )
    elif isinstance(detector, MdDetector):
        save_gaussian(detector.model, directory / "gaussian")
        manifest.update(method="md-deep", gaussian="gaussian.json")
    else:
        raise TypeError(f"cannot save {type(detector).__name__}")
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return directory


def load_bundle(directory):
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"{directory}: not a detector bundle ({exc})") from exc
    if manifest.get("format") != BUNDLE_FORMAT:
        raise DataFormatError(f"{directory}: unexpected bundle format {manifest.get('format')!r}")
    if manifest["method"] == "rf-deep":
        forests = {name: ForestModel.load(directory / f) for name, f in manifest["forests"].items()}
        return RfDetector(StrategyConfig(**manifest["strategy"]), forests, manifest["train_datasets"], manifest["stages"])
    if manifest["method"] == "md-deep":
        return MdDetector(load_gaussian(directory / "gaussian"), manifest["stages"])
    raise DataFormatError(f"{directory}: unknown method {manifest['method']!r}")
