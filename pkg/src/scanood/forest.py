"""Random forest classifier written from scratch.

CART trees on weighted Gini impurity, grown on bootstrap resamples with a
random subset of ceil(sqrt(d)) candidate features per node. Binary labels
only (0 = ID, 1 = OOD). Split search and prediction run in numba kernels
that release the GIL, so trees can be grown on a thread pool; each tree
draws from its own seed derived from ``(rng_seed, tree_index)`` and the
result is identical for any thread count.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np

from ._seeding import derive_seed, make_rng
from .errors import DataFormatError, SingleClassError

FORMAT_NAME = "scanood-forest"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    """Forest hyper-parameters.

    The defaults (1000 trees, depth 20, balanced class weights, Gini,
    ceil(sqrt(d)) features per split, bootstrap of size n, min_samples_leaf 1)
    are the shipped configuration. ``max_depth=None`` grows until pure.
    """

    n_trees: int = 1000
    max_depth: int | None = 20
    class_weight: str = "balanced"
    features_per_split: str | int = "sqrt"
    min_samples_leaf: int = 1
    bootstrap: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError(f"max_depth must be >= 1 or None, got {self.max_depth}")
        if self.class_weight not in ("balanced", "uniform"):
            raise ValueError(f"class_weight must be 'balanced' or 'uniform', got {self.class_weight!r}")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        fps = self.features_per_split
        if isinstance(fps, str):
            if fps not in ("sqrt", "all"):
                raise ValueError(f"features_per_split must be 'sqrt', 'all' or an int, got {fps!r}")
        elif int(fps) < 1:
            raise ValueError("features_per_split must be >= 1")

    def n_split_features(self, d):
        fps = self.features_per_split
        if fps == "sqrt":
            return max(1, math.ceil(math.sqrt(d)))
        if fps == "all":
            return d
        return min(int(fps), d)

    def replace(self, **changes):
        return ForestParams(**{**asdict(self), **changes})


@dataclass(frozen=True)
class Tree:
    """Flat node arrays; ``feature[i] == -1`` marks a leaf.

    ``value[i]`` holds the weighted (class 0, class 1) mass reaching node i
    and ``gain[i]`` the weighted Gini decrease of its split.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self):
        return int(self.feature.shape[0])

    def depth(self):
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def leaf_proba(self):
        tot = self.value.sum(axis=1)
        return np.divide(self.value[:, 1], tot, out=np.zeros_like(tot), where=tot > 0)


# -- kernels -------------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _grow(X, y, w, samples, max_depth, min_leaf, n_feat, seed):
    np.random.seed(seed)
    n_s = samples.shape[0]
    d = X.shape[1]
    cap = 2 * n_s + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros((cap, 2))
    gain = np.zeros(cap)

    samples = samples.copy()
    tmp = np.empty(n_s, np.int64)
    vals = np.empty(n_s)
    features = np.arange(d)

    st_node = np.empty(cap, np.int64)
    st_start = np.empty(cap, np.int64)
    st_end = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    top = 1
    st_node[0], st_start[0], st_end[0], st_depth[0] = 0, 0, n_s, 0
    n_nodes = 1

    while top > 0:
        top -= 1
        node, start, end, depth = st_node[top], st_start[top], st_end[top], st_depth[top]
        w0 = 0.0
        w1 = 0.0
        for i in range(start, end):
            s = samples[i]
            if y[s] == 1:
                w1 += w[s]
            else:
                w0 += w[s]
        value[node, 0] = w0
        value[node, 1] = w1
        m = end - start
        if depth >= max_depth or w0 == 0.0 or w1 == 0.0 or m < 2 * min_leaf:
            continue
        W = w0 + w1
        tol = 1e-12 * W
        parent = (w0 * w0 + w1 * w1) / W

        best = -np.inf
        best_f = -1
        best_thr = 0.0
        for t in range(n_feat):
            j = t + np.random.randint(0, d - t)
            f = features[j]
            features[j] = features[t]
            features[t] = f
            for i in range(m):
                vals[i] = X[samples[start + i], f]
            order = np.argsort(vals[:m], kind="mergesort")
            l0 = 0.0
            l1 = 0.0
            for p in range(m - 1):
                s = samples[start + order[p]]
                if y[s] == 1:
                    l1 += w[s]
                else:
                    l0 += w[s]
                lo = vals[order[p]]
                hi = vals[order[p + 1]]
                if hi <= lo or p + 1 < min_leaf or m - p - 1 < min_leaf:
                    continue
                wl = l0 + l1
                r0 = w0 - l0
                r1 = w1 - l1
                wr = r0 + r1
                if wl <= 0.0 or wr <= 0.0:
                    continue
                proxy = (l0 * l0 + l1 * l1) / wl + (r0 * r0 + r1 * r1) / wr
                thr = lo / 2.0 + hi / 2.0
                if thr >= hi or thr < lo:
                    thr = lo
                if proxy > best + tol:
                    best, best_f, best_thr = proxy, f, thr
                elif proxy >= best - tol and (f < best_f or (f == best_f and thr < best_thr)):
                    best, best_f, best_thr = proxy, f, thr

        if best_f < 0 or best - parent <= tol:
            continue

        # Stable partition: <= threshold goes left.
        nl = 0
        nr = 0
        for i in range(start, end):
            s = samples[i]
            if X[s, best_f] <= best_thr:
                samples[start + nl] = s
                nl += 1
            else:
                tmp[nr] = s
                nr += 1
        for i in range(nr):
            samples[start + nl + i] = tmp[i]

        feature[node] = best_f
        threshold[node] = best_thr
        gain[node] = best - parent
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        # Right pushed first so the left child is expanded next.
        st_node[top], st_start[top], st_end[top], st_depth[top] = rc, start + nl, end, depth + 1
        top += 1
        st_node[top], st_start[top], st_end[top], st_depth[top] = lc, start, start + nl, depth + 1
        top += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        gain[:n_nodes].copy(),
    )


@numba.njit(cache=True, nogil=True)
def _predict(X, feature, threshold, left, right, prob, roots, out):
    n_trees = roots.shape[0]
    for i in range(X.shape[0]):
        acc = 0.0
        for t in range(n_trees):
            node = roots[t]
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            acc += prob[node]
        out[i] = acc / n_trees


@numba.njit(cache=True, nogil=True)
def _leaf_index(X, feature, threshold, left, right, root, out):
    for i in range(X.shape[0]):
        node = root
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node


# -- model ---------------------------------------------------------------------


def balanced_weights(y):
    """Per-sample weights ``n / (2 * n_class(y_i))`` from the full label vector."""
    y = np.asarray(y)
    n = y.shape[0]
    counts = np.bincount(y.astype(np.int64), minlength=2)
    per_class = n / (2.0 * counts.astype(np.float64))
    return per_class[y.astype(np.int64)], per_class


@dataclass
class ForestModel:
    trees: list[Tree]
    params: ForestParams
    feature_dim: int
    class_priors_used: tuple[float, float]
    _packed: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def n_trees(self):
        return len(self.trees)

    def _pack(self):
        if self._packed is None:
            offsets = np.cumsum([0] + [t.n_nodes for t in self.trees[:-1]]).astype(np.int64)
            feature = np.concatenate([t.feature for t in self.trees])
            threshold = np.concatenate([t.threshold for t in self.trees])
            left = np.concatenate([np.where(t.left >= 0, t.left + o, -1) for t, o in zip(self.trees, offsets)])
            right = np.concatenate([np.where(t.right >= 0, t.right + o, -1) for t, o in zip(self.trees, offsets)])
            prob = np.concatenate([t.leaf_proba() for t in self.trees])
            self._packed = (feature, threshold, left, right, prob, offsets)
        return self._packed

    def predict_proba(self, X):
        """Probability of class 1 (OOD): mean over trees of the leaf's weighted class-1 fraction.

        Accepts one vector or an ``(n, d)`` matrix.
        """
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim} features, got {X.shape[1]}")
        if not np.all(np.isfinite(X)):
            raise ValueError("input contains non-finite values")
        out = np.empty(X.shape[0])
        _predict(np.ascontiguousarray(X), *self._pack(), out)
        return float(out[0]) if single else out

    def apply(self, X, tree_index):
        """Leaf node index reached in one tree for each row."""
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        t = self.trees[tree_index]
        out = np.empty(X.shape[0], dtype=np.int64)
        _leaf_index(X, t.feature, t.threshold, t.left, t.right, 0, out)
        return out

    def feature_importances(self):
        return feature_importance(self)

    # -- persistence --

    def to_dict(self):
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "params": asdict(self.params),
            "feature_dim": self.feature_dim,
            "class_priors_used": list(self.class_priors_used),
            "trees": [
                {
                    "feature": t.feature.tolist(),
                    "threshold": t.threshold.tolist(),
                    "left": t.left.tolist(),
                    "right": t.right.tolist(),
                    "value": t.value.tolist(),
                    "gain": t.gain.tolist(),
                }
                for t in self.trees
            ],
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("format") != FORMAT_NAME:
            raise DataFormatError(f"not a forest model (format={data.get('format')!r})")
        if data.get("version") != FORMAT_VERSION:
            raise DataFormatError(f"unsupported forest model version {data.get('version')!r}")
        try:
            trees = [
                Tree(
                    np.asarray(t["feature"], dtype=np.int64),
                    np.asarray(t["threshold"], dtype=np.float64),
                    np.asarray(t["left"], dtype=np.int64),
                    np.asarray(t["right"], dtype=np.int64),
                    np.asarray(t["value"], dtype=np.float64).reshape(-1, 2),
                    np.asarray(t["gain"], dtype=np.float64),
                )
                for t in data["trees"]
            ]
            return cls(trees, ForestParams(**data["params"]), int(data["feature_dim"]), tuple(data["class_priors_used"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"malformed forest model: {exc}") from exc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")))

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise DataFormatError(f"{path}: {exc}") from exc
        return cls.from_dict(data)


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2:
        raise ValueError(f"X must be 2D, got shape {X.shape}")
    if y.shape != (X.shape[0],):
        raise ValueError(f"y has shape {y.shape}, expected ({X.shape[0]},)")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains NaN or infinite values")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    if np.unique(y).size < 2:
        raise SingleClassError("training labels contain a single class")
    return np.ascontiguousarray(X), y.astype(np.int8)


def fit(X, y, params: ForestParams = ForestParams(), n_threads=1) -> ForestModel:
    """Train a forest on ``X`` (n, d) and binary labels ``y``."""
    X, y = _check_xy(X, y)
    n, d = X.shape
    if params.class_weight == "balanced":
        base_w, per_class = balanced_weights(y)
    else:
        base_w, per_class = np.ones(n), np.ones(2)
    n_feat = params.n_split_features(d)
    max_depth = params.max_depth if params.max_depth is not None else 2**31
    all_rows = np.arange(n, dtype=np.int64)

    def grow(t):
        key = derive_seed(params.rng_seed, "tree", t)
        if params.bootstrap:
            counts = np.bincount(np.random.default_rng(key).integers(0, n, size=n), minlength=n)
            w = base_w * counts
            rows = np.flatnonzero(counts).astype(np.int64)
        else:
            w, rows = base_w, all_rows
        arrays = _grow(X, y, w, rows, max_depth, params.min_samples_leaf, n_feat, key % 2**32)
        return Tree(*arrays)

    if n_threads > 1 and params.n_trees > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            trees = list(pool.map(grow, range(params.n_trees)))
    else:
        trees = [grow(t) for t in range(params.n_trees)]
    return ForestModel(trees, params, d, (float(per_class[0]), float(per_class[1])))


def predict_proba(model: ForestModel, x):
    return model.predict_proba(x)


def feature_importance(model: ForestModel) -> np.ndarray:
    """Mean decrease in weighted Gini per feature, normalized to sum to 1.

    Each tree's decreases are scaled by its root mass and normalized before
    averaging. A forest of stumpless trees yields all zeros.
    """
    if model is None or not model.trees:
        raise ValueError("model is not trained")
    total = np.zeros(model.feature_dim)
    for t in model.trees:
        split = t.feature >= 0
        imp = np.bincount(t.feature[split], weights=t.gain[split], minlength=model.feature_dim)
        s = imp.sum()
        if s > 0:
            total += imp / s
    s = total.sum()
    return total / s if s > 0 else total


def permutation_importance(model: ForestModel, X, y, seed=0, n_repeats=5, features=None):
    """AUROC drop when one column is shuffled, averaged over ``n_repeats`` shuffles."""
    from .evaluation import auroc

    if model is None or not model.trees:
        raise ValueError("model is not trained")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    base = auroc(model.predict_proba(X)[y == 0], model.predict_proba(X)[y == 1])
    cols = range(X.shape[1]) if features is None else features
    out = np.zeros(X.shape[1])
    for j in cols:
        rng = make_rng(seed, "permute", j)
        drops = []
        for _ in range(n_repeats):
            Xp = X.copy()
            Xp[:, j] = rng.permutation(Xp[:, j])
            p = model.predict_proba(Xp)
            drops.append(base - auroc(p[y == 0], p[y == 1]))
        out[j] = float(np.mean(drops))
    return out


def rfe(X, y, params: ForestParams, target_k, step_fraction=0.1, n_threads=1):
    """Recursive feature elimination by impurity importance.

    Each round refits on the surviving columns and drops the
    ``ceil(step_fraction * remaining)`` least important ones (never going
    below ``target_k``). Returns surviving indices in original coordinates,
    sorted ascending.
    """
    X, y = _check_xy(X, y)
    d = X.shape[1]
    if not 1 <= target_k <= d:
        raise ValueError(f"target_k must be in [1, {d}], got {target_k}")
    if not 0 < step_fraction <= 1:
        raise ValueError("step_fraction must be in (0, 1]")
    keep = np.arange(d)
    while keep.size > target_k:
        model = fit(X[:, keep], y, params, n_threads=n_threads)
        imp = feature_importance(model)
        n_drop = min(math.ceil(step_fraction * keep.size), keep.size - target_k)
        # Stable sort: equal importances drop the lower original index first.
        drop = np.argsort(imp, kind="stable")[:n_drop]
        keep = np.delete(keep, drop)
    return keep
