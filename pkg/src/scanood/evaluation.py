"""OOD evaluation: AUROC, FPR95, balanced resampling, run-level CIs, rank tests, reports.

Scores are oriented so that higher means more OOD, and OOD is the positive
class. Percentiles are nearest-rank throughout.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from ._percentile import nearest_rank, nearest_rank_index
from ._seeding import make_rng
from .errors import DataFormatError

REPORT_FORMAT = "scanood-eval-report"
REPORT_VERSION = 1
CSV_HEADER = ["method", "dataset", "auroc", "auroc_lo", "auroc_hi", "fpr95", "fpr95_lo", "fpr95_hi", "n_runs"]


def _scores(values, name):
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{name} contains non-finite values")
    return values


def auroc(id_scores, ood_scores) -> float:
    """P(ood > id) + 0.5 P(ood == id), from rank sums with average ranks for ties."""
    id_scores = _scores(id_scores, "id_scores")
    ood_scores = _scores(ood_scores, "ood_scores")
    n_id, n_ood = id_scores.size, ood_scores.size
    ranks = rankdata(np.concatenate([id_scores, ood_scores]), method="average")
    u = ranks[n_id:].sum() - n_ood * (n_ood + 1) / 2.0
    return float(u / (n_id * n_ood))


def fpr_threshold(ood_scores, tpr_target=0.95):
    """Largest threshold t such that at least ``tpr_target`` of OOD scores are >= t."""
    ood = np.sort(_scores(ood_scores, "ood_scores"))[::-1]
    k = math.ceil(Fraction(str(tpr_target)) * ood.size)
    return float(ood[min(max(k, 1), ood.size) - 1])


def fpr_at_tpr(id_scores, ood_scores, tpr_target=0.95) -> float:
    """Fraction of ID scores at or above the FPR95-style threshold."""
    id_scores = _scores(id_scores, "id_scores")
    tau = fpr_threshold(ood_scores, tpr_target)
    return float(np.count_nonzero(id_scores >= tau) / id_scores.size)


@dataclass(frozen=True)
class EvalProtocol:
    n_id: int | None = 140
    n_draws: int = 10
    n_runs: int = 100
    ci_level: float = 0.95
    master_seed: int = 0
    ci_method: str = "percentile"
    tpr_target: float = 0.95

    def __post_init__(self):
        if self.n_runs < 1 or self.n_draws < 1:
            raise ValueError("n_runs and n_draws must be >= 1")
        if not 0 < self.ci_level < 1:
            raise ValueError("ci_level must be in (0, 1)")
        if self.ci_method not in ("percentile", "resample"):
            raise ValueError(f"unknown ci_method {self.ci_method!r}")


def balanced_eval(id_scores, ood_pool, protocol: EvalProtocol, rng, ood_groups=None):
    """Mean AUROC / FPR over draws that resample the OOD pool to the ID test size.

    Each draw takes ``protocol.n_id`` OOD scores with replacement (or
    ``len(id_scores)`` when ``n_id`` is None). With ``ood_groups`` (one
    patient key per pool entry) a draw samples patients, then one scan of
    each sampled patient.

    Returns ``{"auroc", "fpr95", "draws_auroc", "draws_fpr95"}`` as fractions.
    """
    id_scores = _scores(id_scores, "id_scores")
    pool = _scores(ood_pool, "ood_pool")
    n = protocol.n_id if protocol.n_id is not None else id_scores.size
    if ood_groups is not None:
        ood_groups = np.asarray(ood_groups)
        if ood_groups.shape != pool.shape:
            raise ValueError("ood_groups must align with ood_pool")
        keys, inverse = np.unique(ood_groups, return_inverse=True)
        members = [np.flatnonzero(inverse == g) for g in range(keys.size)]
    aucs, fprs = [], []
    for _ in range(protocol.n_draws):
        if ood_groups is None:
            draw = pool[rng.integers(0, pool.size, size=n)]
        else:
            patients = rng.integers(0, len(members), size=n)
            draw = np.array([pool[members[p][rng.integers(0, members[p].size)]] for p in patients])
        aucs.append(auroc(id_scores, draw))
        fprs.append(fpr_at_tpr(id_scores, draw, protocol.tpr_target))
    return {
        "auroc": float(np.mean(aucs)),
        "fpr95": float(np.mean(fprs)),
        "draws_auroc": aucs,
        "draws_fpr95": fprs,
    }


def bootstrap_ci(per_run_values, ci_level=0.95, method="percentile", rng=None, n_boot=1000):
    """``(point, lo, hi)`` over matched-seed run values.

    ``point`` is the mean of the runs. With ``method="percentile"`` the
    bounds are the nearest-rank (1-ci)/2 and (1+ci)/2 percentiles of the run
    values; ``"resample"`` instead bootstraps the mean of the runs. The
    interval is widened if needed so that it always contains the point.
    """
    values = np.asarray(per_run_values, dtype=np.float64).ravel()
    if values.size < 2:
        raise ValueError(f"need at least 2 runs for a confidence interval, got {values.size}")
    alpha = (1 - Fraction(str(ci_level))) / 2
    point = float(values.mean())
    if method == "percentile":
        sample = values
    elif method == "resample":
        rng = rng if rng is not None else np.random.default_rng(0)
        sample = values[rng.integers(0, values.size, size=(n_boot, values.size))].mean(axis=1)
    else:
        raise ValueError(f"unknown CI method {method!r}")
    lo = nearest_rank(sample, alpha)
    hi = nearest_rank(sample, 1 - alpha)
    return point, min(lo, point), max(hi, point)


# -- rank tests ----------------------------------------------------------------


@dataclass(frozen=True)
class RankTest:
    statistic: float
    z: float
    p_two_sided: float
    effect_r: float


def _tie_term(values):
    _, counts = np.unique(values, return_counts=True)
    return float(np.sum(counts.astype(np.float64) ** 3 - counts))


def _normal_test(stat, mean, var, n_effect):
    sd = math.sqrt(var) if var > 0 else 0.0
    diff = stat - mean
    if sd == 0.0:
        return 0.0, 1.0, 0.0
    # Continuity correction shrinks |diff| by 0.5 without crossing zero.
    z = math.copysign(max(abs(diff) - 0.5, 0.0), diff) / sd
    p = min(1.0, 2.0 * float(ndtr(-abs(z))))
    return z, p, z / math.sqrt(n_effect)


def mann_whitney_u(a, b) -> RankTest:
    """Mann-Whitney U for sample ``a`` against ``b``.

    ``statistic`` is U_a (pairs with a > b, ties counting half); ``z`` is
    signed, positive when ``a`` tends to exceed ``b``; ``effect_r = z /
    sqrt(n_a + n_b)``. The p-value uses the tie-corrected normal
    approximation with continuity correction.
    """
    a = _scores(a, "a")
    b = _scores(b, "b")
    na, nb = a.size, b.size
    n = na + nb
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled, method="average")
    u_a = float(ranks[:na].sum() - na * (na + 1) / 2.0)
    var = na * nb / 12.0 * ((n + 1) - _tie_term(pooled) / (n * (n - 1)))
    z, p, r = _normal_test(u_a, na * nb / 2.0, var, n)
    return RankTest(u_a, z, p, r)


def wilcoxon_signed_rank(paired_diffs) -> RankTest:
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Zero differences are dropped. ``statistic`` is ``min(W+, W-)``; ``z`` is
    signed from W+ (positive when differences tend to be positive) and
    ``effect_r = z / sqrt(n_nonzero)``.
    """
    d = _scores(paired_diffs, "paired_diffs")
    d = d[d != 0]
    if d.size == 0:
        raise ValueError("all paired differences are zero")
    n = d.size
    ranks = rankdata(np.abs(d), method="average")
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    var = n * (n + 1) * (2 * n + 1) / 24.0 - _tie_term(np.abs(d)) / 48.0
    z, p, r = _normal_test(w_plus, n * (n + 1) / 4.0, var, n)
    return RankTest(min(w_plus, w_minus), z, p, r)


# -- reports ---------------------------------------------------------------------


@dataclass
class MetricSummary:
    """One (method, dataset) row. Metric values are percentages."""

    auroc: float
    auroc_lo: float
    auroc_hi: float
    fpr95: float
    fpr95_lo: float
    fpr95_hi: float
    n_runs: int
    runs_auroc: list = field(default_factory=list)
    runs_fpr95: list = field(default_factory=list)


def _r6(v):
    return round(float(v), 6)


def summarize_runs(runs_auroc, runs_fpr95, protocol: EvalProtocol, rng=None) -> MetricSummary:
    """Turn per-run fractions into a percent summary with CIs (rounded to 6 decimals)."""
    a = np.asarray(runs_auroc, dtype=np.float64) * 100.0
    f = np.asarray(runs_fpr95, dtype=np.float64) * 100.0
    a_ci = bootstrap_ci(a, protocol.ci_level, protocol.ci_method, rng)
    f_ci = bootstrap_ci(f, protocol.ci_level, protocol.ci_method, rng)
    return MetricSummary(
        *[_r6(v) for v in a_ci],
        *[_r6(v) for v in f_ci],
        int(a.size),
        [_r6(v) for v in a],
        [_r6(v) for v in f],
    )


@dataclass
class EvalReport:
    rows: dict = field(default_factory=dict)  # (method, dataset) -> MetricSummary
    protocol: dict = field(default_factory=dict)
    tests: list = field(default_factory=list)

    def add(self, method, dataset, summary: MetricSummary):
        self.rows[(method, dataset)] = summary

    def get(self, method, dataset):
        return self.rows[(method, dataset)]

    def methods(self):
        return sorted({m for m, _ in self.rows})

    def datasets(self):
        return sorted({d for _, d in self.rows})

    def to_dict(self):
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "protocol": self.protocol,
            "results": [
                {"method": m, "dataset": d, **asdict(s)} for (m, d), s in sorted(self.rows.items())
            ],
            "tests": self.tests,
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("format") != REPORT_FORMAT:
            raise DataFormatError(f"not an evaluation report (format={data.get('format')!r})")
        rep = cls(protocol=data.get("protocol", {}), tests=data.get("tests", []))
        for row in data["results"]:
            row = dict(row)
            m, d = row.pop("method"), row.pop("dataset")
            rep.add(m, d, MetricSummary(**row))
        return rep


def canonical_json(obj, indent=0):
    """Deterministic JSON: sorted keys, floats with exactly 6 decimals."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {canonical_json(obj[k], indent + 1)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(canonical_json(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + canonical_json(v, indent + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(bool(obj) if obj is not None else None)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            raise ValueError("reports cannot contain non-finite numbers")
        return f"{v:.6f}"
    return json.dumps(str(obj))


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for (m, d), s in sorted(report.rows.items()):
        w.writerow(
            [m, d] + [f"{v:.6f}" for v in (s.auroc, s.auroc_lo, s.auroc_hi, s.fpr95, s.fpr95_lo, s.fpr95_hi)] + [s.n_runs]
        )
    return buf.getvalue()


def emit_report(report: EvalReport, fmt, path):
    path = Path(path)
    if fmt == "json":
        text = canonical_json(report.to_dict()) + "\n"
    elif fmt == "csv":
        text = report_csv(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def load_report(path) -> EvalReport:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    return EvalReport.from_dict(data)


# -- score tables -> report ------------------------------------------------------


@dataclass(frozen=True)
class ScoreRow:
    """One scan score. ``target`` names the OOD cohort a score is meant for
    (dataset-specific and leave-one-out detectors); empty means every cohort."""

    scan_id: str
    dataset: str
    label: int
    method: str
    score: float
    target: str = ""
    patient_id: str | None = None


SCORE_HEADER = ["scan_id", "dataset", "label", "method", "target", "score"]


def write_scores(rows, path):
    """Score file (CSV), sorted by scan_id, then method and target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=lambda r: (r.scan_id, r.method, r.target))
    with_patient = any(r.patient_id is not None for r in rows)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_HEADER + (["patient_id"] if with_patient else []))
        for r in rows:
            rec = [r.scan_id, r.dataset, r.label, r.method, r.target, repr(float(r.score))]
            if with_patient:
                rec.append(r.patient_id or "")
            w.writerow(rec)
    return path


def read_scores(path):
    rows = []
    try:
        fh = Path(path).open(newline="")
    except OSError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[: len(SCORE_HEADER)] != SCORE_HEADER:
            raise DataFormatError(f"{path}: score file header must start with {','.join(SCORE_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                score = float(rec["score"])
                label = int(rec["label"])
            except (TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}: row {lineno}: {exc}") from exc
            if not math.isfinite(score) or label not in (0, 1):
                raise DataFormatError(f"{path}: row {lineno}: bad score or label")
            rows.append(
                ScoreRow(rec["scan_id"], rec["dataset"], label, rec["method"], score, rec["target"], rec.get("patient_id") or None)
            )
    return rows


def evaluate_scores(rows, protocol: EvalProtocol) -> EvalReport:
    """Report for fixed scan scores: each run re-draws balanced OOD resamples.

    For every method and OOD cohort, the ID side is the method's ID rows whose
    target is empty or that cohort. Run ``i`` uses the same derived seed for
    every method, so per-run values are paired across methods; a Wilcoxon
    test on the paired AUROC differences is attached for every method pair.
    """
    if protocol.n_runs < 2:
        raise ValueError("n_runs must be >= 2 to form confidence intervals")
    report = EvalReport(protocol=asdict(protocol))
    for method in sorted({r.method for r in rows}):
        mine = [r for r in rows if r.method == method]
        for ds in sorted({r.dataset for r in mine if r.label == 1}):
            id_scores = [r.score for r in mine if r.label == 0 and r.target in ("", ds)]
            pool = [r for r in mine if r.label == 1 and r.dataset == ds and r.target in ("", ds)]
            if not id_scores or not pool:
                continue
            groups = [r.patient_id or r.scan_id for r in pool] if any(r.patient_id for r in pool) else None
            runs_a, runs_f = [], []
            for run in range(protocol.n_runs):
                res = balanced_eval(
                    id_scores, [r.score for r in pool], protocol, make_rng(protocol.master_seed, "run", run, ds), groups
                )
                runs_a.append(res["auroc"])
                runs_f.append(res["fpr95"])
            ci_rng = make_rng(protocol.master_seed, "ci", method, ds)
            report.add(method, ds, summarize_runs(runs_a, runs_f, protocol, ci_rng))
    report.tests = paired_tests(report)
    return report


def paired_tests(report: EvalReport):
    tests = []
    methods = report.methods()
    for ds in report.datasets():
        for i, m1 in enumerate(methods):
            for m2 in methods[i + 1 :]:
                if (m1, ds) not in report.rows or (m2, ds) not in report.rows:
                    continue
                diffs = np.subtract(report.get(m1, ds).runs_auroc, report.get(m2, ds).runs_auroc)
                if not np.any(diffs):
                    continue
                t = wilcoxon_signed_rank(diffs)
                tests.append(
                    {
                        "test": "wilcoxon_signed_rank",
                        "metric": "auroc",
                        "dataset": ds,
                        "a": m1,
                        "b": m2,
                        "statistic": t.statistic,
                        "z": t.z,
                        "p_two_sided": t.p_two_sided,
                        "effect_r": t.effect_r,
                        "a_wins": int(np.sum(diffs > 0)),
                        "n_runs": int(diffs.size),
                    }
                )
    return tests
