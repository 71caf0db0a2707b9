"""Matched-seed experiments on synthetic descriptor cohorts.

Run ``r`` draws one train/test split of every cohort from a seed derived from
``(master_seed, r)``; every method in that run sees the same split and the
same balanced resample draws, so per-run differences are paired.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ._seeding import make_rng
from .detectors import StrategyConfig, md_fit, md_score, rf_deep_score, rf_deep_train, run_strategy
from .evaluation import EvalProtocol, EvalReport, balanced_eval, mann_whitney_u, paired_tests, summarize_runs
from .features import BACKGROUND_TAG, ID_TAG, DescriptorSet, SynthConfig, synth_generate
from .forest import ForestParams


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    n_runs: int = 100
    n_id_test: int = 140
    n_ood_train: int = 40
    n_draws: int = 10
    forest: ForestParams = ForestParams(n_trees=100)
    master_seed: int = 0
    n_threads: int = 1


def split_scans(sets, cfg: ExperimentConfig, run):
    """``(train, test)`` descriptor sets for one run; background rows only go to train."""
    train, test = [], []
    for tag in sorted(sets):
        dset = sets[tag]
        if tag == BACKGROUND_TAG:
            train.append(dset)
            continue
        scans = np.array(dset.scans(), dtype=object)
        order = make_rng(cfg.master_seed, "split", run, tag).permutation(scans.size)
        if tag == ID_TAG:
            n_test = min(cfg.n_id_test, scans.size - 2)
            test_ids, train_ids = scans[order[:n_test]], scans[order[n_test:]]
        else:
            n_train = min(cfg.n_ood_train, scans.size - 1)
            train_ids, test_ids = scans[order[:n_train]], scans[order[n_train:]]
        train.append(dset.take_scans(train_ids))
        test.append(dset.take_scans(test_ids))
    return DescriptorSet.concat(train), DescriptorSet.concat(test)


def _scan_scores(dset, scorer):
    return np.array([scorer(dset.X[idx]) for idx in dset.groups().values()])


def _protocol(cfg):
    return EvalProtocol(n_id=cfg.n_id_test, n_draws=cfg.n_draws, n_runs=cfg.n_runs, master_seed=cfg.master_seed)


def _metrics(id_scores, ood_scores, cfg, run, tag):
    res = balanced_eval(id_scores, ood_scores, _protocol(cfg), make_rng(cfg.master_seed, "draws", run, tag))
    return res["auroc"], res["fpr95"]


def run_detector_comparison(cfg: ExperimentConfig):
    """RF-Deep (one forest per cohort) against MD-Deep over matched runs.

    Returns ``{"runs": {method: {cohort: [(auroc, fpr95), ...]}}, "report": EvalReport}``.
    """
    sets = synth_generate(cfg.synth)
    cohorts = [name for name, _ in cfg.synth.cohorts]
    runs = {"rf-deep": {c: [] for c in cohorts}, "md-deep": {c: [] for c in cohorts}}
    for run in range(cfg.n_runs):
        train, test = split_scans(sets, cfg, run)
        id_train = train.where(dataset=ID_TAG)
        id_test = test.where(dataset=ID_TAG)
        gauss = md_fit(id_train)
        md_id = _scan_scores(id_test, lambda X: md_score(gauss, X))
        for c in cohorts:
            ood_test = test.where(dataset=c)
            params = cfg.forest.replace(rng_seed=int(make_rng(cfg.master_seed, "forest", run, c).integers(2**62)))
            model = rf_deep_train(id_train, train.where(dataset=c), params, cfg.n_threads)
            rf_id = _scan_scores(id_test, lambda X: rf_deep_score(model, X))
            rf_ood = _scan_scores(ood_test, lambda X: rf_deep_score(model, X))
            runs["rf-deep"][c].append(_metrics(rf_id, rf_ood, cfg, run, c))
            md_ood = _scan_scores(ood_test, lambda X: md_score(gauss, X))
            runs["md-deep"][c].append(_metrics(md_id, md_ood, cfg, run, c))
    return {"runs": runs, "report": _report(runs, cfg)}


def _report(runs, cfg):
    proto = _protocol(cfg)
    report = EvalReport(protocol={"experiment": asdict(cfg), **asdict(proto)})
    for method, per in runs.items():
        for c, vals in per.items():
            a, f = zip(*vals)
            report.add(method, c, summarize_runs(a, f, proto, make_rng(cfg.master_seed, "ci", method, c)))
    report.tests = paired_tests(report) if cfg.n_runs > 1 else []
    return report


def run_strategy_comparison(cfg: ExperimentConfig, background_roi_count=None):
    """Held-out AUROC / FPR95 per strategy and cohort over ``cfg.n_runs`` seeds.

    DS scores a cohort with its own forest, unified with the pooled forest,
    LODO / LODO+ with the forest that never saw that cohort.
    """
    sets = synth_generate(cfg.synth)
    if BACKGROUND_TAG not in sets:
        raise ValueError("strategy comparison needs background rows (set synth.n_background > 0)")
    cohorts = [name for name, _ in cfg.synth.cohorts]
    modes = ("dataset_specific", "ensemble", "unified", "lodo", "lodo_plus")
    runs = {m: {c: [] for c in cohorts} for m in modes}
    for run in range(cfg.n_runs):
        train, test = split_scans(sets, cfg, run)
        params = cfg.forest.replace(rng_seed=int(make_rng(cfg.master_seed, "forest", run).integers(2**62)))
        id_test = test.where(dataset=ID_TAG)
        plain = train.where(dataset=[d for d in train.datasets() if d != BACKGROUND_TAG])

        def held_out_metrics(det, c, names):
            s_id = _scan_scores(id_test, lambda X: det.score_scan(X, names))
            s_ood = _scan_scores(test.where(dataset=c), lambda X: det.score_scan(X, names))
            return _metrics(s_id, s_ood, cfg, run, c)

        ds = run_strategy(StrategyConfig("dataset_specific"), plain, params, cfg.n_threads)
        uni = run_strategy(StrategyConfig("unified"), plain, params, cfg.n_threads)
        for c in cohorts:
            runs["dataset_specific"][c].append(held_out_metrics(ds, c, [c]))
            runs["ensemble"][c].append(held_out_metrics(ds, c, sorted(ds.forests)))
            runs["unified"][c].append(held_out_metrics(uni, c, ["unified"]))
            lodo = run_strategy(StrategyConfig("lodo", c), plain, params, cfg.n_threads)
            runs["lodo"][c].append(held_out_metrics(lodo, c, ["lodo"]))
            plus = run_strategy(StrategyConfig("lodo_plus", c, background_roi_count), train, params, cfg.n_threads)
            runs["lodo_plus"][c].append(held_out_metrics(plus, c, ["lodo_plus"]))
    return {"runs": runs, "report": _report(runs, cfg)}


def mean_metric(per_cohort, index, cohorts=None):
    """Mean over runs and the given cohorts of metric ``index`` (0 AUROC, 1 FPR95)."""
    cohorts = cohorts if cohorts is not None else sorted(per_cohort)
    return float(np.mean([v[index] for c in cohorts for v in per_cohort[c]]))


def near_far(cfg: ExperimentConfig):
    """Cohort names split at the median shift."""
    shifts = sorted(s for _, s in cfg.synth.cohorts)
    cut = (shifts[0] + shifts[-1]) / 2
    near = [n for n, s in cfg.synth.cohorts if s <= cut]
    far = [n for n, s in cfg.synth.cohorts if s > cut]
    return near, far


__all__ = [
    "ExperimentConfig",
    "mann_whitney_u",
    "mean_metric",
    "near_far",
    "run_detector_comparison",
    "run_strategy_comparison",
    "split_scans",
]
