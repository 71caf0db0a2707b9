"""``scanood`` command line.

Exit codes: 0 success, 2 usage or configuration error, 3 no predicted tumor
voxels, 4 malformed input data.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import tomli

from ._seeding import make_rng
from .detectors import (
    LOGIT_SCORES,
    LogitVolume,
    MdDetector,
    StrategyConfig,
    boundary_interior_stats,
    load_bundle,
    md_fit,
    run_strategy,
    save_bundle,
)
from .errors import DataFormatError, NoSegmentation
from .evaluation import EvalProtocol, ScoreRow, emit_report, evaluate_scores, read_scores, write_scores
from .experiment import ExperimentConfig, run_detector_comparison, run_strategy_comparison
from .features import (
    BACKGROUND_TAG,
    DEFAULT_COHORTS,
    FULL_DIM,
    ID_LABEL,
    DescriptorSet,
    StageSelection,
    SynthConfig,
    gap_pool,
    load_feature_table,
    read_stage_map,
    save_feature_table,
    stage_subset,
    synth_generate,
)
from .forest import ForestParams
from .grid3d import read_rvol
from .roi import RoiConfig, anchor_rois, sample_background_rois, write_manifest

log = logging.getLogger("scanood")

EXIT_OK, EXIT_USAGE, EXIT_NOSEG, EXIT_FORMAT = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _need(paths):
    for p in paths:
        p = Path(p)
        if not (p.exists() or p.with_suffix(".json").exists()):
            raise UsageError(f"input not found: {p}")


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _parse_cohorts(text):
    """``NAME:SHIFT,NAME:SHIFT`` -> tuple of pairs."""
    out = []
    for item in text.split(","):
        name, _, shift = item.partition(":")
        if not name or not shift:
            raise UsageError(f"bad cohort spec {item!r}; expected NAME:SHIFT")
        out.append((name.strip(), float(shift)))
    return tuple(out)


# -- subcommands ---------------------------------------------------------------------


def cmd_synth(args):
    cohorts = _parse_cohorts(args.cohorts) if args.cohorts else DEFAULT_COHORTS
    cfg = SynthConfig(
        dim=args.dim,
        n_id=args.n_id,
        n_ood=args.n_ood,
        cohorts=cohorts,
        overlap=args.overlap,
        n_rois=args.n_rois,
        n_background=args.n_background,
        rng_seed=args.seed,
    )
    out = Path(args.out)
    sets = synth_generate(cfg)
    tables = {}
    for tag, dset in sorted(sets.items()):
        path = save_feature_table(dset, out / f"{tag}.{args.table_format}")
        tables[tag] = path.name
    _write_json(out / "manifest.json", {"synth": asdict(cfg), "tables": tables})
    log.info("wrote %d tables to %s", len(tables), out)
    return EXIT_OK


def cmd_rois(args):
    _need([args.mask])
    mask = read_rvol(args.mask)
    if not hasattr(mask, "bits"):
        raise DataFormatError(f"{args.mask}: expected a u8 label mask")
    cfg = RoiConfig(n_rois=args.n_rois, crop_size_vox=args.crop_size, rng_seed=args.seed)
    scan_id = args.scan_id or Path(args.mask).stem
    rng = make_rng(args.seed, "rois", scan_id)
    rois = anchor_rois(mask, mask.dims, cfg, rng)
    if args.background:
        rois += sample_background_rois(mask, mask.dims, args.background, cfg, make_rng(args.seed, "background", scan_id))
    write_manifest(args.out, scan_id, rois)
    return EXIT_OK


def _roi_index(path, default):
    digits = "".join(ch for ch in path.name if ch.isdigit())
    return int(digits) if digits else default


def cmd_pool(args):
    """Each input is an ROI directory holding ``stage0`` .. ``stage4`` RVOL maps;
    its parent directory name is the scan id."""
    _need(args.inputs)
    selection = StageSelection.parse(args.stages)
    rows, scan_ids, roi_idx = [], [], []
    for i, d in enumerate(sorted(Path(p) for p in args.inputs)):
        maps = [read_stage_map(d / f"stage{s}") for s in selection.included_stages]
        rows.append(gap_pool(maps, selection))
        scan_ids.append(d.parent.name)
        roi_idx.append(_roi_index(d, i))
    n = len(rows)
    dset = DescriptorSet(np.asarray(rows), scan_ids, roi_idx, [args.dataset] * n, [args.label] * n)
    save_feature_table(dset, args.out)
    return EXIT_OK


def _load_tables(paths):
    _need(paths)
    return DescriptorSet.concat([load_feature_table(p) for p in paths])


def _select_stages(dset, stages):
    if stages is None or tuple(stages) == StageSelection().included_stages:
        return dset
    if dset.dim != FULL_DIM:
        raise UsageError(f"--stages needs full {FULL_DIM}-wide descriptors, table has {dset.dim}")
    out = dset.take(np.arange(len(dset)))
    out.X = np.ascontiguousarray(stage_subset(dset.X, StageSelection(tuple(stages))))
    return out


def train_split(dset: DescriptorSet, fraction, seed):
    """Scan ids used for training: a seeded ``fraction`` of every dataset, all background scans."""
    chosen = []
    for tag in dset.datasets():
        scans = sorted(set(dset.where(dataset=tag).scan_id.tolist()))
        if tag == BACKGROUND_TAG or fraction >= 1.0:
            chosen += scans
            continue
        k = max(1, int(round(fraction * len(scans))))
        order = make_rng(seed, "train-split", tag).permutation(len(scans))
        chosen += [scans[i] for i in sorted(order[:k])]
    return sorted(chosen)


def cmd_train(args):
    if args.strategy in ("lodo", "lodo+", "lodo_plus") and not args.held_out:
        raise UsageError(f"--strategy {args.strategy} requires --held-out")
    if not 0 < args.train_fraction <= 1:
        raise UsageError("--train-fraction must be in (0, 1]")
    dset = _load_tables(args.tables)
    stages = list(StageSelection.parse(args.stages).included_stages)
    dset = _select_stages(dset, stages)
    train_ids = train_split(dset, args.train_fraction, args.seed)
    train = dset.take_scans(train_ids)
    if args.method == "md-deep":
        det = MdDetector(md_fit(train.where(label=ID_LABEL)), stages)
    else:
        params = ForestParams(n_trees=args.n_trees, max_depth=args.max_depth, rng_seed=args.seed)
        cfg = StrategyConfig(args.strategy, args.held_out, args.background_rois)
        if cfg.mode != "lodo_plus":
            train = train.where(dataset=[d for d in train.datasets() if d != BACKGROUND_TAG])
        det = run_strategy(cfg, train, params, n_threads=args.threads)
        det.stages = stages
    out = save_bundle(det, args.out)
    _write_json(out / "train_scans.json", {"seed": args.seed, "train_fraction": args.train_fraction, "scans": train_ids})
    return EXIT_OK


def _score_logits(args):
    rows = []
    for p in args.inputs:
        lv = LogitVolume.read(p, args.threshold)
        score = LOGIT_SCORES[args.method](lv)
        rows.append(ScoreRow(Path(p).stem, args.dataset, args.label, args.method, score))
    return rows


def cmd_score(args):
    if args.method not in LOGIT_SCORES and args.method not in ("bundle", "rf-deep", "md-deep"):
        raise UsageError(f"unknown scoring method {args.method!r}")
    if args.method in LOGIT_SCORES:
        _need(args.inputs)
        rows = _score_logits(args)
    else:
        if not args.bundle:
            raise UsageError("--bundle is required for descriptor-based scoring")
        _need([Path(args.bundle) / "manifest.json"])
        det = load_bundle(args.bundle)
        dset = _select_stages(_load_tables(args.inputs), det.stages)
        split_file = Path(args.bundle) / "train_scans.json"
        if split_file.exists() and not args.include_train:
            seen = set(json.loads(split_file.read_text())["scans"])
            dset = dset.take_scans([s for s in dset.scans() if s not in seen])
        if len(dset) == 0:
            raise UsageError("no scans left to score")
        rows = det.score_table(dset)
    write_scores(rows, args.out)
    return EXIT_OK


def _protocol(args):
    return EvalProtocol(
        n_id=args.n_id,
        n_draws=args.n_draws,
        n_runs=args.n_runs,
        master_seed=args.seed,
        ci_method=args.ci_method,
    )


def _emit(report, args):
    out = Path(args.out)
    formats = ("json", "csv") if args.format == "both" else (args.format,)
    for fmt in formats:
        target = out if out.suffix == f".{fmt}" else out.with_suffix(f".{fmt}")
        emit_report(report, fmt, target)


def cmd_eval(args):
    if args.n_runs < 2:
        raise UsageError("--n-runs must be >= 2 to form confidence intervals")
    _need(args.inputs)
    rows = [r for p in args.inputs for r in read_scores(p)]
    _emit(evaluate_scores(rows, _protocol(args)), args)
    return EXIT_OK


def cmd_boundary(args):
    _need(args.inputs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scan_id", "region", "mean", "sd", "n_voxels"])
        for p in sorted(args.inputs):
            stats = boundary_interior_stats(LogitVolume.read(p, args.threshold))
            for region in ("overall", "boundary", "interior"):
                s = stats[region]
                if s is None:
                    w.writerow([Path(p).stem, region, "", "", 0])
                else:
                    w.writerow([Path(p).stem, region, f"{s.mean:.6f}", f"{s.sd:.6f}", s.n_voxels])
    return EXIT_OK


def cmd_experiment(args):
    synth = SynthConfig(
        dim=args.dim,
        n_id=args.n_id_scans,
        n_ood=args.n_ood,
        n_rois=args.n_rois,
        n_background=args.n_background if args.kind == "strategies" else 0,
        rng_seed=args.seed,
    )
    cfg = ExperimentConfig(
        synth=synth,
        n_runs=args.n_runs,
        n_draws=args.n_draws,
        forest=ForestParams(n_trees=args.n_trees, max_depth=args.max_depth),
        master_seed=args.seed,
        n_threads=args.threads,
    )
    if args.kind == "detectors":
        result = run_detector_comparison(cfg)
    else:
        result = run_strategy_comparison(cfg, args.background_rois)
    _emit(result["report"], args)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def _common(p):
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    p.add_argument("--config", help="TOML file with option defaults; flags win")
    p.add_argument("--out", required=False, help="output path")
    p.add_argument("-v", "--verbose", action="store_true")


def _forest_flags(p):
    p.add_argument("--n-trees", type=int, default=1000)
    p.add_argument("--max-depth", type=int, default=20)


def build_parser():
    parser = argparse.ArgumentParser(prog="scanood", description="Scan-level OOD detection toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic descriptor tables")
    _common(p)
    p.add_argument("--dim", type=int, default=FULL_DIM)
    p.add_argument("--n-id", type=int, default=200)
    p.add_argument("--n-ood", type=int, default=150)
    p.add_argument("--n-rois", type=int, default=4)
    p.add_argument("--n-background", type=int, default=0)
    p.add_argument("--overlap", type=float, default=1.0)
    p.add_argument("--cohorts", help="NAME:SHIFT,... (default: two near, two far cohorts)")
    p.add_argument("--table-format", choices=("bin", "csv"), default="bin")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("rois", help="place tumor-anchored ROIs from a predicted mask")
    _common(p)
    p.add_argument("mask", help="u8 RVOL mask")
    p.add_argument("--scan-id")
    p.add_argument("--n-rois", type=int, default=4)
    p.add_argument("--crop-size", type=int, default=128)
    p.add_argument("--background", type=int, default=0, help="extra background ROIs")
    p.set_defaults(func=cmd_rois)

    p = sub.add_parser("pool", help="GAP-pool stage maps into a feature table")
    _common(p)
    p.add_argument("inputs", nargs="+", help="ROI directories with stage0..stage4 maps")
    p.add_argument("--stages", default="all")
    p.add_argument("--dataset", default="ID")
    p.add_argument("--label", type=int, choices=(0, 1), default=0)
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("train", help="train a detector bundle")
    _common(p)
    p.add_argument("tables", nargs="+")
    p.add_argument("--method", choices=("rf-deep", "md-deep"), default="rf-deep")
    p.add_argument("--strategy", default="ds", help="ds | ensemble | unified | lodo | lodo+")
    p.add_argument("--held-out")
    p.add_argument("--background-rois", type=int)
    p.add_argument("--stages", default="all")
    p.add_argument("--train-fraction", type=float, default=0.3)
    _forest_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score feature tables or logit volumes")
    _common(p)
    p.add_argument("inputs", nargs="+")
    p.add_argument("--bundle")
    p.add_argument("--method", default="bundle", help="bundle | maxsoftmax | maxlogit | energy")
    p.add_argument("--include-train", action="store_true", help="also score the bundle's training scans")
    p.add_argument("--dataset", default="ID")
    p.add_argument("--label", type=int, choices=(0, 1), default=0)
    p.add_argument("--threshold", type=float, help="tumor probability threshold (default off)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="evaluate score files")
    _common(p)
    p.add_argument("inputs", nargs="+")
    p.add_argument("--n-runs", type=int, default=100)
    p.add_argument("--n-draws", type=int, default=10)
    p.add_argument("--n-id", type=int, help="OOD draw size (default: number of ID scores)")
    p.add_argument("--ci-method", choices=("percentile", "resample"), default="percentile")
    p.add_argument("--format", choices=("json", "csv", "both"), default="both")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("boundary", help="boundary/interior logit statistics")
    _common(p)
    p.add_argument("inputs", nargs="+")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_boundary)

    p = sub.add_parser("experiment", help="matched-seed synthetic experiments")
    _common(p)
    p.add_argument("--kind", choices=("detectors", "strategies"), default="detectors")
    p.add_argument("--dim", type=int, default=FULL_DIM)
    p.add_argument("--n-id-scans", type=int, default=200)
    p.add_argument("--n-ood", type=int, default=150)
    p.add_argument("--n-rois", type=int, default=4)
    p.add_argument("--n-background", type=int, default=300)
    p.add_argument("--background-rois", type=int)
    p.add_argument("--n-runs", type=int, default=100)
    p.add_argument("--n-draws", type=int, default=10)
    p.add_argument("--format", choices=("json", "csv", "both"), default="both")
    _forest_flags(p)
    p.set_defaults(func=cmd_experiment, n_trees=100)
    return parser, sub


def _apply_config(parser, sub, argv):
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        with open(args.config, "rb") as fh:
            values = tomli.load(fh)
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    # Keys may use dashes like the flags; a [command] table overrides top-level keys.
    section = values.pop(args.command, {})
    values = {k: v for k, v in values.items() if not isinstance(v, dict)}
    values.update(section)
    values = {k.replace("-", "_"): v for k, v in values.items()}
    known = vars(args)
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    sub.choices[args.command].set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None):
    parser, sub = build_parser()
    try:
        args = _apply_config(parser, sub, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        if args.out is None:
            raise UsageError("--out is required")
        return args.func(args)
    except UsageError as exc:
        print(f"scanood: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NoSegmentation as exc:
        print(f"scanood: no segmentation: {exc}", file=sys.stderr)
        return EXIT_NOSEG
    except DataFormatError as exc:
        print(f"scanood: bad input: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ValueError as exc:
        print(f"scanood: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
