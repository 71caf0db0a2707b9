import csv
import json
import math

import numpy as np
import pytest

from oracles import cube_mask
from scanood.cli import main
from scanood.detectors import LogitVolume
from scanood.evaluation import load_report, read_scores
from scanood.features import STAGE_WIDTHS, StageFeatureMap, load_feature_table, write_stage_map
from scanood.grid3d import LabelMask, write_rvol
from scanood.roi import read_manifest


@pytest.fixture
def data(tmp_path):
    out = tmp_path / "data"
    assert main(["synth", "--dim", "60", "--n-id", "40", "--n-ood", "30", "--seed", "1", "--out", str(out)]) == 0
    return out


def test_synth_writes_five_tables(data):
    names = sorted(p.name for p in data.glob("*.bin"))
    assert names == ["ID.bin", "KiTS.bin", "MIDRC-C19.bin", "PancreasCT.bin", "RSNA-PE.bin"]
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["synth"]["rng_seed"] == 1


def test_synth_is_reproducible(data, tmp_path):
    again = tmp_path / "again"
    main(["synth", "--dim", "60", "--n-id", "40", "--n-ood", "30", "--seed", "1", "--out", str(again)])
    for p in data.iterdir():
        assert p.read_bytes() == (again / p.name).read_bytes()


def test_chain_and_bundle_reload(data, tmp_path):
    tables = [str(p) for p in sorted(data.glob("*.bin"))]
    bundle = tmp_path / "rf"
    assert main(["train", *tables, "--n-trees", "20", "--out", str(bundle)]) == 0
    assert main(["score", *tables, "--bundle", str(bundle), "--out", str(tmp_path / "s1.csv")]) == 0
    assert main(["score", *tables, "--bundle", str(bundle), "--out", str(tmp_path / "s2.csv")]) == 0
    assert (tmp_path / "s1.csv").read_bytes() == (tmp_path / "s2.csv").read_bytes()
    rows = read_scores(tmp_path / "s1.csv")
    assert [r.scan_id for r in rows] == sorted(r.scan_id for r in rows)
    trained = set(json.loads((bundle / "train_scans.json").read_text())["scans"])
    assert not trained & {r.scan_id for r in rows}
    assert main(["eval", str(tmp_path / "s1.csv"), "--n-runs", "5", "--out", str(tmp_path / "rep")]) == 0
    rep = load_report(tmp_path / "rep.json")
    assert rep.get("rf-deep/dataset_specific", "KiTS").auroc == 100.0


def test_train_defaults_match_shipped_config(data, tmp_path):
    tables = [str(p) for p in sorted(data.glob("*.bin"))]
    bundle = tmp_path / "rf"
    assert main(["train", *tables, "--strategy", "unified", "--train-fraction", "0.2", "--out", str(bundle)]) == 0
    forest = json.loads((bundle / "forest_00.json").read_text())
    assert forest["params"]["n_trees"] == 1000 and forest["params"]["max_depth"] == 20
    assert forest["params"]["class_weight"] == "balanced"


def test_md_chain(data, tmp_path):
    tables = [str(p) for p in sorted(data.glob("*.bin"))]
    assert main(["train", *tables, "--method", "md-deep", "--out", str(tmp_path / "md")]) == 0
    assert (tmp_path / "md" / "gaussian.bin").exists()
    assert main(["score", *tables, "--bundle", str(tmp_path / "md"), "--out", str(tmp_path / "md.csv")]) == 0
    assert {r.method for r in read_scores(tmp_path / "md.csv")} == {"md-deep"}


def test_lodo_without_held_out_is_usage_error(data, tmp_path):
    assert main(["train", str(data / "ID.bin"), "--strategy", "lodo", "--out", str(tmp_path / "b")]) == 2


def test_eval_needs_two_runs(data, tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("scan_id,dataset,label,method,target,score\na,ID,0,m,,0.1\nb,K,1,m,,0.9\n")
    assert main(["eval", str(p), "--n-runs", "1", "--out", str(tmp_path / "r")]) == 2


def test_separable_scores_give_100(tmp_path):
    p = tmp_path / "s.csv"
    lines = ["scan_id,dataset,label,method,target,score"]
    lines += [f"i{k},ID,0,m,,{k * 0.01}" for k in range(10)]
    lines += [f"o{k},K,1,m,,{1 + k * 0.01}" for k in range(5)]
    p.write_text("\n".join(lines) + "\n")
    assert main(["eval", str(p), "--n-runs", "3", "--format", "csv", "--out", str(tmp_path / "r.csv")]) == 0
    row = list(csv.DictReader((tmp_path / "r.csv").open()))[0]
    assert row["auroc"] == "100.000000" and row["fpr95"] == "0.000000"


def test_bad_table_is_format_error(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("scan_id,roi_index,dataset,label,f0000\ns,0,ID,0,oops\n")
    assert main(["train", str(bad), "--out", str(tmp_path / "b")]) == 4


def test_missing_input_is_usage_error(tmp_path):
    assert main(["eval", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "r")]) == 2


def test_rois(tmp_path):
    shape = (40, 40, 40)
    write_rvol(tmp_path / "mask", LabelMask(cube_mask(shape, (10, 12, 14), (5, 5, 5))))
    args = ["rois", str(tmp_path / "mask"), "--crop-size", "16", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a.jsonl")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.jsonl")]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert len(read_manifest(tmp_path / "a.jsonl")) == 4


def test_rois_empty_mask_exit_3(tmp_path, capsys):
    write_rvol(tmp_path / "mask", LabelMask(np.zeros((20, 20, 20), bool)))
    assert main(["rois", str(tmp_path / "mask"), "--crop-size", "8", "--out", str(tmp_path / "m.jsonl")]) == 3
    assert "segmentation" in capsys.readouterr().err


def _roi_dirs(tmp_path, value):
    dirs = []
    for roi in range(2):
        d = tmp_path / "scan7" / f"roi{roi}"
        for s, c in enumerate(STAGE_WIDTHS):
            write_stage_map(d / f"stage{s}", StageFeatureMap(s, np.full((c, 2, 2, 2), value + s, np.float32)))
        dirs.append(str(d))
    return dirs


def test_pool(tmp_path):
    dirs = _roi_dirs(tmp_path, 1.0)
    assert main(["pool", *dirs, "--out", str(tmp_path / "all.csv")]) == 0
    full = load_feature_table(tmp_path / "all.csv")
    assert full.dim == 1488 and list(full.scan_id) == ["scan7", "scan7"] and list(full.roi_index) == [0, 1]
    assert np.all(full.X[0] == full.X[1])
    assert main(["pool", *dirs, "--stages", "4", "--out", str(tmp_path / "s4.csv")]) == 0
    s4 = load_feature_table(tmp_path / "s4.csv")
    assert s4.dim == 768 and np.all(s4.X == 5.0)


def test_score_logits(tmp_path):
    LogitVolume(np.zeros((1, 1, 1)), np.full((1, 1, 1), 2.0)).write(tmp_path / "scan1")
    assert main(["score", str(tmp_path / "scan1"), "--method", "maxlogit", "--out", str(tmp_path / "s.csv")]) == 0
    assert read_scores(tmp_path / "s.csv")[0].score == -2.0
    assert main(["score", str(tmp_path / "scan1"), "--method", "energy", "--out", str(tmp_path / "e.csv")]) == 0
    assert read_scores(tmp_path / "e.csv")[0].score == pytest.approx(-math.log(1 + math.exp(2)))


def test_score_logits_without_tumor_exit_3(tmp_path):
    LogitVolume(np.ones((2, 2, 2)), np.zeros((2, 2, 2))).write(tmp_path / "scan1")
    assert main(["score", str(tmp_path / "scan1"), "--method", "maxlogit", "--out", str(tmp_path / "s.csv")]) == 3


def test_boundary_csv(tmp_path):
    bits = cube_mask((10, 10, 10), (2, 2, 2), (6, 6, 6))
    LogitVolume(np.zeros(bits.shape), np.where(bits, 2.0, -1.0)).write(tmp_path / "v")
    assert main(["boundary", str(tmp_path / "v"), "--out", str(tmp_path / "b.csv")]) == 0
    rows = list(csv.DictReader((tmp_path / "b.csv").open()))
    assert [r["region"] for r in rows] == ["overall", "boundary", "interior"]
    assert all(r["mean"] == "2.000000" for r in rows)


def test_config_file_and_flag_precedence(data, tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('n-runs = 4\n[eval]\nn_draws = 2\nformat = "json"\n')
    p = tmp_path / "s.csv"
    p.write_text("scan_id,dataset,label,method,target,score\na,ID,0,m,,0.1\nc,ID,0,m,,0.3\nb,K,1,m,,0.9\n")
    assert main(["eval", str(p), "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    assert load_report(tmp_path / "r.json").protocol["n_runs"] == 4
    assert not (tmp_path / "r.csv").exists()
    assert main(["eval", str(p), "--config", str(cfg), "--n-runs", "3", "--out", str(tmp_path / "q")]) == 0
    assert load_report(tmp_path / "q.json").protocol["n_runs"] == 3


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("bogus = 1\n")
    p = tmp_path / "s.csv"
    p.write_text("scan_id,dataset,label,method,target,score\n")
    assert main(["eval", str(p), "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2


def test_argparse_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2
