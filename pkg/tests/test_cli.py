"""CLI tests: each command run in-process, plus one subprocess smoke check."""

import json
import os
import shutil
import subprocess

import numpy as np
import pytest
from numpy.testing import assert_allclose

from dkn import rng
from dkn.cli import main
from dkn.dkn_fit import DknStructure, FitOptions, auto_structure, fit, load_model, predict
from dkn.kron_ops import compose_coeff
from dkn.tensor_core import write_dkt


def write_config(path, **overrides):
    cfg = {
        "image_dims": [8, 8],
        "n_train": 60,
        "signal": {"shape": "one_circle", "kind": "sparse", "circles": None},
        "family": "gaussian",
        "noise_sd": 0.3,
        "rank": 1,
        "depth": None,
        "n_reps": 1,
        "seed": 11,
        "max_sweeps": 30,
        "tol": 1e-8,
        "run_ridge": False,
    }
    cfg.update(overrides)
    with open(path, "w") as fh:
        json.dump(cfg, fh)
    return cfg


def write_responses(path, values):
    with open(path, "w") as fh:
        fh.write("id,y\n")
        for i, v in enumerate(values):
            fh.write(f"{i},{float(v)!r}\n")


def write_rank1_dataset(root, n=500, seed=31, noise_sd=0.05):
    """Images, responses, and a Kronecker rank-1 truth in CLI on-disk layout."""
    s = DknStructure(image_dims=(8, 8), factor_dims=[(2, 2), (2, 2), (2, 2)])
    g = rng.stream(seed, rng.PURPOSE_SIGNAL, 0)
    chain = [g.standard_normal(fd) for fd in s.factor_dims]
    coeff = compose_coeff([chain]).reshape((8, 8), order="F")
    x = rng.stream(seed, rng.PURPOSE_IMAGES, 0).standard_normal((n, 8, 8))
    eps = rng.stream(seed, rng.PURPOSE_RESPONSES, 0).standard_normal(n)
    y = x.reshape(n, -1, order="F") @ coeff.ravel(order="F") + noise_sd * eps
    imgdir = os.path.join(root, "images")
    os.makedirs(imgdir)
    for i, img in enumerate(x):
        write_dkt(os.path.join(imgdir, f"img_{i:05d}.dkt"), img)
    write_responses(os.path.join(root, "y.csv"), y)
    write_dkt(os.path.join(root, "truth.dkt"), coeff)
    return imgdir, os.path.join(root, "y.csv"), os.path.join(root, "truth.dkt"), x, y


def test_simulate_then_fit_then_predict(tmp_path):
    cfg_path = tmp_path / "config.json"
    raw = write_config(cfg_path)
    data = tmp_path / "data"
    assert main(["simulate", "--config", str(cfg_path), "--out", str(data)]) == 0
    assert sorted(os.listdir(data / "images")) == [f"img_{i:05d}.dkt" for i in range(60)]
    assert len(os.listdir(data / "test_images")) == 15
    assert (data / "truth.dkt").exists()
    echoed = json.load(open(data / "config.json"))
    assert echoed["n_train"] == raw["n_train"]
    assert echoed["seed"] == raw["seed"]

    model_dir = tmp_path / "model"
    assert main(["fit", "--images", str(data / "images"), "--y", str(data / "y.csv"),
                 "--out", str(model_dir), "--seed", "0"]) == 0
    report = json.load(open(model_dir / "fit_report.json"))
    assert report["family"] == "gaussian" and report["rank"] == 1
    assert "wall_time_s" not in json.dumps(report)

    # the CLI fit is the library fit: same data, same options, same trace
    images = np.stack([
        np.fromfile(data / "images" / f"img_{i:05d}.dkt", dtype=np.float64, offset=21)
        .reshape((8, 8), order="F")
        for i in range(60)
    ])
    yvals = np.array([float(line.split(",")[1])
                      for line in open(data / "y.csv").read().splitlines()[1:]])
    structure, padded = auto_structure((8, 8), rank=1)
    _, api_report = fit(images, yvals, structure,
                        options=FitOptions(center_response=True), padded_from=padded)
    assert_allclose(report["objective_trace"], api_report.objective_trace, rtol=1e-12)

    pred_path = tmp_path / "pred.csv"
    assert main(["predict", "--model", str(model_dir), "--images", str(data / "test_images"),
                 "--out", str(pred_path)]) == 0
    rows = open(pred_path).read().splitlines()
    assert rows[0] == "id,pred"
    assert len(rows) == 16
    cli_pred = np.array([float(r.split(",")[1]) for r in rows[1:]])
    model = load_model(str(model_dir))
    test_images = np.stack([
        np.fromfile(data / "test_images" / f"img_{i:05d}.dkt", dtype=np.float64, offset=21)
        .reshape((8, 8), order="F")
        for i in range(15)
    ])
    assert_allclose(cli_pred, predict(model, test_images), rtol=1e-15)


def test_fit_scan_selects_rank_and_reports_bic(tmp_path):
    imgdir, ycsv, _, _, _ = write_rank1_dataset(tmp_path, n=200, seed=13)
    out = tmp_path / "model"
    assert main(["fit", "--images", imgdir, "--y", ycsv, "--out", str(out),
                 "--rank", "scan", "--ranks", "1,2", "--no-center"]) == 0
    scan = json.load(open(out / "scan_report.json"))
    assert sorted(scan["bic_table"].keys()) == ["1", "2"]
    assert scan["best_rank"] == 1  # the data are exactly rank one
    assert "wall_time_s" not in json.dumps(scan)
    model = load_model(str(out))
    assert model.structure.rank == 1
    assert (out / "fit_report.json").exists()


def test_fit_reads_structure_file(tmp_path):
    imgdir, ycsv, _, _, _ = write_rank1_dataset(tmp_path, n=120, seed=17)
    spath = tmp_path / "structure.json"
    spath.write_text(json.dumps(
        {"image_dims": [8, 8], "factor_dims": [[2, 2], [4, 4]], "rank": 2}))
    out = tmp_path / "model"
    assert main(["fit", "--images", imgdir, "--y", ycsv, "--out", str(out),
                 "--structure", str(spath), "--no-center"]) == 0
    model = load_model(str(out))
    # rank comes from the file when --rank is not given
    assert model.structure.rank == 2
    assert model.structure.depth == 2
    assert model.structure.factor_dims == ((2, 2, 1), (4, 4, 1))


def test_validation_failures_exit_2(tmp_path, capsys):
    ycsv = tmp_path / "y.csv"
    write_responses(ycsv, np.ones(4))
    assert main(["fit", "--images", str(tmp_path / "missing"), "--y", str(ycsv),
                 "--out", str(tmp_path / "m")]) == 2

    imgdir, good_y, _, _, y = write_rank1_dataset(tmp_path, n=8, seed=3)
    bad_header = tmp_path / "bad.csv"
    bad_header.write_text("index,value\n0,1.0\n")
    assert main(["fit", "--images", imgdir, "--y", str(bad_header),
                 "--out", str(tmp_path / "m")]) == 2

    short = tmp_path / "short.csv"
    write_responses(short, y[:5])
    assert main(["fit", "--images", imgdir, "--y", str(short),
                 "--out", str(tmp_path / "m")]) == 2

    bad_struct = tmp_path / "structure.json"
    bad_struct.write_text("{not json")
    assert main(["fit", "--images", imgdir, "--y", good_y, "--out", str(tmp_path / "m"),
                 "--structure", str(bad_struct)]) == 2

    mismatched = tmp_path / "mismatch.json"
    mismatched.write_text(json.dumps({"image_dims": [4, 4], "factor_dims": [[2, 2], [2, 2]]}))
    assert main(["fit", "--images", imgdir, "--y", good_y, "--out", str(tmp_path / "m"),
                 "--structure", str(mismatched)]) == 2

    assert main(["fit", "--images", imgdir, "--y", good_y, "--out", str(tmp_path / "m"),
                 "--rank", "bogus"]) == 2
    assert main(["fit", "--images", imgdir, "--y", good_y, "--out", str(tmp_path / "m"),
                 "--rank", "scan", "--ranks", " , "]) == 2

    cfg = tmp_path / "config.json"
    write_config(cfg, bogus_knob=1)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    err = capsys.readouterr().err
    assert "bogus_knob" in err


def test_solver_failure_exits_3(tmp_path):
    imgdir, _, _, _, _ = write_rank1_dataset(tmp_path, n=20, seed=5)
    zeros = tmp_path / "zeros.csv"
    write_responses(zeros, np.zeros(20))
    assert main(["fit", "--images", imgdir, "--y", str(zeros),
                 "--out", str(tmp_path / "m"), "--no-center"]) == 3


def test_predict_rejects_missing_model(tmp_path):
    imgdir, _, _, _, _ = write_rank1_dataset(tmp_path, n=4, seed=7)
    assert main(["predict", "--model", str(tmp_path / "nope"), "--images", imgdir,
                 "--out", str(tmp_path / "p.csv")]) == 2


def test_check_equivalence_reports_all_suites(tmp_path):
    out = tmp_path / "report.json"
    assert main(["check-equivalence", "--instances", "25", "--seed", "1",
                 "--out", str(out)]) == 0
    report = json.load(open(out))
    assert report["passed"] is True
    names = sorted(report["suites"].keys())
    assert names == ["conv_chain_inner_product", "cp_regrouping", "kron_rank1_reshape"]
    for suite in report["suites"].values():
        assert suite["passed"] is True
    out2 = tmp_path / "report2.json"
    assert main(["check-equivalence", "--instances", "25", "--seed", "1",
                 "--out", str(out2)]) == 0
    assert out.read_bytes() == out2.read_bytes()


def test_diagnose_without_truth_reports_probe_only(tmp_path):
    imgdir, ycsv, _, _, _ = write_rank1_dataset(tmp_path, n=120, seed=19)
    model_dir = tmp_path / "model"
    assert main(["fit", "--images", imgdir, "--y", ycsv, "--out", str(model_dir),
                 "--no-center"]) == 0
    out = tmp_path / "diag.json"
    assert main(["diagnose", "--model", str(model_dir), "--images", imgdir,
                 "--y", ycsv, "--probes", "10", "--out", str(out)]) == 0
    d = json.load(open(out))
    assert isinstance(d["delta_hat"], float)
    assert d["constants"] is None and d["decay_verdict"] is None
    assert d["identifiability"]["necessary"] in (True, False)
    assert any("truth" in note for note in d["notes"])


def test_diagnose_with_truth_evaluates_constants(tmp_path):
    imgdir, ycsv, truth, _, _ = write_rank1_dataset(tmp_path, n=500, seed=31)
    model_dir = tmp_path / "model"
    assert main(["fit", "--images", imgdir, "--y", ycsv, "--out", str(model_dir),
                 "--no-center"]) == 0
    out = tmp_path / "diag.json"
    assert main(["diagnose", "--model", str(model_dir), "--images", imgdir,
                 "--y", ycsv, "--truth", truth, "--out", str(out)]) == 0
    d = json.load(open(out))
    assert d["delta_hat"] < 1.0 / 3.0
    assert d["constants"] is not None
    assert d["constants"]["depth"] == 3
    assert d["decay_verdict"] is not None
    assert d["notes"] == []
    # strict JSON: non-finite floats must have been nulled out
    json.dumps(d, allow_nan=False)


def test_diagnose_flags_non_rank1_truth(tmp_path):
    imgdir, ycsv, _, x, y = write_rank1_dataset(tmp_path, n=120, seed=23)
    # a circle indicator is not a Kronecker product; diagnose should degrade
    circle = np.zeros((8, 8))
    circle[2:5, 3:6] = 1.0
    truth2 = tmp_path / "truth2.dkt"
    write_dkt(str(truth2), circle)
    model_dir = tmp_path / "model"
    assert main(["fit", "--images", imgdir, "--y", ycsv, "--out", str(model_dir),
                 "--no-center"]) == 0
    out = tmp_path / "diag.json"
    assert main(["diagnose", "--model", str(model_dir), "--images", imgdir,
                 "--y", ycsv, "--truth", str(truth2), "--out", str(out)]) == 0
    d = json.load(open(out))
    assert d["constants"] is None
    assert any("initialization distance unavailable" in note for note in d["notes"])


def test_installed_entry_point_runs():
    exe = shutil.which("dkn")
    assert exe is not None, "console script 'dkn' not on PATH"
    proc = subprocess.run([exe, "--help"], capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0
    assert "simulate" in proc.stdout and "diagnose" in proc.stdout
