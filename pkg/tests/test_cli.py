"""End-to-end checks of the command-line front-end and its artifacts."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from weakpde import cli, mlp
from weakpde.pde_problem import benchmark
from weakpde.reference_oracle import SolutionGrid


def write_config(tmp_path, name="config.json", **overrides):
    doc = {
        "schema_version": 1,
        "problem": {"name": "adv1dt"},
        "mlp": {"widths": [4]},
        "train": {"epochs": 8, "seed": 0, "weights": [1, 10, 10]},
        "counts": {"n_v": [5, 5]},
        "output_dir": str(tmp_path / "run"),
        "report": {"grid": [11, 21], "oracle": False},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(doc.get(key), dict):
            doc[key] = {**doc[key], **value}
        else:
            doc[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path, doc["output_dir"]


def run_dir_bytes(run):
    return {name: (run / name).read_bytes() if hasattr(run, "read_bytes")
            else open(os.path.join(run, name), "rb").read()
            for name in sorted(os.listdir(run))}


# ---------------------------------------------------------------------------
# train


def test_train_writes_all_artifacts(tmp_path):
    cfg, run = write_config(
        tmp_path, report={"grid": [11, 21], "oracle": True,
                          "oracle_resolution": [21, 41]})
    assert cli.main(["train", str(cfg)]) == 0
    expected = {"resolved_config.json", "checkpoint.json", "loss_history.csv",
                "training_points.csv", "solution.csv", "solution.meta.json",
                "residual.csv", "residual.meta.json", "report.json"}
    assert expected <= set(os.listdir(run))

    report = json.load(open(os.path.join(run, "report.json")))
    problem = benchmark("adv1dt")
    assert report["n_params"] == mlp.param_count(mlp.MLPConfig(2, (4,)))
    assert report["epochs_run"] == 8
    assert np.isclose(report["peclet"], problem.peclet())
    assert np.isclose(report["courant"], 1.0)  # equal spacing on both axes
    assert isinstance(report["err"], float) and report["err"] > 0.0
    assert isinstance(report["err_reference"], str)
    assert report["training_points"]["interior"] == 25

    lines = open(os.path.join(run, "loss_history.csv")).read().splitlines()
    assert lines[0] == "epoch,variational,ic,bc,total,residual_norm"
    assert len(lines) == 9
    assert lines[1].split(",")[0] == "1"

    ckpt = json.load(open(os.path.join(run, "checkpoint.json")))
    assert ckpt["format"] == "weakpde-checkpoint"
    assert ckpt["problem"]["name"] == "adv1dt"
    assert len(ckpt["optimizer"]["m"]) == report["n_params"]
    assert ckpt["optimizer"]["count"] == 8


def test_resolved_config_reruns_bitwise(tmp_path):
    cfg, run = write_config(tmp_path)
    assert cli.main(["train", str(cfg)]) == 0
    first = run_dir_bytes(run)
    assert cli.main(["train", os.path.join(run, "resolved_config.json")]) == 0
    assert run_dir_bytes(run) == first


def test_training_point_dump_tags_adaptive_rows(tmp_path):
    cfg, run = write_config(
        tmp_path,
        counts={"n_v": [4, 4]},
        train={"epochs": 8, "seed": 0, "weights": [1, 10, 10], "frac": 0.5,
               "max_adaptive_rounds": 1,
               "convergence": {"window": 3, "threshold": 10.0}})
    assert cli.main(["train", str(cfg)]) == 0
    rows = open(os.path.join(run, "training_points.csv")).read().splitlines()
    assert rows[0] == "kind,segment,source,t,x1"
    interior = [r for r in rows[1:] if r.startswith("interior,")]
    assert len(interior) == 24  # floor(1.5 * 16)
    assert sum(",optimal," in r for r in interior) == 8
    assert all(",uniform," in r for r in interior[:16])
    report = json.load(open(os.path.join(run, "report.json")))
    assert report["rounds_used"] == 1
    assert report["training_points"]["interior"] == 24


def test_config_errors_exit_2(tmp_path, capsys):
    bad = [
        {"schema_version": 99},
        {"problem": {"name": "unknown_problem"}},
        {"counts": {"n_v": [5, 5], "n_boundary": 3}},
        {"train": {"epochs": 0}},
        {"mlp": {"widths": []}},
        {"report": {"grid": [11]}},
    ]
    for overrides in bad:
        cfg, _ = write_config(tmp_path, **overrides)
        assert cli.main(["train", str(cfg)]) == 2
        assert "error:" in capsys.readouterr().err
    cfg, _ = write_config(tmp_path)
    doc = json.loads(cfg.read_text())
    del doc["counts"]
    cfg.write_text(json.dumps(doc))
    assert cli.main(["train", str(cfg)]) == 2


def test_missing_config_file_exits_4(tmp_path, capsys):
    assert cli.main(["train", str(tmp_path / "nope.json")]) == 4
    assert "i/o failure" in capsys.readouterr().err


def test_malformed_json_exits_2(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert cli.main(["train", str(path)]) == 2


def test_worker_env_is_validated(tmp_path, monkeypatch):
    cfg, _ = write_config(tmp_path, train={"epochs": 1})
    monkeypatch.setenv(cli.WORKERS_ENV, "zero")
    assert cli.main(["train", str(cfg)]) == 2
    monkeypatch.setenv(cli.WORKERS_ENV, "0")
    assert cli.main(["train", str(cfg)]) == 2
    monkeypatch.setenv(cli.WORKERS_ENV, "2")
    with pytest.warns(UserWarning, match="single-threaded"):
        assert cli.main(["train", str(cfg)]) == 0


# ---------------------------------------------------------------------------
# eval


def trained_checkpoint(tmp_path, **overrides):
    cfg, run = write_config(tmp_path, **overrides)
    assert cli.main(["train", str(cfg)]) == 0
    return os.path.join(run, "checkpoint.json"), run


def test_eval_reproduces_training_report_bitwise(tmp_path):
    ckpt, run = trained_checkpoint(tmp_path)
    out = tmp_path / "eval.csv"
    assert cli.main(["eval", ckpt, "--grid", "11,21", "--out", str(out)]) == 0
    assert out.read_bytes() == \
        open(os.path.join(run, "solution.csv"), "rb").read()
    assert (tmp_path / "eval.meta.json").read_bytes() == \
        open(os.path.join(run, "solution.meta.json"), "rb").read()


def test_eval_time_snapshot(tmp_path):
    ckpt, _ = trained_checkpoint(tmp_path)
    out = tmp_path / "snap.csv"
    assert cli.main(["eval", ckpt, "--time", "1.0", "--grid", "21",
                     "--out", str(out)]) == 0
    grid = SolutionGrid.load(out)
    assert grid.axis_names == ("x1",)
    assert grid.shape == (21,)
    assert grid.provenance["t"] == 1.0


def test_eval_time_on_steady_checkpoint_exits_2(tmp_path, capsys):
    ckpt, _ = trained_checkpoint(
        tmp_path,
        problem={"name": "manufactured2d"},
        train={"epochs": 2, "seed": 0, "weights": [10, 1]},
        counts={"n_v": [4, 4]},
        report={"grid": [11, 11], "oracle": False})
    assert cli.main(["eval", ckpt, "--time", "0.5"]) == 2
    assert "steady" in capsys.readouterr().err


def test_eval_parameter_sweep(tmp_path):
    ckpt, _ = trained_checkpoint(
        tmp_path,
        problem={"name": "adv1dt_mor"},
        train={"epochs": 2, "seed": 0, "weights": [1, 10, 10]},
        counts={"n_v": [4, 4], "param_samples": [[0.01], [0.03]]},
        report={"grid": [9, 11], "oracle": False})
    out = tmp_path / "sweep.csv"
    kappas = ["0.004", "0.008", "0.016", "0.024", "0.032"]
    args = ["eval", ckpt, "--grid", "9,11", "--out", str(out)]
    for k in kappas:
        args += ["--param", k]
    assert cli.main(args) == 0
    files = sorted(p.name for p in tmp_path.glob("sweep_p*.csv"))
    assert files == [f"sweep_p{i}.csv" for i in range(5)]
    for i, k in enumerate(kappas):
        grid = SolutionGrid.load(tmp_path / f"sweep_p{i}.csv")
        assert grid.provenance["p"] == [float(k)]


def test_eval_out_of_range_parameter_warns(tmp_path):
    ckpt, _ = trained_checkpoint(
        tmp_path,
        problem={"name": "adv1dt_mor"},
        train={"epochs": 2, "seed": 0, "weights": [1, 10, 10]},
        counts={"n_v": [4, 4], "param_samples": [[0.01], [0.03]]},
        report={"grid": [9, 11], "oracle": False})
    out = tmp_path / "extrap.csv"
    with pytest.warns(UserWarning, match="outside the trained range"):
        code = cli.main(["eval", ckpt, "--param", "0.5", "--grid", "9,11",
                         "--out", str(out)])
    assert code == 0 and out.exists()


def test_eval_rejects_param_on_plain_problem(tmp_path, capsys):
    ckpt, _ = trained_checkpoint(tmp_path)
    assert cli.main(["eval", ckpt, "--param", "0.1"]) == 2
    assert "no parameters" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# oracle


def test_oracle_series_initial_condition(tmp_path):
    out = tmp_path / "oracle.csv"
    assert cli.main(["oracle", "adv1dt", "--grid", "11,41",
                     "--out", str(out)]) == 0
    grid = SolutionGrid.load(out)
    assert grid.axis_names == ("t", "x1")
    x = grid.axes[1]
    assert np.allclose(grid.values[0], -np.sin(np.pi * x), atol=1e-8)


def test_oracle_options_and_errors(tmp_path, capsys):
    out = tmp_path / "exact.csv"
    assert cli.main(["oracle", "manufactured2d", "--option", "k=2",
                     "--grid", "11,11", "--out", str(out)]) == 0
    assert SolutionGrid.load(out).provenance["method"] == "closed-form"
    assert cli.main(["oracle", "unknown_problem", "--out", str(out)]) == 2
    assert "unknown benchmark" in capsys.readouterr().err
    assert cli.main(["oracle", "adv1dt", "--option", "kappa",
                     "--out", str(out)]) == 2


# ---------------------------------------------------------------------------
# sample


def test_sample_draws_reproducible_points(tmp_path):
    ckpt, _ = trained_checkpoint(tmp_path)
    out_a, out_b, out_c = (tmp_path / n for n in ("a.csv", "b.csv", "c.csv"))
    assert cli.main(["sample", ckpt, "--count", "50", "--seed", "3",
                     "--out", str(out_a)]) == 0
    assert cli.main(["sample", ckpt, "--count", "50", "--seed", "3",
                     "--out", str(out_b)]) == 0
    assert cli.main(["sample", ckpt, "--count", "50", "--seed", "4",
                     "--out", str(out_c)]) == 0
    assert out_a.read_bytes() == out_b.read_bytes()
    assert out_a.read_bytes() != out_c.read_bytes()

    lines = out_a.read_text().splitlines()
    assert lines[0] == "t,x1,residual"
    data = np.array([[float(v) for v in line.split(",")]
                     for line in lines[1:]])
    assert data.shape == (50, 3)
    # margin keeps supports of refined patches inside: delta = 1/3 per axis
    assert np.all(data[:, 0] >= 1.0 / 3 - 1e-12)
    assert np.all(data[:, 0] <= 2.0 - 1.0 / 3 + 1e-12)
    assert np.all(np.abs(data[:, 1]) <= 2.0 / 3 + 1e-12)
    assert np.all(data[:, 2] >= 0.0)


def test_sample_count_validation(tmp_path, capsys):
    ckpt, _ = trained_checkpoint(tmp_path)
    assert cli.main(["sample", ckpt, "--count", "0", "--seed", "1"]) == 2
    assert "positive" in capsys.readouterr().err


def test_corrupt_checkpoint_parameters_exit_3(tmp_path):
    ckpt, _ = trained_checkpoint(tmp_path)
    doc = json.load(open(ckpt))
    doc["model"]["params"][0] = float("nan")
    with open(ckpt, "w") as f:
        json.dump(doc, f)
    assert cli.main(["sample", ckpt, "--count", "5", "--seed", "1",
                     "--out", str(tmp_path / "s.csv")]) == 3


def test_non_checkpoint_document_exits_2(tmp_path):
    path = tmp_path / "model.json"
    path.write_text(json.dumps({"format": "something-else"}))
    assert cli.main(["eval", str(path)]) == 2


# ---------------------------------------------------------------------------
# entry point


def test_module_help_lists_subcommands():
    proc = subprocess.run([sys.executable, "-m", "weakpde.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("train", "eval", "oracle", "sample"):
        assert name in proc.stdout
