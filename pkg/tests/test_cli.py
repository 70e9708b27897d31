import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from latentcfm.cli import load_dataset, main
from latentcfm.io import file_sha256, load_container


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else json.loads(err))


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def trained(workdir):
    data = workdir / "tri.lcfm"
    assert main(["data", "gen-triangle", "--preset", "0", "--n", "2000", "--out", str(data)]) == 0
    runs = {}
    for method in ("icfm", "latent-cfm-vae"):
        r = workdir / method
        code = main(["train", "--data", str(data), "--run", str(r), "--method", method,
                     "--steps", "60", "--batch", "32", "--hidden-dims", "16,16", "--vae-steps", "30",
                     "--eval-every", "30", "--eval-n", "200", "--checkpoint-every", "30"])
        assert code == 0
        runs[method] = r
    return data, runs


def test_dataset_files(capsys, workdir):
    path = workdir / "small.lcfm"
    code, out = run(capsys, "data", "gen-triangle", "--k", "3", "--n", "100", "--seed", "4", "--out", path)
    assert code == 0
    train, test, meta = load_dataset(str(path))
    assert train.shape == test.shape == (50, 2) and meta["config"]["k"] == 3
    again = workdir / "again.lcfm"
    run(capsys, "data", "gen-triangle", "--k", "3", "--n", "100", "--seed", "4", "--out", again)
    assert file_sha256(str(path)) == file_sha256(str(again))
    darcy = workdir / "darcy.lcfm"
    code, _ = run(capsys, "data", "gen-darcy", "--N", "16", "--n", "3", "--out", darcy)
    assert code == 0
    flat, none, meta = load_dataset(str(darcy))
    assert flat.shape == (3, 2 * 16 * 16) and none is None and meta["kind"] == "darcy"


def test_train_artifacts(trained):
    _, runs = trained
    r = runs["icfm"]
    for name in ("config.json", "metrics.csv", "model.lcfm", "manifest.json", "data.json"):
        assert (r / name).exists(), name
    assert sorted(os.listdir(r / "checkpoints")) == ["step_0000030.lcfm", "step_0000060.lcfm"]
    table = rows(r / "metrics.csv")
    assert set(table[0]) == {"step", "metric", "value", "seed", "method", "n_a", "n_b", "config_hash"}
    w2 = [row for row in table if row["metric"] == "w2"]
    assert [int(row["step"]) for row in w2] == [30, 60]
    assert all(row["n_b"] == "200" for row in w2)
    man = json.loads((r / "manifest.json").read_text())
    assert man["artifacts"]["model.lcfm"] == file_sha256(str(r / "model.lcfm"))
    assert man["commands"][0]["argv"][1] == "train"


def test_sample_eval_and_report(capsys, trained):
    data, runs = trained
    r = runs["icfm"]
    code, out = run(capsys, "sample", "--run", r, "--n", "50", "--trajectory", "3",
                    "--solver", "euler", "--solver-steps", "10")
    assert code == 0 and out["count"] == 50
    _, arrays = load_container(out["out"])
    assert arrays["train"].shape == (50, 2)
    traj = rows(r / "samples" / "samples_trajectory.csv")
    assert len(traj) == 3 * 11
    code, res = run(capsys, "eval", "--run", r, "--metric", "w2", "--samples", out["out"], "--n", "50")
    assert code == 0 and res["w2"] == pytest.approx(np.sqrt(2 * res["sinkhorn"]))
    code, res = run(capsys, "eval", "--run", r, "--metric", "kernel", "--n", "50",
                    "--solver", "euler", "--solver-steps", "10")
    assert code == 0 and res["energy"] >= 0
    code, res = run(capsys, "eval", "--run", r, "--metric", "coverage", "--n", "50",
                    "--solver", "euler", "--solver-steps", "10")
    assert code == 0 and 0 <= res["missing_modes"] <= 16
    metrics = [row["metric"] for row in rows(r / "metrics.csv")]
    assert "energy" in metrics and "missing_modes" in metrics
    code, paths = run(capsys, "report", "--run", r, "--run", runs["latent-cfm-vae"], "--out", r.parent / "rep")
    assert code == 0
    curve = rows(paths["curve"])
    assert {row["method"] for row in curve} == {"icfm", "latent-cfm-vae"}
    assert len(rows(paths["trajectories"])) == 33


def test_compose_and_resume(capsys, trained):
    data, runs = trained
    r = runs["latent-cfm-vae"]
    code, out = run(capsys, "compose", "--run", r, "--anchor-a", "0.125,0.125", "--anchor-b",
                    "0.375,0.125", "--n", "20", "--n-ode", "10")
    assert code == 0 and out["count"] == 20
    code, out = run(capsys, "compose", "--run", runs["icfm"], "--anchor-a", "0.1,0.1", "--n", "5")
    assert code == 2
    ckpt = r / "checkpoints" / "step_0000030.lcfm"
    before = load_container(str(r / "model.lcfm"))[1]
    code, _ = run(capsys, "train", "--data", data, "--run", r, "--method", "latent-cfm-vae",
                  "--steps", "60", "--batch", "32", "--hidden-dims", "16,16", "--vae-steps", "30",
                  "--eval-every", "30", "--eval-n", "200", "--checkpoint-every", "30", "--resume", ckpt)
    assert code == 0
    after = load_container(str(r / "model.lcfm"))[1]
    assert after.keys() == before.keys()
    for k in before:
        np.testing.assert_array_equal(after[k], before[k], err_msg=k)
    man = json.loads((r / "manifest.json").read_text())
    assert len(man["commands"]) >= 3


def test_residual_eval_on_darcy(capsys, workdir):
    data = workdir / "d.lcfm"
    run(capsys, "data", "gen-darcy", "--N", "16", "--n", "4", "--out", data)
    r = workdir / "darcy-run"
    code, _ = run(capsys, "train", "--data", data, "--run", r, "--steps", "5", "--batch", "2",
                  "--hidden-dims", "8")
    assert code == 0
    code, res = run(capsys, "eval", "--run", r, "--metric", "residual", "--n", "3",
                    "--solver", "euler", "--solver-steps", "5")
    assert code == 0 and res["residual_median"] > 0
    assert len(json.loads((r / "residuals.json").read_text())["residuals"]) == 3
    code, paths = run(capsys, "report", "--run", r, "--out", r / "rep")
    hist = rows(paths["residual_hist"])
    assert len(hist) == 50 and sum(int(h["count"]) for h in hist) == 3


def test_exit_codes(capsys, workdir, trained):
    data, runs = trained
    code, err = run(capsys, "train", "--data", data)
    assert code == 2 and err["exit_code"] == 2
    code, err = run(capsys, "train", "--data", data, "--run", workdir / "x", "--method", "diffusion")
    assert code == 2 and "unknown method" in err["error"]
    code, err = run(capsys, "train", "--data", workdir / "missing.lcfm", "--run", workdir / "y")
    assert code == 2 and err["type"] == "FileNotFoundError"
    code, err = run(capsys, "data", "gen-triangle", "--k", "0", "--out", workdir / "z.lcfm")
    assert code == 2
    code, err = run(capsys, "sample", "--run", workdir / "nowhere")
    assert code == 2
    code, err = run(capsys, "eval", "--run", runs["icfm"], "--metric", "residual", "--n", "5",
                    "--solver", "euler", "--solver-steps", "2")
    assert code == 2
    code, err = run(capsys, "frobnicate")
    assert code == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "latentcfm", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "train" in out.stdout
