import csv
import hashlib
import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from protoclus.cli import main
from protoclus.evalkit import METRICS_SCHEMA
from protoclus.ot_assign import AssignmentProblem, sinkhorn_project

SMALL = {"M": 3, "N_obj": 4, "samples_per_composition": 10, "D_raw": 8, "seed": 1}


def digest_dir(path):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(path.iterdir())}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(SMALL))
    assert main(["gen-data", "--spec", str(root / "spec.json"), "--out", str(root / "data")]) == 0
    return root / "data"


@pytest.fixture(scope="module")
def ckpt(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--epochs", "3",
                 "--lr", "1e-2"]) == 0
    return out


def read_log(path):
    return [json.loads(line) for line in (path / "train_log.jsonl").read_text().splitlines()]


# -- gen-data ----------------------------------------------------------------------------------

def test_gen_data_contract(data_dir, tmp_path, capsys):
    assert sorted(p.name for p in data_dir.iterdir()) == ["features.f64", "labels.csv", "meta.json"]
    (tmp_path / "spec.json").write_text(json.dumps(SMALL))
    assert main(["gen-data", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "d")]) == 0
    assert "120 samples" in capsys.readouterr().out
    assert digest_dir(tmp_path / "d") == digest_dir(data_dir)


def test_gen_data_missing_spec(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["gen-data", "--spec", str(missing), "--out", str(tmp_path / "d")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_gen_data_bad_spec(tmp_path, capsys):
    (tmp_path / "s.json").write_text('{"M": 2, "colour": 3}')
    assert main(["gen-data", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "d")]) == 2
    assert "colour" in capsys.readouterr().err


def test_gen_data_infeasible_split(tmp_path):
    (tmp_path / "s.json").write_text('{"M": 2, "N_obj": 3, "unseen_fraction": 0.7}')
    assert main(["gen-data", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "d")]) == 3


# -- train -------------------------------------------------------------------------------------

def test_train_outputs(ckpt):
    names = sorted(p.name for p in ckpt.iterdir())
    assert names == ["bank_attribute.pbnk", "bank_object.pbnk", "config.json", "model.cpmd",
                     "train_log.jsonl"]
    log = read_log(ckpt)
    assert [e["epoch"] for e in log] == [1, 2, 3]
    assert set(log[0]) == {"timestamp", "config_hash", "epoch", "l_bas", "l_pcl", "l_pdl",
                           "total", "solver_warnings", "val_auc"}


def test_train_defaults_run_fifteen_epochs(data_dir, tmp_path):
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path)]) == 0
    log = read_log(tmp_path)
    assert len(log) == 15
    assert json.loads((tmp_path / "config.json").read_text())["epochs"] == 15


def test_train_ablate_to_baseline(data_dir, tmp_path):
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--epochs", "1",
                 "--ablate", "no-pcl", "no-pdl"]) == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert (cfg["enable_pcl"], cfg["enable_pdl"], cfg["cluster_branch"]) == (False, False, "none")
    assert not list(tmp_path.glob("bank_*"))
    assert read_log(tmp_path)[0]["l_pcl"] == 0.0


def test_train_classical_ot(data_dir, tmp_path):
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--epochs", "1",
                 "--clustering-strategy", "classical_ot"]) == 0
    assert json.loads((tmp_path / "config.json").read_text())["kappa"] == 0.0


def test_train_deterministic_modulo_timestamp(data_dir, ckpt, tmp_path):
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--epochs", "3",
                 "--lr", "1e-2"]) == 0
    strip = lambda log: [{k: v for k, v in e.items() if k != "timestamp"} for e in log]  # noqa: E731
    assert strip(read_log(tmp_path)) == strip(read_log(ckpt))
    a, b = digest_dir(tmp_path), digest_dir(ckpt)
    a.pop("train_log.jsonl"), b.pop("train_log.jsonl")
    assert a == b


def test_train_invalid_config(data_dir, tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"mu": 2.0}')
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "o"),
                 "--config", str(tmp_path / "c.json")]) == 2
    assert "mu" in capsys.readouterr().err


def test_train_missing_data(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 3


def test_bad_thread_env(data_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("PROTOCLUS_THREADS", "zero")
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--epochs", "1"]) == 2


def test_thread_env_does_not_change_results(data_dir, ckpt, tmp_path, monkeypatch):
    monkeypatch.setenv("PROTOCLUS_THREADS", "1")
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--epochs", "3",
                 "--lr", "1e-2"]) == 0
    assert (tmp_path / "model.cpmd").read_bytes() == (ckpt / "model.cpmd").read_bytes()


# -- eval --------------------------------------------------------------------------------------

def run_eval(capsys, *args):
    code = main(["eval", *args])
    return code, capsys.readouterr()


@pytest.mark.parametrize("world", ["closed", "open"])
def test_eval_worlds(ckpt, data_dir, capsys, world, tmp_path):
    code, out = run_eval(capsys, "--checkpoint", str(ckpt), "--data", str(data_dir),
                         "--world", world, "--out", str(tmp_path / "m.json"))
    assert code == 0
    report = json.loads(out.out)
    jsonschema.validate(report, METRICS_SCHEMA)
    assert report["world"] == world
    assert json.loads((tmp_path / "m.json").read_text()) == report
    assert report["config_hash"] == read_log(ckpt)[0]["config_hash"]


def test_eval_both_and_no_calibration(ckpt, data_dir, capsys):
    code, out = run_eval(capsys, "--checkpoint", str(ckpt / "model.cpmd"), "--data", str(data_dir),
                         "--world", "both")
    assert code == 0
    closed, opened = json.loads(out.out)
    assert (closed["world"], opened["world"]) == ("closed", "open")
    assert opened["threshold"] is not None
    code, out = run_eval(capsys, "--checkpoint", str(ckpt), "--data", str(data_dir),
                         "--world", "open", "--no-calibration")
    assert json.loads(out.out)["threshold"] is None


def test_eval_mismatch(ckpt, tmp_path, capsys):
    (tmp_path / "s.json").write_text(json.dumps({**SMALL, "M": 4}))
    main(["gen-data", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "d")])
    code, out = run_eval(capsys, "--checkpoint", str(ckpt), "--data", str(tmp_path / "d"))
    assert code == 3 and "does not match" in out.err


def test_eval_corrupt_checkpoint(ckpt, data_dir, tmp_path, capsys):
    bad = tmp_path / "model.cpmd"
    bad.write_bytes((ckpt / "model.cpmd").read_bytes()[:-4])
    code, _ = run_eval(capsys, "--checkpoint", str(bad), "--data", str(data_dir))
    assert code == 3


# -- solve-ot ----------------------------------------------------------------------------------

def problem(tmp_path, K=3, N=7, seed=0, **extra):
    r = np.random.default_rng(seed)
    Q = r.random((K, N)) + 0.1
    Q /= Q.sum(axis=0)
    F = r.standard_normal((4, N))
    F /= np.linalg.norm(F, axis=0)
    S = F.T @ F
    path = tmp_path / f"p{K}_{seed}.json"
    path.write_text(json.dumps({"Q": Q.tolist(), "S": S.tolist(), **extra}))
    return path, Q, S


def solve(capsys, *args):
    assert main(["solve-ot", *args]) == 0
    return json.loads(capsys.readouterr().out)


def test_solve_ot_k1(tmp_path, capsys):
    path, _, _ = problem(tmp_path, K=1)
    sol = solve(capsys, "--problem", str(path))
    assert sol["L"] == [[1.0] * 7] and sol["hard"] == [0] * 7 and sol["trace"] == []


def test_solve_ot_kappa0_matches_projection(tmp_path, capsys):
    path, Q, S = problem(tmp_path, kappa=2.0, epsilon=0.05)
    sol = solve(capsys, "--problem", str(path), "--kappa0")
    K, N = Q.shape
    ref = sinkhorn_project(-np.log(Q), 0.05, 1.0, np.full(K, N / K))
    np.testing.assert_allclose(sol["L"], ref, atol=1e-9)


def test_solve_ot_trace(tmp_path, capsys):
    for seed in range(5):
        path, _, _ = problem(tmp_path, seed=seed, kappa=1.0)
        trace = solve(capsys, "--problem", str(path), "--trace")["trace"]
        assert len(trace) >= 1
        assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def test_solve_ot_marginals(tmp_path):
    path, Q, _ = problem(tmp_path, K=4, N=10, seed=3)
    out = tmp_path / "sol.json"
    assert main(["solve-ot", "--problem", str(path), "--out", str(out)]) == 0
    L = np.array(json.loads(out.read_text())["L"])
    np.testing.assert_allclose(L.sum(axis=1), 10 / 4, atol=1e-6)
    np.testing.assert_allclose(L.sum(axis=0), 1.0, atol=1e-6)


def test_solve_ot_malformed_json(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"Q": [[1, 2],\n  [3, }')
    assert main(["solve-ot", "--problem", str(path)]) == 2
    assert "line 2 column" in capsys.readouterr().err


def test_solve_ot_missing_key(tmp_path, capsys):
    path = tmp_path / "p.json"
    path.write_text('{"Q": [[1.0]]}')
    assert main(["solve-ot", "--problem", str(path)]) == 2
    assert "'S'" in capsys.readouterr().err


def test_solve_ot_shape_mismatch(tmp_path, capsys):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"Q": [[0.5, 0.5], [0.5, 0.5]], "S": [[1.0]]}))
    assert main(["solve-ot", "--problem", str(path)]) in (2, 3)


# -- ablate ------------------------------------------------------------------------------------

def test_ablate_csv(data_dir, tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"bas": {"enable_pcl": False, "enable_pdl": False,
                                        "cluster_branch": "none"}, "full": {}}))
    out = tmp_path / "ab.csv"
    assert main(["ablate", "--data", str(data_dir), "--grid", str(grid), "--seeds", "2",
                 "--epochs", "1", "--world", "both", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 2 * 2 * 2 + 2 * 2
    assert {r["variant"] for r in rows} == {"bas", "full"}
    means = [r for r in rows if r["seed"] == "mean"]
    assert len(means) == 4
    for m in means:
        per = [float(r["auc"]) for r in rows
               if r["variant"] == m["variant"] and r["world"] == m["world"] and r["seed"] != "mean"]
        assert float(m["auc"]) == pytest.approx(np.mean(per), abs=1e-6)


def test_ablate_bad_grid(tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text('{"x": {"mu": 7}}')
    assert main(["ablate", "--grid", str(grid), "--seeds", "1"]) == 2


def test_console_script_usage():
    res = subprocess.run([sys.executable, "-m", "protoclus.cli", "frobnicate"],
                         capture_output=True, text=True)
    assert res.returncode == 2
    res = subprocess.run([sys.executable, "-m", "protoclus.cli", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "solve-ot" in res.stdout
