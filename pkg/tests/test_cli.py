import json
import os
import shutil
import subprocess

import pytest

from multigraph_pf.cli import load_config, run

from conftest import FIXTURES

IEEE4 = str(FIXTURES / "ieee4.dss")
MESH = """New Circuit.c basekv=4.16 bus1=S
New LineCode.c3 nphases=3 units=km rmatrix=(0.3 | 0.1 0.3 | 0.1 0.1 0.3) xmatrix=(0.8 | 0.3 0.8 | 0.3 0.3 0.8)
New Line.L1 bus1=S bus2=B1 linecode=c3 length=1 units=km
New Line.L2 bus1=B1 bus2=B2 linecode=c3 length=1 units=km
New Line.L3 bus1=B2 bus2=S linecode=c3 length=1 units=km
"""


@pytest.fixture(scope="module")
def gen_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert run(["gen", IEEE4, "--n", "20", "--seed", "7", "--out", str(out), "--quiet"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(gen_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    argv = ["train", str(gen_dir / "train.jsonl"), "--val", str(gen_dir / "val.jsonl"), "--epochs", "2",
            "--hidden-dim", "8", "--state-dim", "4", "--out", str(out), "--quiet"]
    assert run(argv) == 0
    return out


def test_solve_writes_solution(tmp_path):
    out = tmp_path / "sol.json"
    assert run(["solve", IEEE4, "--out", str(out), "--quiet"]) == 0
    doc = json.loads(out.read_text())
    assert doc["schema"] == "pf-solution/1"
    assert doc["converged"] is True


def test_solve_mesh_is_numeric_failure(tmp_path, capsys):
    path = tmp_path / "mesh.dss"
    path.write_text(MESH)
    assert run(["solve", str(path)]) == 3
    assert "mesh unsupported" in capsys.readouterr().err


def test_solve_non_convergence_is_numeric_failure():
    assert run(["solve", IEEE4, "--max-iter", "1", "--quiet"]) == 3


def test_input_errors(tmp_path):
    assert run(["parse", str(tmp_path / "missing.dss"), "--quiet"]) == 2
    bad = tmp_path / "bad.dss"
    bad.write_text("New Circuit.x\nNew LineCode.c rmatrix=(1 2\n")
    assert run(["parse", str(bad), "--quiet"]) == 2
    assert run(["solve", IEEE4, "--caps", "x", "--quiet"]) == 2


def test_usage_errors(capsys):
    assert run(["frobnicate"]) == 1
    assert run(["solve"]) == 1
    assert run(["solve", IEEE4, "--no-such-flag"]) == 1
    assert run(["parse", IEEE4, "--out", "a.json", "--json-out", "b.json"]) == 1


def test_parse_json_out(tmp_path):
    out = tmp_path / "spec.json"
    assert run(["parse", IEEE4, "--json-out", str(out), "--quiet"]) == 0
    assert json.loads(out.read_text())["source"]["name"] == "ieee4"


def test_graph_to_stdout(capsys):
    assert run(["graph", IEEE4, "--quiet"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["nodes"]) > 0 and len(doc["edges"]) > 0


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["--version"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for schema in ("pf-solution/1", "pf-dataset/1", "pfmultinet-checkpoint/1"):
        assert schema in text


def test_gen_split_and_seed(gen_dir, tmp_path):
    lines = (gen_dir / "train.jsonl").read_text().splitlines()
    assert len(lines) == 1 + 16
    assert len((gen_dir / "val.jsonl").read_text().splitlines()) == 1 + 4
    assert run(["gen", IEEE4, "--n", "20", "--seed", "7", "--out", str(tmp_path), "--quiet"]) == 0
    assert (tmp_path / "train.jsonl").read_bytes() == (gen_dir / "train.jsonl").read_bytes()


def test_gen_discard_abort_is_numeric(tmp_path):
    argv = ["gen", IEEE4, "--n", "5", "--out", str(tmp_path), "--quiet", "--config", str(tmp_path / "c.json")]
    (tmp_path / "c.json").write_text(json.dumps({"max_iter": 1}))
    assert run(argv) == 3
    assert not (tmp_path / "train.jsonl").exists()


def test_train_outputs(trained):
    hist = json.loads((trained / "history.json").read_text())
    assert len(hist["history"]) == 2
    assert hist["model_config"]["hidden_dim"] == 8
    assert json.loads((trained / "model.json").read_text())["schema"] == "pfmultinet-checkpoint/1"


def test_config_precedence(gen_dir, tmp_path):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("[model]\nhidden_dim = 4\nstate_dim = 4\n[train]\nepochs = 3\nlr0 = 0.002\n")
    out = tmp_path / "run"
    argv = ["train", str(gen_dir / "train.jsonl"), "--config", str(cfg), "--epochs", "1", "--out", str(out),
            "--quiet"]
    assert run(argv) == 0
    hist = json.loads((out / "history.json").read_text())
    assert hist["train_config"]["epochs"] == 1  # flag beats config
    assert hist["train_config"]["lr0"] == 0.002  # config beats default
    assert hist["model_config"]["hidden_dim"] == 4
    assert hist["model_config"]["num_layers"] == 4  # default


def test_unknown_config_field_rejected(gen_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1, "dropout": 0.5}))
    assert run(["train", str(gen_dir / "train.jsonl"), "--config", str(cfg), "--out", str(tmp_path),
                "--quiet"]) == 2


def test_load_config_flattens_sections(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("seed = 3\n[train]\nepochs = 5\n")
    assert load_config(p) == {"seed": 3, "epochs": 5}


def test_eval_and_bench(trained, gen_dir, tmp_path, capsys):
    ckpt, val = str(trained / "model.json"), str(gen_dir / "val.jsonl")
    out = tmp_path / "metrics.json"
    assert run(["eval", ckpt, val, "--out", str(out)]) == 0
    assert set(json.loads(out.read_text())["nse"]) == {"P", "Q", "V", "phi"}
    assert "NSE mean" in capsys.readouterr().out
    assert run(["bench", ckpt, val, "--batch-sizes", "1,4", "--quiet"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc["forward"]) == {"1", "4"}


def test_artifacts_are_world_readable(tmp_path):
    out = tmp_path / "sol.json"
    old = os.umask(0o022)
    try:
        assert run(["solve", IEEE4, "--out", str(out), "--quiet"]) == 0
    finally:
        os.umask(old)
    assert out.stat().st_mode & 0o777 == 0o644
    assert [p.name for p in tmp_path.iterdir()] == ["sol.json"]  # no temp files left


def test_failed_command_leaves_no_artifact(tmp_path):
    out = tmp_path / "sol.json"
    assert run(["solve", IEEE4, "--max-iter", "1", "--out", str(out), "--quiet"]) == 3
    assert list(tmp_path.iterdir()) == []


@pytest.mark.skipif(shutil.which("multigraph-pf") is None, reason="console script not installed")
def test_console_script():
    res = subprocess.run(["multigraph-pf", "solve", IEEE4, "--quiet"], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["converged"] is True
