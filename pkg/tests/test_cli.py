import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from conftest import tiny_config
from vitdistill.cli import main
from vitdistill.pipeline import DistillPlan
from vitdistill.serialize import checkpoint_hash
from vitdistill.vit import ViTConfig, ViTModel


@pytest.fixture
def ws(tmp_path, monkeypatch):
    """Workspace with two small datasets and a depth-4 teacher checkpoint."""
    monkeypatch.chdir(tmp_path)
    assert main(["gen-data", "--out", "data", "--num-samples", "48", "--image-size", "8"]) == 0
    assert main(["gen-data", "--out", "test", "--num-samples", "32", "--image-size", "8", "--seed", "1"]) == 0
    ViTModel(tiny_config(depth=4), seed=0).save(tmp_path / "teacher")
    return tmp_path


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def plan_doc(**kw):
    doc = DistillPlan(student_config=tiny_config(), teacher_checkpoint="teacher", epochs=1, batch_size=16,
                      peak_lr=1e-3, warmup_epochs=0.5).to_dict()
    doc.update(kw)
    return doc


def run_dirs(ws, prefix):
    return sorted(p for p in (ws / "runs").glob(f"{prefix}-*"))


def test_zero_epoch_distill_creates_config_copy_and_initial_checkpoint(ws, capsys):
    plan = write_json(ws / "plan.json", plan_doc(epochs=0, seed=2))
    assert main(["distill", plan, "--data", "data"]) == 0
    [run] = run_dirs(ws, "distill")
    assert run.name == f"distill-{DistillPlan.from_dict(plan_doc(epochs=0, seed=2)).config_hash()}"
    assert (run / "plan.json").is_file() and (run / "run.json").is_file()
    loaded = ViTModel.load(run / "checkpoint")
    init = ViTModel(tiny_config(), seed=2)
    assert all(np.array_equal(loaded.params[n].data, init.params[n].data) for n in init.params)
    assert capsys.readouterr().out.strip() == f"runs/{run.name}"


def test_reruns_need_force(ws, capsys):
    plan = write_json(ws / "plan.json", plan_doc(epochs=0))
    assert main(["distill", plan, "--data", "data"]) == 0
    [run] = run_dirs(ws, "distill")
    marker = run / "note.txt"
    marker.write_text("keep")
    assert main(["distill", plan, "--data", "data"]) == 2
    assert marker.read_text() == "keep"
    assert "--force" in capsys.readouterr().err
    assert main(["distill", plan, "--data", "data", "--force"]) == 0
    assert not marker.exists()


def test_key_order_does_not_change_the_run_directory(ws):
    doc = plan_doc(epochs=0)
    a = write_json(ws / "a.json", doc)
    b = write_json(ws / "b.json", dict(reversed(list(doc.items()))))
    assert main(["distill", a, "--data", "data", "--runs", "r1"]) == 0
    assert main(["distill", b, "--data", "data", "--runs", "r2"]) == 0
    assert [p.name for p in (ws / "r1").iterdir()] == [p.name for p in (ws / "r2").iterdir()]


def test_schema_violation_reports_the_json_path(ws, capsys):
    bad = plan_doc()
    bad["student_config"]["heads"] = "two"
    assert main(["distill", write_json(ws / "bad.json", bad), "--data", "data"]) == 2
    assert "$.student_config.heads" in capsys.readouterr().err
    assert not (ws / "runs").exists()


def test_missing_and_malformed_inputs_are_config_errors(ws, capsys):
    assert main(["distill", "nope.json", "--data", "data"]) == 2
    (ws / "broken.json").write_text("{")
    assert main(["distill", "broken.json", "--data", "data"]) == 2
    assert main(["distill", write_json(ws / "p.json", plan_doc()), "--data", "nowhere"]) == 2


def test_numeric_failure_exits_3(ws, capsys):
    t = ViTModel(tiny_config(depth=4), seed=0)
    t.params["blocks.0.mlp.fc2.bias"].data[0] = np.nan
    t.save(ws / "bad_teacher")
    plan = write_json(ws / "p.json", plan_doc(teacher_checkpoint="bad_teacher"))
    assert main(["distill", plan, "--data", "data"]) == 3
    assert "NonFiniteError" in capsys.readouterr().err


def test_distill_twice_gives_identical_checkpoints(ws):
    plan = write_json(ws / "p.json", plan_doc(epochs=2, student_drop_path=0.1))
    assert main(["distill", plan, "--data", "data", "--runs", "r1"]) == 0
    assert main(["distill", plan, "--data", "data", "--runs", "r2"]) == 0
    [a], [b] = list((ws / "r1").iterdir()), list((ws / "r2").iterdir())
    assert (a / "checkpoint" / "tensors.bin").read_bytes() == (b / "checkpoint" / "tensors.bin").read_bytes()
    assert checkpoint_hash(a / "checkpoint") == checkpoint_hash(b / "checkpoint")


def test_chain_command(ws):
    stages = [plan_doc(student_config=tiny_config(depth=3).to_dict()),
              plan_doc(student_config=tiny_config(depth=2).to_dict(), teacher_checkpoint=None)]
    assert main(["chain", write_json(ws / "c.json", {"stages": stages}), "--data", "data"]) == 0
    [run] = run_dirs(ws, "chain")
    record = json.loads((run / "chain.json").read_text())
    assert record["completed"]
    assert record["stages"][1]["teacher_hash"] == record["stages"][0]["output_hash"]


DROP_PATH_ROWS = [{"teacher_drop_path": t, "student_drop_path": s}
                  for t, s in [(0.0, 0.0), (0.0, 0.1), (0.1, 0.1), (0.0, 0.2), (0.0, 0.3)]]


def test_grid_and_report_over_a_drop_path_ablation(ws, capsys):
    grid = {"name": "drop_path", "base_plan": plan_doc(), "axes": {"drop_path": DROP_PATH_ROWS},
            "eval_mode": "linear_probe", "eval": {"epochs": 1, "batch_size": 16}}
    assert main(["grid", write_json(ws / "g.json", grid), "--data", "data", "--test-data", "test"]) == 0
    [run] = run_dirs(ws, "grid")
    capsys.readouterr()
    moved = ws / "elsewhere" / run.name
    shutil.copytree(run, moved)
    assert main(["report", str(moved), "--csv", "merged.csv"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("== ") and "5 rows" in lines[0]
    header, body = lines[1], lines[3:]
    assert header.split(" | ")[1:3] == ["teacher_drop_path", "student_drop_path"]
    assert len(body) == 5
    assert [tuple(c.strip() for c in row.split(" | ")[1:3]) for row in body] == [
        ("0.0000", "0.0000"), ("0.0000", "0.1000"), ("0.1000", "0.1000"), ("0.0000", "0.2000"),
        ("0.0000", "0.3000")]
    assert len((ws / "merged.csv").read_text().strip().splitlines()) == 6


def test_partial_grid_failure_exits_4(ws):
    grid = {"base_plan": plan_doc(), "axes": {"student_config.adaptive_last_block_heads": [None, 4]},
            "eval_mode": "linear_probe", "eval": {"epochs": 1}}
    assert main(["grid", write_json(ws / "g.json", grid), "--data", "data", "--test-data", "test"]) == 4
    [run] = run_dirs(ws, "grid")
    assert (run / "table.txt").is_file()


def test_report_merges_distill_runs(ws, capsys):
    for seed in (0, 1):
        plan = write_json(ws / f"p{seed}.json", plan_doc(seed=seed))
        assert main(["distill", plan, "--data", "data"]) == 0
    capsys.readouterr()
    assert main(["report", *map(str, run_dirs(ws, "distill"))]) == 0
    out = capsys.readouterr().out
    assert "runs (2 rows)" in out and "loss_rel_qk" in out


def test_report_rejects_unknown_directories(ws):
    (ws / "empty").mkdir()
    assert main(["report", "empty"]) == 2


def test_eval_command(ws, capsys):
    assert main(["eval", "teacher", "--train-data", "data", "--test-data", "test", "--mode", "linear_probe",
                 "--settings", write_json(ws / "s.json", {"epochs": 1}), "--out", "acc.json"]) == 0
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    saved = json.loads((ws / "acc.json").read_text())
    assert printed["accuracy"] == saved["accuracy"] and 0 <= saved["accuracy"] <= 1


def test_pretrain_teacher_command(ws):
    model = write_json(ws / "m.json", tiny_config(depth=2).to_dict())
    settings = write_json(ws / "s.json", {"epochs": 1, "batch_size": 16})
    assert main(["pretrain-teacher", "--model", model, "--settings", settings, "--data", "data",
                 "--test-data", "test", "--out", "t2"]) == 0
    assert ViTModel.load(ws / "t2" / "checkpoint").config == tiny_config(depth=2)
    assert "test_accuracy" in json.loads((ws / "t2" / "teacher.json").read_text())


def test_inspect_relations_single_token_is_one(ws):
    np.savez(ws / "taps.npz", q=np.ones((1, 1, 2), np.float32), k=np.zeros((1, 1, 2), np.float32),
             v=np.ones((1, 1, 2), np.float32))
    assert main(["inspect-relations", "--taps", "taps.npz", "--out", "r.csv"]) == 0
    assert (ws / "r.csv").read_text().strip() == "1"


def test_inspect_relations_from_a_checkpoint(ws):
    cfg = ViTConfig(depth=2, hidden_dim=8, heads=2, patch_size=8, image_size=8, num_classes=4)
    ViTModel(cfg, seed=0).save(ws / "one_patch")
    assert main(["inspect-relations", "--checkpoint", "one_patch", "--data", "data", "--exclude-cls",
                 "--out", "single.csv"]) == 0
    assert (ws / "single.csv").read_text().strip() == "1"
    assert main(["inspect-relations", "--checkpoint", "teacher", "--data", "data", "--block", "2",
                 "--pair", "VV", "--head", "1", "--out", "full.csv"]) == 0
    m = np.loadtxt(ws / "full.csv", delimiter=",")
    assert m.shape == (5, 5)
    np.testing.assert_allclose(m.sum(1), 1, atol=1e-6)
    assert main(["inspect-relations", "--checkpoint", "teacher", "--data", "data", "--out", "full.csv"]) == 2
    assert main(["inspect-relations", "--checkpoint", "teacher", "--data", "data", "--head", "9",
                 "--out", "x.csv"]) == 2


def test_module_entry_point_runs(ws):
    out = subprocess.run([sys.executable, "-m", "vitdistill", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-data", "distill", "chain", "grid", "eval", "inspect-relations", "report"):
        assert cmd in out.stdout
