import json

import numpy as np
import pytest

from dlrrec import autodiff, dataio
from dlrrec.cli import main
from dlrrec.model import ModelConfig, init_params, param_shapes, save_checkpoint
from dlrrec.trainer import TrainConfig

SMALL_SYNTH = {"users": 24, "items": 24, "interactions_per_user": 8, "d_raw": 12, "seed": 4}
SMALL_RUN = {
    "max_epochs": 3, "min_epochs": 0, "patience": 3, "batch_size": 64,
    "model": {"d_int": 8, "dense_hidden": [8], "top_hidden": [8],
              "channels": [{"name": n, "d_raw": 12, "hidden": [8]}
                           for n in ("user-summary", "item-summary", "item-image")]},
    "loss": {"K": 3},
}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_json(root / "synth.json", SMALL_SYNTH)
    assert main(["synth", "--config", cfg, "--out", str(root / "data")]) == 0
    for side in ("user", "item"):
        assert main(["swing", "--data", str(root / "data"), "--side", side, "--train-only",
                     "--out", str(root / f"{side}.json")]) == 0
    run = write_json(root / "run.json", SMALL_RUN)
    assert main(["train", "--config", run, "--data", str(root / "data"), "--user-sims", str(root / "user.json"),
                 "--item-sims", str(root / "item.json"), "--repeats", "2", "--out", str(root / "contr")]) == 0
    return root


def test_synth_outputs_reload(workspace):
    names = {p.name for p in (workspace / "data").iterdir()}
    assert names == {"interactions.jsonl", "clusters.json", "schema.json",
                     "user-summary.dlre", "item-summary.dlre", "item-image.dlre"}
    back = dataio.load_dataset(workspace / "data")
    assert len(back.records) == 24 * 8


def test_synth_deterministic(workspace, tmp_path):
    cfg = str(workspace / "synth.json")
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    for p in (workspace / "data").iterdir():
        assert (tmp_path / "again" / p.name).read_bytes() == p.read_bytes()


def test_synth_bad_configs(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2
    bad = write_json(tmp_path / "bad.json", {"users": 0})
    assert main(["synth", "--config", bad, "--out", str(tmp_path / "o")]) == 2
    unknown = write_json(tmp_path / "unk.json", {"userz": 3})
    assert main(["synth", "--config", unknown, "--out", str(tmp_path / "o")]) == 2


def toy_interactions(path, pairs):
    dataio.write_interactions(path, [dataio.InteractionRecord(u, i, 5, 1) for u, i in pairs])
    return str(path)


def test_swing_toy_full_graph(tmp_path):
    data = toy_interactions(tmp_path / "x.jsonl", [("u1", "i1"), ("u1", "i2"), ("u2", "i1"), ("u2", "i2")])
    assert main(["swing", "--data", data, "--side", "item", "--alpha", "1", "--out", str(tmp_path / "s.json")]) == 0
    sims = json.loads((tmp_path / "s.json").read_text())
    assert sims["side"] == "item"
    assert sims["neighbors"]["i1"][0][0] == "i2"
    assert sims["neighbors"]["i1"][0][1] == pytest.approx(1 / 3, abs=1e-6)


def test_swing_empty_and_bad_flags(tmp_path):
    (tmp_path / "empty.jsonl").write_text("")
    data = str(tmp_path / "empty.jsonl")
    out = str(tmp_path / "s.json")
    assert main(["swing", "--data", data, "--side", "user", "--out", out]) == 0
    assert json.loads((tmp_path / "s.json").read_text())["neighbors"] == {}
    assert main(["swing", "--data", data, "--side", "user", "--topk", "0", "--out", out]) == 2
    assert main(["swing", "--data", data, "--side", "user", "--alpha", "0", "--out", out]) == 2
    assert main(["swing", "--data", data, "--side", "user", "--alpha", "-1", "--out", out]) == 2
    assert main(["swing", "--data", data, "--side", "sideways", "--out", out]) == 2


def test_swing_malformed_data_exit_2(tmp_path):
    (tmp_path / "bad.jsonl").write_text('{"user_id": "u", "item_id": "i", "rating": 9}\n')
    assert main(["swing", "--data", str(tmp_path / "bad.jsonl"), "--side", "user", "--out",
                 str(tmp_path / "s.json")]) == 2


def test_train_writes_run_dirs(workspace):
    contr = workspace / "contr"
    assert sorted(p.name for p in contr.iterdir()) == ["aggregate.json", "run-0", "run-1"]
    for run in ("run-0", "run-1"):
        assert {p.name for p in (contr / run).iterdir()} == {"best.ckpt", "config.json", "report.json"}
    agg = json.loads((contr / "aggregate.json").read_text())
    assert agg["runs"] == 2


def test_train_missing_sims(workspace, tmp_path):
    args = ["train", "--config", str(workspace / "run.json"), "--data", str(workspace / "data"),
            "--out", str(tmp_path / "r")]
    assert main(args) == 2
    assert main(args + ["--user-sims", str(tmp_path / "none.json"), "--item-sims", str(workspace / "item.json")]) == 2
    # the two files swapped: wrong side
    assert main(args + ["--user-sims", str(workspace / "item.json"), "--item-sims", str(workspace / "user.json")]) == 2


def test_train_bce_only_needs_no_sims(workspace, tmp_path):
    assert main(["train", "--config", str(workspace / "run.json"), "--data", str(workspace / "data"),
                 "--no-contrastive", "--repeats", "1", "--max-epochs", "1", "--out", str(tmp_path / "r")]) == 0
    cfg = json.loads((tmp_path / "r/run-0/config.json").read_text())
    assert cfg["loss"]["contrastive"] is False and cfg["max_epochs"] == 1


def test_train_numeric_failure_exit_3(workspace, tmp_path):
    bad = write_json(tmp_path / "run.json", {**SMALL_RUN, "learning_rate": 1e300})
    with np.errstate(all="ignore"):
        code = main(["train", "--config", bad, "--data", str(workspace / "data"),
                     "--user-sims", str(workspace / "user.json"), "--item-sims", str(workspace / "item.json"),
                     "--repeats", "1", "--out", str(tmp_path / "r")])
    assert code == 3


def test_eval_reproduces_report(workspace, capsys):
    run = workspace / "contr" / "run-1"
    report = json.loads((run / "report.json").read_text())
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(run / "best.ckpt"), "--data", str(workspace / "data")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["accuracy"] == report["best_accuracy"] and out["fp_rate"] == report["best_fp_rate"]
    assert set(out["confusion"]) == {"tp", "fp", "tn", "fn"}


def test_eval_errors(workspace, tmp_path):
    ckpt = str(workspace / "contr" / "run-0" / "best.ckpt")
    data = str(workspace / "data")
    assert main(["eval", "--ckpt", ckpt, "--data", data, "--mask", "smell"]) == 2
    other = write_json(tmp_path / "other.json", {**SMALL_RUN, "model": {**SMALL_RUN["model"], "d_int": 4}})
    assert main(["eval", "--ckpt", ckpt, "--data", data, "--config", other]) == 2
    assert main(["eval", "--ckpt", str(tmp_path / "missing.ckpt"), "--data", data, "--config", other]) == 2


def test_eval_perfect_model(tmp_path, capsys):
    cfg = write_json(tmp_path / "synth.json", {**SMALL_SYNTH, "affinity": [[0.0] * 4] * 4})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "data")]) == 0
    run = TrainConfig.from_json(SMALL_RUN)
    params = init_params(run.model)
    last = len(run.model.top_hidden)
    for name in param_shapes(run.model):
        if name.startswith("top."):
            params[name][...] = 0.0
    params[f"top.{last}.bias"][...] = -10.0  # always predicts negative
    save_checkpoint(params, tmp_path / "best.ckpt")
    write_json(tmp_path / "config.json", run.to_json())
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(tmp_path / "best.ckpt"), "--data", str(tmp_path / "data")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["fp_rate"] == 0.0 and out["accuracy"] == 1.0 and not out["no_negatives"]


def test_gradcheck_cli(capsys):
    assert main(["gradcheck", "--seeds", "2", "--composite-seeds", "1"]) == 0
    out = capsys.readouterr().out
    for op in autodiff.OPS:
        assert f" {op} " in out
    assert "composite_loss" in out and out.rstrip().endswith("passed")


def test_gradcheck_cli_negative_control(monkeypatch, capsys):
    monkeypatch.setattr(autodiff.Exp, "backward", staticmethod(lambda ctx, g: (2 * g * ctx["out"],)))
    assert main(["gradcheck", "--seeds", "1", "--composite-seeds", "0"]) == 1
    assert "FAIL  exp" in capsys.readouterr().out


def fake_run(root, name, mask, contrastive, acc, fp):
    run = TrainConfig.from_json(SMALL_RUN)
    run.model = ModelConfig.from_json({**run.model.to_json(), "mask": mask})
    run.loss.contrastive = contrastive
    d = root / name
    d.mkdir()
    write_json(d / "report.json", {"config": run.to_json(), "epochs": [], "best_epoch": 0, "best_fp_rate": fp,
                                   "best_accuracy": acc, "checkpoint": None, "stop_reason": "max_epochs"})
    return str(d)


def test_report_table_order_and_format(tmp_path, capsys):
    runs = [fake_run(tmp_path, "a", "text+image", False, 0.98, 0.02),
            fake_run(tmp_path, "b", "text", True, 0.9, 0.1),
            fake_run(tmp_path, "c", "text+image", True, 0.9971, 0.0015),
            fake_run(tmp_path, "d", "text", False, 0.85, 0.2)]
    assert main(["report", "--runs", *runs, "--out", str(tmp_path / "t")]) == 0
    rows = json.loads((tmp_path / "t/table.json").read_text())["rows"]
    assert [(r["mask"], r["loss_mode"]) for r in rows] == [
        ("text", "bce+contrastive"), ("text", "bce"), ("text+image", "bce+contrastive"), ("text+image", "bce")]
    md = (tmp_path / "t/table.md").read_text()
    assert "| Text + Image | BCE + Contr. | 99.71 | 0.15 | 1 |" in md


def test_report_single_and_bad(tmp_path, workspace):
    assert main(["report", "--runs", str(workspace / "contr"), "--out", str(tmp_path / "t")]) == 0
    rows = json.loads((tmp_path / "t/table.json").read_text())["rows"]
    assert len(rows) == 1 and rows[0]["runs"] == 2
    assert main(["report", "--runs", str(tmp_path / "nowhere"), "--out", str(tmp_path / "t")]) == 2
    (tmp_path / "empty").mkdir()
    assert main(["report", "--runs", str(tmp_path / "empty"), "--out", str(tmp_path / "t")]) == 2


def test_no_subcommand_is_usage_error():
    assert main([]) == 2
