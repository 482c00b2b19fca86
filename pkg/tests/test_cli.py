import json
import subprocess
import sys

import numpy as np
import pytest

from crdn.cli import main
from crdn.formats import read_pgm, read_tensor, write_tensor
from crdn.model import load_checkpoint
from crdn.rdc import decoder_param_formula

TINY_MODEL = ["--variant", "convrnn", "--stages", "2", "--seed", "1"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def last_json(out: str) -> dict:
    return json.loads(out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny dataset plus a 2-epoch checkpoint shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--out", str(data), "--train", "6", "--test", "4", "--size", "16", "--seed", "5"]) == 0
    ckpt = root / "model.ckpt"
    assert main(["train", "--data", str(data), "--out", str(ckpt), *TINY_MODEL, "--epochs", "2",
                 "--batch-size", "3", "--lr", "3e-3", "--eval-split", "train"]) == 0
    return root, data, ckpt


def test_param_count_default_matches_formula(capsys):
    code, out, _ = run(capsys, "param-count")
    assert code == 0
    counts = json.loads(out)
    assert counts["decoder"] == decoder_param_formula("convlstm", 4, 3, "bilinear") == counts["decoder_formula"]
    assert counts["total"] == counts["encoder"] + counts["squeeze"] + counts["decoder"]


def test_param_count_reads_config_file(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"variant": "convgru", "upsample": "transposed"}))
    code, out, _ = run(capsys, "param-count", "--config", cfg)
    assert code == 0
    counts = json.loads(out)
    assert counts["decoder"] == decoder_param_formula("convgru", 4, 3, "transposed")
    # flags override the file
    code, out, _ = run(capsys, "param-count", "--config", cfg, "--variant", "convrnn")
    assert json.loads(out)["config"]["variant"] == "convrnn"


def test_grad_check_fresh_seed_exits_zero(capsys, tmp_path):
    report = tmp_path / "grad.json"
    code, out, _ = run(capsys, "grad-check", "--variant", "convgru", "--eps", "1e-5", "--report", report)
    assert code == 0, out
    summary = last_json(out)
    assert summary["failed"] == [] and summary["max_rel_error"] < 1e-4
    assert json.loads(report.read_text())["summary"] == summary
    assert (tmp_path / "grad.config.json").exists()


def test_grad_check_rejects_bad_eps(capsys):
    code, _, err = run(capsys, "grad-check", "--eps", "0")
    assert code == 1 and "--eps" in err


@pytest.mark.parametrize("argv", [
    ["train", "--data", "x"],                         # missing --out
    ["train", "--data", "x", "--out", "y", "--variant", "lstm"],
    ["gen-data", "--out", "x", "--noise", "a,b"],
    ["frobnicate"],
])
def test_usage_errors_exit_one(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 1 and err.startswith("error:")


def test_validation_errors_exit_one(capsys, tmp_path):
    code, _, err = run(capsys, "gen-data", "--out", tmp_path / "d", "--size", "20")
    assert code == 1 and "--size" in err
    code, _, err = run(capsys, "gen-data", "--out", tmp_path / "d", "--inu", "250")
    assert code == 1 and "--inu" in err
    code, _, err = run(capsys, "param-count", "--stages", "0")
    assert code == 1


def test_missing_file_exits_two_and_names_it(capsys, tmp_path):
    missing = tmp_path / "nope.ckpt"
    code, _, err = run(capsys, "eval", "--ckpt", missing, "--data", tmp_path, "--report", tmp_path / "r.json")
    assert code == 2 and "nope.ckpt" in err


def test_corrupt_checkpoint_exits_two(capsys, tmp_path, workspace):
    _, data, ckpt = workspace
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(ckpt.read_bytes()[:-7])
    code, _, err = run(capsys, "eval", "--ckpt", bad, "--data", data, "--report", tmp_path / "r.json")
    assert code == 2 and "bad.ckpt" in err


def test_bad_thread_setting_exits_one(capsys, monkeypatch):
    monkeypatch.setenv("CRDN_THREADS", "many")
    code, _, err = run(capsys, "param-count")
    assert code == 1 and "CRDN_THREADS" in err
    monkeypatch.setenv("CRDN_THREADS", "1")
    assert run(capsys, "param-count")[0] == 0


def test_gen_data_layout(workspace):
    root, data, _ = workspace
    assert (data / "train").is_dir() and (data / "test").is_dir()
    echo = json.loads((data / "run_config.json").read_text())
    assert echo["command"] == "gen-data" and echo["settings"]["seed"] == 5


def test_train_artifacts(workspace):
    root, _, ckpt = workspace
    log = (root / "model.metrics.jsonl").read_text().splitlines()
    assert len(log) == 2
    assert (root / "model.curves.png").stat().st_size > 0
    echo = json.loads((root / "model.config.json").read_text())
    assert echo["command"] == "train" and echo["settings"]["model"]["variant"] == "convrnn"
    assert load_checkpoint(ckpt).epoch == 1


def test_eval_matches_final_training_log_entry(capsys, workspace, tmp_path):
    root, data, ckpt = workspace
    final = json.loads((root / "model.metrics.jsonl").read_text().splitlines()[-1])
    report = tmp_path / "report.json"
    box = tmp_path / "box.csv"
    code, _, _ = run(capsys, "eval", "--ckpt", ckpt, "--data", data, "--split", "train",
                     "--report", report, "--boxplot", box)
    assert code == 0
    rep = json.loads(report.read_text())
    assert rep["mean_dice"] == final["mean_dice"] and rep["pixel_acc"] == final["pixel_acc"]
    assert len(box.read_text().splitlines()) == 1 + 6 * 3
    assert (tmp_path / "box.png").exists() and (tmp_path / "report.config.json").exists()


def test_config_echo_reruns_identically(capsys, workspace, tmp_path):
    root, data, _ = workspace
    again = tmp_path / "again.ckpt"
    code, _, _ = run(capsys, "train", "--data", data, "--out", again, "--config", root / "model.config.json",
                     "--eval-split", "train")
    assert code == 0
    assert (tmp_path / "again.metrics.jsonl").read_bytes() == (root / "model.metrics.jsonl").read_bytes()


def test_predict_single_and_batch(capsys, workspace, tmp_path):
    _, data, ckpt = workspace
    from crdn.data import read_dataset

    test = read_dataset(data, split="test")
    single = tmp_path / "one.crdt"
    write_tensor(single, test.images[:1])
    code, out, _ = run(capsys, "predict", "--ckpt", ckpt, "--input", single, "--out", tmp_path / "pred.pgm")
    assert code == 0
    pred = read_pgm(tmp_path / "pred.pgm")
    expected = load_checkpoint(ckpt).model.predict(read_tensor(single))[0]
    np.testing.assert_array_equal(pred, expected)
    assert (tmp_path / "pred.ppm").exists() and (tmp_path / "pred.overlay.png").exists()

    batch = tmp_path / "many.crdt"
    write_tensor(batch, test.images[:3])
    code, out, _ = run(capsys, "predict", "--ckpt", ckpt, "--input", batch, "--out", tmp_path / "b.pgm")
    assert code == 0
    assert [p.rsplit("/", 1)[-1] for p in json.loads(out)["outputs"]] == ["b_0000.pgm", "b_0001.pgm", "b_0002.pgm"]


def test_predict_rejects_wrong_channel_count(capsys, workspace, tmp_path):
    _, _, ckpt = workspace
    img = tmp_path / "two.crdt"
    write_tensor(img, np.zeros((1, 2, 16, 16), dtype=np.float32))
    code, _, err = run(capsys, "predict", "--ckpt", ckpt, "--input", img, "--out", tmp_path / "p.pgm")
    assert code == 1 and "--input" in err


def test_robustness_sweep_reports_every_cell(capsys, workspace, tmp_path):
    _, data, ckpt = workspace
    out = tmp_path / "sweep.json"
    code, stdout, _ = run(capsys, "robustness-sweep", "--ckpt", ckpt, "--data", data,
                          "--noise", "0,1,3,5,7,9", "--inu", "0,20,40", "--out", out)
    assert code == 0
    rep = json.loads(out.read_text())
    assert len(rep["cells"]) == 18
    assert {(c["noise"], c["inu"]) for c in rep["cells"]} == {(n, i) for n in (0, 1, 3, 5, 7, 9) for i in (0, 20, 40)}
    assert rep["harshest"]["noise"] == 9 and rep["harshest"]["inu"] == 40
    assert (tmp_path / "sweep.png").exists() and (tmp_path / "sweep.config.json").exists()


def test_module_entry_point_version():
    proc = subprocess.run([sys.executable, "-m", "crdn", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("crdn ")
