import csv
import json

import pytest

from robflat.cli import main
from robflat.training import METRIC_KEYS

TINY = """
seed = 0
[network]
hidden = [8]
batchnorm = "all"
[data]
n_train = 32
n_test = 60
holdout = 20
dim = 6
classes = 3
margin = 4.0
[attack]
steps = 3
step_size = 0.04
[eval_attack]
steps = 3
step_size = 0.04
restarts = 2
[train]
epochs = 4
milestones = [3]
early_stop_every = 2
eval_examples = 40
[flatness]
samples = 3
restarts = 2
joint_steps = 3
examples = 40
batch_size = 20
hessian_examples = 40
"""


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    run_dir = root / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(run_dir)]) == 0
    return cfg, run_dir


def test_missing_config_exit_1(capsys, tmp_path):
    code, _, err = run(["train", "--config", tmp_path / "missing.toml"], capsys)
    assert code == 1
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["error"] == "config" and payload["exit_code"] == 1


def test_bad_flags_and_values_exit_1(capsys, tmp_path):
    assert run(["nonsense"], capsys)[0] == 1
    assert run(["train"], capsys)[0] == 1
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nepochs = -1\n")
    assert run(["train", "--config", bad], capsys)[0] == 1


def test_runtime_error_exit_2(capsys, trained, tmp_path):
    cfg, _ = trained
    broken = tmp_path / "broken.ckpt"
    broken.write_bytes(b"RFCK" + b"\0" * 64)
    code, _, err = run(["eval", "--config", cfg, "--checkpoint", broken, "--out-dir", tmp_path], capsys)
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["error"] == "runtime"


def test_train_outputs(trained):
    _, run_dir = trained
    rows = [json.loads(l) for l in (run_dir / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [0, 1, 2, 3, 4]
    assert all(set(r) == set(METRIC_KEYS) for r in rows)
    for name in ("best.ckpt", "final.ckpt", "config.toml", "train.manifest.json", "checkpoints/epoch_0002.ckpt"):
        assert (run_dir / name).exists()
    manifest = json.loads((run_dir / "train.manifest.json").read_text())
    assert {"argv", "seed", "config_sha256", "versions", "outputs"} <= set(manifest)


def test_flatness_xi_zero_reports_zero(capsys, trained, tmp_path):
    _, run_dir = trained
    code, _, _ = run(["flatness", "--checkpoint", run_dir / "final.ckpt", "--mode", "average", "--xi", "0", "--out-dir", tmp_path], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "flatness_average_robust.json").read_text())
    assert rep["value"] == 0.0
    assert {"mode", "loss_kind", "xi", "value", "std", "reference_loss", "per_sample"} <= set(rep)


def test_landscape_csv(capsys, trained, tmp_path):
    _, run_dir = trained
    code, _, _ = run(["landscape", "--checkpoint", run_dir / "final.ckpt", "--points", 3, "--directions", 2, "--out-dir", tmp_path], capsys)
    assert code == 0
    raw = (tmp_path / "landscape_random.csv").read_bytes()
    assert raw.startswith(b"s,loss,direction_kind,aggregate\n") and b"\r" not in raw
    rows = list(csv.DictReader(raw.decode().splitlines()))
    assert [float(r["s"]) for r in rows] == [-0.5, 0.0, 0.5]
    assert {r["aggregate"] for r in rows} == {"mean"}


def test_hessian_and_eval(capsys, trained, tmp_path):
    _, run_dir = trained
    assert run(["hessian", "--checkpoint", run_dir / "final.ckpt", "--out-dir", tmp_path], capsys)[0] == 0
    rep = json.loads((tmp_path / "hessian.json").read_text())
    assert rep["convexity_ratio"] >= 0
    assert run(["eval", "--checkpoint", run_dir / "final.ckpt", "--out-dir", tmp_path, "--eps", "0"], capsys)[0] == 0
    ev = json.loads((tmp_path / "eval.json").read_text())
    assert ev["robust_error"] == ev["clean_error"]


def test_scale_check_table(capsys, trained, tmp_path):
    _, run_dir = trained
    assert run(["scale-check", "--checkpoint", run_dir / "final.ckpt", "--out-dir", tmp_path], capsys)[0] == 0
    rows = list(csv.DictReader((tmp_path / "scale_check.csv").read_text().splitlines()))
    assert [float(r["factor"]) for r in rows] == [0.5, 1.0, 2.0]
    for col in ("avg_flatness", "worst_flatness"):
        base = float(rows[1][col])
        for r in rows:
            assert abs(float(r[col]) - base) <= 1e-6 * max(abs(base), 1e-12)
    lam = [float(r["lambda_max"]) for r in rows]
    assert lam[0] > lam[1] > lam[2]
    assert all(float(r["argmax_agree"]) == 1.0 for r in rows)


def test_report_and_replay(capsys, trained, tmp_path):
    _, run_dir = trained
    assert run(["flatness", "--checkpoint", run_dir / "checkpoints", "--out-dir", run_dir], capsys)[0] == 0
    assert run(["report", run_dir, "--out-dir", tmp_path / "rep"], capsys)[0] == 0
    rows = list(csv.DictReader((tmp_path / "rep" / "report.csv").read_text().splitlines()))
    assert [int(r["epoch"]) for r in rows] == [2, 4]
    for manifest in ("flatness_average_robust.manifest.json", "train.manifest.json"):
        code, out, _ = run(["replay", run_dir / manifest, "--out-dir", tmp_path / manifest], capsys)
        assert code == 0
        assert json.loads(out.strip().splitlines()[-1])["identical"] is True


def test_seed_and_threads_flags(capsys, trained, tmp_path):
    _, run_dir = trained
    ck = run_dir / "final.ckpt"
    outs = []
    for threads in (1, 3):
        d = tmp_path / f"t{threads}"
        assert run(["flatness", "--checkpoint", ck, "--threads", threads, "--seed", 5, "--out-dir", d], capsys)[0] == 0
        outs.append(json.loads((d / "flatness_average_robust.json").read_text()))
    assert abs(outs[0]["value"] - outs[1]["value"]) <= 1e-9
    assert outs[0]["config"]["seed"] == 5
    assert run(["flatness", "--checkpoint", ck, "--threads", 0, "--out-dir", tmp_path], capsys)[0] == 1
