import csv
import json

import numpy as np
import pytest

from petcm.cli import main
from petcm.io import read_image, read_json
from petcm.plotting import read_pgm

TINY = {"n": 3, "fractions": [0.25], "size": [32, 32], "levels": 2, "channels_per_level": [4, 8],
        "embed_dim": 16, "patch": 16, "stride": 16, "epochs": 2, "batch": 2, "lr": 1e-3}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["generate-data", "--config", str(cfg), "--out", str(root / "data"), "--seed", "3"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root, cfg


def run(*args):
    return main([str(a) for a in args])


def test_default_generate_data(tmp_path):
    assert run("generate-data", "--out", tmp_path / "d") == 0
    n = sum(len(list((tmp_path / "d").glob(f"low_{f}/*.f32"))) for f in ("0.125", "0.25"))
    assert n == 200
    m = read_json(tmp_path / "d" / "manifest.json")["runs"][0]
    assert m["n_pairs"] == 200 and m["fractions"] == [0.125, 0.25]
    assert m["config"]["seed"] == 0 and "phantom_spec" in m


def test_generate_is_byte_identical(work, tmp_path):
    root, cfg = work
    assert run("generate-data", "--config", cfg, "--out", tmp_path / "again", "--seed", 3) == 0
    for f in sorted((root / "data").rglob("*.f32")):
        twin = tmp_path / "again" / f.relative_to(root / "data")
        assert f.read_bytes() == twin.read_bytes()


def test_unwritable_output_exits_1_without_manifest(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    assert run("generate-data", "--out", blocker / "sub") == 1
    assert not (blocker.parent / "sub").exists()
    assert "error" in capsys.readouterr().err


def test_usage_errors_exit_1(tmp_path):
    assert run("train", "--out", tmp_path / "x", "--data", tmp_path / "nope") == 1
    assert run("bogus") == 1
    assert run("train", "--out", tmp_path / "x", "--set", "no_such_key=1") == 1
    assert run("sample", "--out", tmp_path / "s", "--checkpoint", tmp_path / "missing",
               "--data", tmp_path) == 1


def test_train_outputs(work):
    root, _ = work
    run_dir = root / "run"
    from petcm.io import load_checkpoint
    for name in ("student", "teacher", "init"):
        model, meta = load_checkpoint(run_dir / name)
        assert meta["config"]["channels_per_level"] == [4, 8]
    assert load_checkpoint(run_dir / "teacher")[1]["ema"] is True
    rows = list(csv.DictReader(open(run_dir / "history.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    rec = read_json(run_dir / "manifest.json")["runs"][-1]
    assert rec["config"]["lr"] == 1e-3 and rec["schedule"]["steps"] == 150


def test_resume_equals_uninterrupted(work, tmp_path):
    root, cfg = work
    data = root / "data"
    assert run("train", "--config", cfg, "--data", data, "--out", tmp_path / "a", "--epochs", 3) == 0
    assert run("train", "--config", cfg, "--data", data, "--out", tmp_path / "b", "--epochs", 1) == 0
    assert run("train", "--config", cfg, "--data", data, "--out", tmp_path / "b", "--epochs", 3) == 0
    for name in ("student", "teacher"):
        a = read_json(tmp_path / "a" / f"{name}.json")
        b = read_json(tmp_path / "b" / f"{name}.json")
        assert a["sha256"] == b["sha256"]
    assert read_json(tmp_path / "b" / "manifest.json")["runs"][-1]["resumed"] is True


def test_zero_lr_leaves_weights(work, tmp_path):
    root, cfg = work
    assert run("train", "--config", cfg, "--data", root / "data", "--out", tmp_path / "z", "--lr", 0) == 0
    init, final = read_json(tmp_path / "z" / "init.json"), read_json(tmp_path / "z" / "student.json")
    assert init["sha256"] == final["sha256"]
    assert init["step"] == 0 and final["step"] == 4


def test_sample_eval_counts_and_determinism(work, tmp_path):
    root, cfg = work
    args = ["sample", "--config", cfg, "--data", root / "data", "--checkpoint", root / "run",
            "--plan", "2step", "--plan", "1step", "--mc", 3]
    assert run(*args, "--out", tmp_path / "s1") == 0
    assert run(*args, "--out", tmp_path / "s2") == 0
    for label, k in (("2step", 2), ("1step", 1)):
        rec = read_json(tmp_path / "s1" / label / "manifest.json")["runs"][0]
        assert rec["evals_per_run"] == k and rec["plan"]["mc_runs"] == 3 and rec["ema"] is True
        for img in rec["images"]:
            assert img["network_evals"] == k * 3 * img["patches"]
        for f in (tmp_path / "s1" / label).glob("*.f32"):
            assert f.read_bytes() == (tmp_path / "s2" / label / f.name).read_bytes()
    out = read_image(tmp_path / "s1" / "2step" / "0000")
    assert out.shape == (32, 32)


def test_evaluate_identity_and_sweep(work, tmp_path):
    root, cfg = work
    data = root / "data"
    plans = ["1step", "2step", "5step", "10step"]
    args = ["sample", "--config", cfg, "--data", data, "--checkpoint", root / "run", "--mc", 1,
            "--out", tmp_path / "s"]
    for p in plans:
        args += ["--plan", p]
    assert run(*args) == 0
    ev = ["evaluate", "--data", data, "--out", tmp_path / "ev", "--pred", data / "full"]
    for p in plans:
        ev += ["--pred", tmp_path / "s" / p]
    assert run(*ev) == 0
    rows = list(csv.DictReader(open(tmp_path / "ev" / "metrics.csv")))
    ident = [r for r in rows if r["method"] == "full"]
    assert ident and all(float(r["nmae_pct"]) == 0.0 for r in ident)
    agg = [r["method"] for r in rows if r["slice"] == "ALL"]
    assert agg == ["low_dose", "full"] + plans
    summary = read_json(tmp_path / "ev" / "summary.json")
    assert summary["background_rel_threshold"] == 0.05
    timing = list(csv.DictReader(open(tmp_path / "ev" / "timing.csv")))
    assert {r["method"] for r in timing} == set(plans)

    # report: means recomputed from per-slice rows, montages 4 panels wide
    assert run("report", "--eval", tmp_path / "ev", "--out", tmp_path / "rep") == 0
    rep = {r["method"]: r for r in csv.DictReader(open(tmp_path / "rep" / "report.csv"))}
    for method in agg:
        vals = [float(r["nmae_pct"]) for r in rows if r["method"] == method and r["slice"] != "ALL"]
        assert float(rep[method]["nmae_pct"]) == pytest.approx(np.mean(vals), rel=1e-12)
    pgm = read_pgm(next((tmp_path / "rep").glob("montage_2step_*.pgm")))
    assert pgm.shape == (32, 4 * 32)
    assert (tmp_path / "rep" / "metrics.png").stat().st_size > 0


def test_unpaired_files_skipped_with_warning(work, tmp_path, capsys):
    root, _ = work
    pred = tmp_path / "pred"
    pred.mkdir()
    for f in (root / "data" / "full").glob("0000.*"):
        (pred / f.name).write_bytes(f.read_bytes())
    for ext in ("f32", "json"):
        (pred / f"9999.{ext}").write_bytes((root / "data" / "full" / f"0000.{ext}").read_bytes())
    assert run("evaluate", "--data", root / "data", "--pred", pred, "--out", tmp_path / "ev") == 0
    assert "9999" in capsys.readouterr().err
    rows = list(csv.DictReader(open(tmp_path / "ev" / "metrics.csv")))
    assert [r["slice"] for r in rows if r["method"] == "pred"] == ["0000", "ALL"]


def test_report_on_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert run("report", "--eval", tmp_path / "empty", "--out", tmp_path / "rep") == 0
    assert "warning" in capsys.readouterr().err
    lines = (tmp_path / "rep" / "report.csv").read_text().splitlines()
    assert len(lines) == 1


def test_numerical_failure_exit_2(work, tmp_path):
    root, cfg = work
    code = run("train", "--config", cfg, "--data", root / "data", "--out", tmp_path / "boom",
               "--set", "lr=1e30", "--epochs", 3)
    assert code == 2


def test_inputs_not_mutated(work, tmp_path):
    root, cfg = work
    before = {p: p.read_bytes() for p in (root / "data").rglob("*.f32")}
    run("sample", "--config", cfg, "--data", root / "data", "--checkpoint", root / "run",
        "--plan", "1step", "--mc", 1, "--out", tmp_path / "s")
    assert all(p.read_bytes() == b for p, b in before.items())
