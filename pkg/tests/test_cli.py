import csv
import json
import time

import numpy as np
import pytest

from maos.cli import main, parse_sweep_values
from maos.data import save_image, synth_sources
from maos.trainer import deterministic_view, read_telemetry

TINY = {"gen_width": 4, "gen_res_blocks": 1, "disc_width": 8, "batch_size": 2, "synth_n_source": 8,
        "augment_rotate": False}


def write_config(path, **kw):
    doc = {**TINY, **kw}
    path.write_text(json.dumps(doc))
    return path


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------- synth

def test_synth_idempotent(tmp_path):
    for d in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / d), "--n", "64", "--size", "32", "--seed", "7"]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert sum(e["domain"] == "source" for e in m["entries"]) == 64
    assert sum(e["domain"] == "target" for e in m["entries"]) == 1


def test_synth_needs_two(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x"), "--n", "1"]) == 1
    assert "need ≥ 2 source images" in capsys.readouterr().err


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as e:
        main(["synth"])
    assert e.value.code == 1


# ---------------------------------------------------------------- train

def test_train_smoke_and_resume(tmp_path):
    out = tmp_path / "run"
    cfg = write_config(tmp_path / "c.json", iterations=5, evaluate=False, out_dir=str(out))
    assert main(["train", "--config", str(cfg)]) == 0
    rows = read_telemetry(out / "telemetry.csv")
    assert [r["iteration"] for r in rows] == [1, 2, 3, 4, 5]
    assert (out / "checkpoint.maos").exists()
    echoed = json.loads((out / "effective_config.json").read_text())
    assert echoed["alpha"] == 0.1 and echoed["iterations"] == 5 and echoed["embedding"] == "downsample_pixels(8)"

    cfg8 = write_config(tmp_path / "c8.json", iterations=8, evaluate=False, out_dir=str(out))
    assert main(["train", "--config", str(cfg8), "--resume", str(out / "checkpoint.maos")]) == 0
    resumed = read_telemetry(out / "telemetry.csv")
    assert [r["iteration"] for r in resumed] == list(range(1, 9))
    assert deterministic_view(resumed[:5]) == deterministic_view(rows)

    straight = tmp_path / "straight"
    cfg8b = write_config(tmp_path / "c8b.json", iterations=8, evaluate=False, out_dir=str(straight))
    assert main(["train", "--config", str(cfg8b)]) == 0
    assert deterministic_view(read_telemetry(straight / "telemetry.csv")) == deterministic_view(resumed)


def test_train_schema_errors_listed(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", alpha=1.5, lr=-1.0, colour="red")
    assert main(["train", "--config", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert "alpha" in err and "lr" in err and "colour: unknown key" in err


def test_train_bad_type(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", n_threads="four")
    assert main(["train", "--config", str(cfg)]) == 1
    assert "n_threads" in capsys.readouterr().err


# ---------------------------------------------------------------- translate / evaluate

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    cfg = write_config(root / "c.json", iterations=2, evaluate=False, out_dir=str(root / "run"))
    assert main(["train", "--config", str(cfg)]) == 0
    inp = root / "in"
    inp.mkdir()
    for img in synth_sources(5, 32, seed=3):
        save_image(img, inp / f"{img.id}.ppm")
    return root


def test_translate(trained, tmp_path):
    ck = str(trained / "run" / "checkpoint.maos")
    for d in ("o1", "o2"):
        assert main(["translate", "--ckpt", ck, "--in", str(trained / "in"), "--out", str(tmp_path / d),
                     "--direction", "xy"]) == 0
    names = sorted(p.name for p in (trained / "in").iterdir())
    assert sorted(p.name for p in (tmp_path / "o1").iterdir()) == names
    assert tree_bytes(tmp_path / "o1") == tree_bytes(tmp_path / "o2")
    assert main(["translate", "--ckpt", ck, "--in", str(trained / "in"), "--out", str(tmp_path / "o3"),
                 "--direction", "yx"]) == 0
    assert tree_bytes(tmp_path / "o3") != tree_bytes(tmp_path / "o1")


def test_translate_size_mismatch(trained, tmp_path, capsys):
    d = tmp_path / "big"
    d.mkdir()
    save_image(synth_sources(1, 64, seed=0)[0], d / "a.ppm")
    assert main(["translate", "--ckpt", str(trained / "run" / "checkpoint.maos"), "--in", str(d),
                 "--out", str(tmp_path / "o")]) == 1
    assert "32x32" in capsys.readouterr().err


def test_translate_corrupt_checkpoint(tmp_path, capsys):
    (tmp_path / "bad.maos").write_bytes(b"NOPE")
    assert main(["translate", "--ckpt", str(tmp_path / "bad.maos"), "--in", str(tmp_path),
                 "--out", str(tmp_path / "o")]) == 3


def image_dir(path, n, seed):
    path.mkdir()
    for img in synth_sources(n, 32, seed):
        save_image(img, path / f"{img.id}.ppm")
    return path


def test_evaluate(tmp_path, capsys):
    gen = image_dir(tmp_path / "gen", 20, 0)
    ref = image_dir(tmp_path / "ref", 20, 1)
    args = ["evaluate", "--generated", str(gen), "--embedding", "downsample_pixels(2)"]
    assert main(args + ["--reference", str(gen), "--out", str(tmp_path / "same.json")]) == 0
    same = json.loads((tmp_path / "same.json").read_text())
    assert same["fid"] < 1e-6
    assert main(args + ["--reference", str(ref), "--out", str(tmp_path / "r.json")]) == 0
    r = json.loads((tmp_path / "r.json").read_text())
    assert "ssim_mean" not in r and "ssim_per_pair" not in r
    assert r["embedding_descriptor"] == "downsample_pixels(2)"
    assert main(args + ["--reference", str(ref), "--paired-oracle", str(gen), "--out", str(tmp_path / "p.json"),
                        "--csv", str(tmp_path / "p.csv")]) == 0
    p = json.loads((tmp_path / "p.json").read_text())
    assert p["ssim_mean"] == 1.0 and len(p["ssim_per_pair"]) == 20
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 21


def test_evaluate_set_too_small(tmp_path, capsys):
    gen = image_dir(tmp_path / "gen", 5, 0)
    assert main(["evaluate", "--generated", str(gen), "--reference", str(gen)]) == 1
    assert "needs" in capsys.readouterr().err


# ---------------------------------------------------------------- sweep

def read_summary(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_sweep_alpha(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", iterations=2, n_test=16, embedding="downsample_pixels(2)",
                       out_dir=str(tmp_path / "sw"))
    assert main(["sweep", "--config", str(cfg), "--axis", "alpha", "--values", "0.01,0.1,1.0"]) == 0
    rows = read_summary(tmp_path / "sw" / "summary.csv")
    assert [r["value"] for r in rows] == ["0.01", "0.1", "1.0"]
    assert [int(r["seed"]) for r in rows] == [0, 1, 2]
    assert all(r["status"] == "ok" and float(r["diversity"]) >= 0 for r in rows)
    assert all((tmp_path / "sw" / f"alpha={v}" / "telemetry.csv").exists() for v in (0.01, 0.1, 1.0))


def test_sweep_single_value_matches_train(tmp_path):
    cfg = write_config(tmp_path / "c.json", iterations=3, n_test=16, embedding="downsample_pixels(2)",
                       out_dir=str(tmp_path / "sw"))
    assert main(["sweep", "--config", str(cfg), "--axis", "n_threads", "--values", "4"]) == 0
    assert main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "tr")]) == 0
    a = read_telemetry(tmp_path / "sw" / "n_threads=4" / "telemetry.csv")
    b = read_telemetry(tmp_path / "tr" / "telemetry.csv")
    assert deterministic_view(a) == deterministic_view(b)
    assert json.loads((tmp_path / "sw" / "n_threads=4" / "metrics.json").read_text())["fid"] == \
        json.loads((tmp_path / "tr" / "metrics.json").read_text())["fid"]


def test_sweep_child_failure_continues(tmp_path):
    cfg = write_config(tmp_path / "c.json", iterations=1, n_test=16, embedding="downsample_pixels(2)",
                       out_dir=str(tmp_path / "sw"))
    assert main(["sweep", "--config", str(cfg), "--axis", "part_size", "--values", "64,16"]) == 2
    rows = read_summary(tmp_path / "sw" / "summary.csv")
    assert [r["status"] for r in rows] == ["failed", "ok"]
    assert "part_size" in rows[0]["error"]


def test_part_size_ratio_values():
    assert parse_sweep_values("part_size", "H/4,H/2,5H/8", 32) == [8, 16, 20]
    assert parse_sweep_values("alpha", "0.01, 0.1,1.0", 32) == [0.01, 0.1, 1.0]


# ---------------------------------------------------------------- gradcheck

def test_gradcheck_command(tmp_path, capsys):
    t0 = time.perf_counter()
    assert main(["gradcheck", "--seed", "0", "--json", str(tmp_path / "g0.json")]) == 0
    elapsed = time.perf_counter() - t0
    assert elapsed < 60
    out = capsys.readouterr().out
    report = json.loads((tmp_path / "g0.json").read_text())["results"]
    lines = [l for l in out.splitlines() if l.startswith(("PASS", "FAIL"))]
    names = [l.split()[1] for l in lines]
    assert len(names) == len(set(names)) == len(report)
    assert "composite_gan_loss" in names and "conv2d" in names and "instance_norm" in names
    assert all(r["max_relative_error"] < 1e-4 and r["checked"] > 0 for r in report.values())
