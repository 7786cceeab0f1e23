import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from cytosynth.cli import main

TINY = ["--set", "resolution=32", "--set", "width=0.125", "--set", "batch_size=4", "--set", "total_iters=6",
        "--set", "checkpoint_every=3", "--set", "sample_grid=4", "--set", "seed=2"]


def _files(root: Path):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy") / "d"
    assert main(["maketoy", "--out", str(d), "--classes", "3", "--per-class", "10", "--res", "32", "--seed", "1"]) == 0
    return d


@pytest.fixture(scope="module")
def trained(tmp_path_factory, toy_dir):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(toy_dir), "--out", str(out), *TINY, "--set", "use_sgc=false"]) == 0
    return out


def test_maketoy_layout_and_determinism(tmp_path, toy_dir):
    files = _files(toy_dir)
    pngs = [f for f in files if f.endswith(".png")]
    assert len(pngs) == 30 and "manifest.json" in files
    assert {f.split("/")[0] for f in pngs} == {"class0", "class1", "class2"}
    again = tmp_path / "again"
    main(["maketoy", "--out", str(again), "--classes", "3", "--per-class", "10", "--res", "32", "--seed", "1"])
    assert _files(again) == files


def test_maketoy_bad_classes(tmp_path, capsys):
    assert main(["maketoy", "--out", str(tmp_path / "x"), "--classes", "0"]) == 2
    assert "--classes" in capsys.readouterr().err


def test_train_outputs(trained):
    with open(trained / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and list(rows[0]) == ["iter", "adv_d", "adv_g", "recon", "r1", "total_d", "secs"]
    ckpts = sorted(p.name for p in (trained / "checkpoints").iterdir())
    assert ckpts == ["iter_0", "iter_3", "iter_6"]
    manifest = json.loads((trained / "checkpoints" / "iter_6" / "manifest.json").read_text())
    assert manifest["config"]["use_sgc"] is False
    assert json.loads((trained / "config.json").read_text())["use_sgc"] is False


def test_train_reproducible(tmp_path, toy_dir, trained):
    out = tmp_path / "again"
    assert main(["train", "--data", str(toy_dir), "--out", str(out), *TINY, "--set", "use_sgc=false"]) == 0
    a, b = _files(trained), _files(out)
    assert sorted(a) == sorted(b)
    for name in a:
        if name == "metrics.csv":
            strip = lambda t: [r[:-1] for r in csv.reader(t.decode().splitlines())]  # noqa: E731
            assert strip(a[name]) == strip(b[name])
        else:
            assert a[name] == b[name], name


def test_train_missing_data_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_train_bad_override(tmp_path, toy_dir, capsys):
    assert main(["train", "--data", str(toy_dir), "--out", str(tmp_path), "--set", "bogus=1"]) == 2
    assert "bogus" in capsys.readouterr().err
    assert main(["train", "--data", str(toy_dir), "--out", str(tmp_path), "--set", "lr=-1"]) == 2


def test_train_config_file(tmp_path, toy_dir):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"resolution": 32, "width": 0.125, "batch_size": 2, "total_iters": 2,
                               "checkpoint_every": 5, "sample_grid": 1}))
    assert main(["train", "--data", str(toy_dir), "--out", str(tmp_path / "o"), "--config", str(cfg)]) == 0
    assert (tmp_path / "o" / "checkpoints" / "iter_2").is_dir()


def test_sample(tmp_path, trained, capsys):
    ck = str(trained / "checkpoints" / "iter_6")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["sample", "--ckpt", ck, "--class", "class1", "--n", "16", "--seed", "3", "--out", str(a)]) == 0
    assert main(["sample", "--ckpt", ck, "--class", "1", "--n", "16", "--seed", "3", "--out", str(b)]) == 0
    assert sorted(_files(a)) == [f"class1_{i}.png" for i in sorted(range(16), key=str)]
    assert _files(a) == _files(b)
    assert main(["sample", "--ckpt", ck, "--class", "HSIL", "--out", str(tmp_path / "c")]) == 2
    err = capsys.readouterr().err
    assert "class0" in err and "class2" in err


def test_fid_identical(tmp_path, toy_dir, capsys):
    out = tmp_path / "f.json"
    assert main(["fid", "--real", str(toy_dir), "--fake", str(toy_dir), "--extractor", "random",
                 "--stats-cache", str(tmp_path / "cache"), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert list(doc["fid"]) == ["class0", "class1", "class2", "Mean"]
    assert all(v <= 1e-6 for v in doc["fid"].values())
    assert len(capsys.readouterr().out.strip().splitlines()) == 4
    first = out.read_bytes()
    main(["fid", "--real", str(toy_dir), "--fake", str(toy_dir), "--extractor", "random", "--out", str(out)])
    assert out.read_bytes() == first


def test_fid_pretrained_missing(tmp_path, toy_dir, monkeypatch, capsys):
    monkeypatch.setenv("CYTOSYNTH_CACHE_DIR", str(tmp_path))
    code = main(["fid", "--real", str(toy_dir), "--fake", str(toy_dir), "--extractor", "pretrained"])
    assert code != 0
    assert "CYTOSYNTH_CACHE_DIR" in capsys.readouterr().err


def test_augbench(tmp_path, toy_dir):
    out = tmp_path / "b.csv"
    plan = ["--set", "images_per_class=5", "--set", "folds=5", "--set", "synth_per_class=2"]
    assert main(["augbench", "--real", str(toy_dir), "--synth", str(toy_dir), *plan, "--out", str(out),
                 "--constant", "0"]) == 0
    rows = list(csv.reader(open(out)))
    assert len(rows) == 3 and rows[1][0] == "baseline" and rows[2][0] == "+ d"
    assert len(rows[1]) == len(rows[2]) == len(rows[0])
    first = out.read_bytes()
    main(["augbench", "--real", str(toy_dir), "--synth", str(toy_dir), *plan, "--out", str(out), "--constant", "0"])
    assert out.read_bytes() == first


def test_augbench_oracle_row(tmp_path, toy_dir):
    out = tmp_path / "o.csv"
    assert main(["augbench", "--real", str(toy_dir), "--set", "images_per_class=10", "--out", str(out),
                 "--oracle"]) == 0
    row = next(csv.DictReader(open(out)))
    for m in ("accuracy", "precision", "recall", "f1"):
        assert float(row[f"{m}_mean"]) == 1.0


def test_augbench_indivisible_plan(tmp_path, toy_dir):
    plan = tmp_path / "p.json"
    plan.write_text(json.dumps({"images_per_class": 7, "folds": 5}))
    assert main(["augbench", "--real", str(toy_dir), "--plan", str(plan), "--out", str(tmp_path / "x.csv")]) == 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "cytosynth", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "maketoy" in r.stdout
