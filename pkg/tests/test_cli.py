import json

import numpy as np
import pytest

from momar import cli
from momar import pipeline as pl

TINY = """
[data]
count = 48
min_length = 16
max_length = 24
test_fraction = 0.25

[ae]
steps = 20
batch_size = 8
crop = 16
channels = 16
latent_width = 8

[mar]
steps = 15
batch_size = 8
warmup = 2
width = 16
heads = 2
mlp_width = 16
mlp_depth = 1
sample_steps = 4
ode_steps = 4

[eval]
steps = 10
batch_size = 16
width = 16
heads = 2
embed_dim = 8

[sample]
count = 3
ar_iters = 2

[edit]
start = 4
stop = 12
ar_iters = 2

[evaluate]
repeats = 2
pool = 4

[diagnose]
eval_steps = 5
ae_steps = 5
codebook = 4
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert run("prepare-data", "--config", cfg, "--seed", 3, "--out", root / "data") == 0
    assert run("train-ae", "--config", cfg, "--seed", 3, "--data", root / "data", "--out", root / "ae") == 0
    assert run("train-mar", "--config", cfg, "--seed", 3, "--data", root / "data",
               "--ae", root / "ae" / "ae.ckpt", "--backend", "linear-velocity", "--out", root / "mar") == 0
    assert run("train-eval", "--config", cfg, "--seed", 3, "--data", root / "data", "--out", root / "ev") == 0
    assert run("sample", "--config", cfg, "--seed", 5, "--data", root / "data", "--ae", root / "ae" / "ae.ckpt",
               "--mar", root / "mar" / "mar.ckpt", "--cfg-scale", 4.5, "--out", root / "samples") == 0
    return root, cfg


def test_config_rejects_unknown_keys(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("[mar]\nwidht = 3\nsteps = x\n[nope]\na = 1\n")
    with pytest.raises(cli.ConfigError) as exc:
        cli.load_config(str(p))
    msg = str(exc.value)
    assert "widht" in msg and "steps" in msg and "[nope]" in msg


def test_config_bad_key_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("[ae]\nbogus = 1\n")
    assert run("prepare-data", "--config", p, "--seed", 0, "--out", tmp_path / "o") == 2
    assert "bogus" in capsys.readouterr().err


def test_missing_file_reports_path(tmp_path, capsys):
    assert run("train-ae", "--seed", 0, "--data", tmp_path / "absent", "--out", tmp_path / "o") == 2
    assert "absent" in capsys.readouterr().err


def test_seed_required(tmp_path, capsys):
    assert run("prepare-data", "--out", tmp_path / "o") == 2
    assert "--seed" in capsys.readouterr().err


def test_preset_fills_unset_keys():
    cfg = cli.load_config(None)
    run_ = cli.Run("train-mar", cfg, 0, None, {})
    c = cli._gen_config(run_, 50, 16)
    assert (c.width, c.heads, c.mlp_width, c.mlp_depth) == (64, 4, 128, 3)
    cfg["mar"]["preset"] = "S"
    cfg["mar"]["mlp_depth"] = 2
    c = cli._gen_config(cli.Run("train-mar", cfg, 0, None, {}), 50, 16)
    assert (c.width, c.mlp_width, c.mlp_depth) == (384, 1024, 2)


def test_prepare_data_twice_identical(tmp_path):
    for name in ("a", "b"):
        assert run("prepare-data", "--seed", 1, "--out", tmp_path / name) == 0
    for f in ("motions.ckpt", "captions.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_dataset_roundtrip(tmp_path):
    ds = pl.prepare_data(pl.DataConfig(count=12, min_length=8, max_length=12), 0)
    pl.save_dataset(tmp_path, ds)
    back = pl.load_dataset(tmp_path)
    assert back.splits == ds.splits and back.captions == ds.captions
    for a, b in zip(ds.motions, back.motions):
        assert np.array_equal(a.frames, b.frames)
    assert back.layout.groups == ds.layout.groups


def test_manifest_contents(tiny_runs):
    root, _ = tiny_runs
    m = json.loads((root / "samples" / "manifest.json").read_text())
    assert m["command"] == "sample" and m["seed"] == 5
    assert m["config"]["sample"]["cfg_scale"] == 4.5
    assert m["config_hash"] == cli.config_hash(m["config"])
    assert set(m["versions"]) == {"momar", "numpy", "python"}
    assert m["wall_time"] > 0
    assert set(m["inputs"]) == {"data", "ae", "mar"}


def test_sample_records(tiny_runs):
    root, _ = tiny_runs
    lines = (root / "samples" / "samples.jsonl").read_text().splitlines()
    recs = [json.loads(line) for line in lines]
    assert len(recs) == 3
    for r in recs:
        assert {"seed", "caption", "K", "backend", "cfg_scale", "wall_time"} <= set(r)
        assert r["backend"] == "linear-velocity" and r["cfg_scale"] == 4.5
    assert len(list((root / "samples" / "motions").glob("*.txt"))) == 3


def test_evaluate_ground_truth_against_itself(tiny_runs, tmp_path):
    root, cfg = tiny_runs
    assert run("evaluate", "--config", cfg, "--data", root / "data", "--eval", root / "ev" / "evaluator.ckpt",
               "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "metrics.json").read_text())
    assert abs(rep["fid"]) < 1e-6
    assert {"fid", "r1", "r2", "r3", "matching", "multimodality", "clip_score", "n", "seed", "ci95"} <= set(rep)


def test_evaluate_samples(tiny_runs, tmp_path):
    root, cfg = tiny_runs
    assert run("evaluate", "--config", cfg, "--data", root / "data", "--eval", root / "ev" / "evaluator.ckpt",
               "--samples", root / "samples", "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "metrics.json").read_text())
    assert np.isfinite(rep["fid"]) and rep["n"] == 3


def test_edit_preserves_context(tiny_runs, tmp_path):
    root, cfg = tiny_runs
    assert run("edit", "--config", cfg, "--seed", 2, "--data", root / "data", "--ae", root / "ae" / "ae.ckpt",
               "--mar", root / "mar" / "mar.ckpt", "--out", tmp_path) == 0
    rec = json.loads((tmp_path / "samples.jsonl").read_text())
    assert rec["context_preserved"] is True
    assert (tmp_path / "edited.txt").exists()


def test_diagnose(tiny_runs, tmp_path):
    root, cfg = tiny_runs
    assert run("diagnose", "--config", cfg, "--seed", 1, "--data", root / "data", "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    split = rep["loss_split"]
    assert split["full"] == pytest.approx(split["essential"] + split["redundant"], rel=1e-12)
    assert set(rep["codebook"]) == {"full_dims", "essential_dims"}
    assert (tmp_path / "histogram_full_dims.txt").read_text().count("\n") == 4


def test_replay_is_byte_identical(tiny_runs, tmp_path):
    root, _ = tiny_runs
    for name in ("mar", "samples"):
        assert run("replay", root / name / "manifest.json", "--out", tmp_path / name) == 0
    for f in ("mar.ckpt", "losses.txt"):
        assert (root / "mar" / f).read_bytes() == (tmp_path / "mar" / f).read_bytes()
    for f in sorted((root / "samples" / "motions").iterdir()):
        assert f.read_bytes() == (tmp_path / "samples" / "motions" / f.name).read_bytes()
