import json
import subprocess
import sys

import numpy as np
import pytest

from fabtwin.cli import run
from fabtwin.core import DatasetManifest, load_gray, load_mask, save_mask
from fabtwin.desk import smoke_manifest_path
from fabtwin.networks import load_checkpoint

TINY_TRAIN = {"steps": 2, "depth": 2, "base_width": 4, "latent_dim": 3, "batch_size": 2}


def record(path):
    return json.loads(path.read_text())


def test_structures(tmp_path):
    assert run(["gen-data", "structures", "--kind", "cross100", "--out", str(tmp_path)]) == 0
    mask = load_mask(tmp_path / "cross100.png")
    assert mask.shape == (256, 256) and mask.sum() == 30000
    assert (tmp_path / "manifest.json").is_file()
    rec = record(tmp_path / "run.json")
    assert rec["status"] == "ok" and "cross100.png" in rec["artifacts"]


def test_unknown_flag(capsys):
    assert run(["gen-data", "structures", "--kind", "cross100", "--out", "x", "--bogus", "1"]) == 1
    assert "unrecognized" in capsys.readouterr().err


def test_bad_kind():
    assert run(["gen-data", "structures", "--kind", "hexagon", "--out", "x"]) == 1


def test_synth_reproducible(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"size": 128, "passband_low": 2, "passband_high": 6}))
    argv = ["gen-data", "synth", "--count", "3", "--size", "32", "--spec", str(spec), "--seed", "4"]
    assert run(argv + ["--out", str(tmp_path / "a")]) == 0
    assert run(argv + ["--out", str(tmp_path / "b")]) == 0
    a, b = record(tmp_path / "a" / "run.json"), record(tmp_path / "b" / "run.json")
    assert a["artifacts"] == b["artifacts"]
    # flag beats config file
    assert a["config"]["spec"]["size"] == 32 and a["config"]["spec"]["passband_high"] == 6
    X, Y = DatasetManifest.load(tmp_path / "a" / "manifest.json").load_arrays()
    assert X.shape == (3, 32, 32)


def test_bad_spec_key(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"sise": 64}))
    out = tmp_path / "o"
    assert run(["gen-data", "synth", "--count", "1", "--spec", str(spec), "--out", str(out)]) == 1
    assert record(out / "run.json")["status"] == "error"


def test_fab_simulate(tmp_path):
    layout = np.zeros((32, 32), np.uint8)
    layout[8:24, 12:20] = 1
    save_mask(tmp_path / "lay.png", layout)
    argv = ["fab", "simulate", "--layout", str(tmp_path / "lay.png"), "--samples", "35",
            "--seed", "1"]
    assert run(argv + ["--out", str(tmp_path / "a")]) == 0
    assert run(argv + ["--out", str(tmp_path / "b")]) == 0
    m = DatasetManifest.load(tmp_path / "a" / "manifest.json")
    assert len(m.pairs[0].fabricated_paths) == 35
    assert (record(tmp_path / "a" / "run.json")["artifacts"]
            == record(tmp_path / "b" / "run.json")["artifacts"])


def test_fab_missing_layout(tmp_path):
    assert run(["fab", "simulate", "--layout", str(tmp_path / "none.png"), "--samples", "2",
                "--out", str(tmp_path / "o")]) == 1


def test_evaluate_empty_generated(tmp_path, capsys):
    real = tmp_path / "real"
    real.mkdir()
    save_mask(real / "r.png", np.ones((8, 8), np.uint8))
    (tmp_path / "gen").mkdir()
    code = run(["evaluate", "--real", str(real), "--generated", str(tmp_path / "gen"),
                "--report", str(tmp_path / "rep.json")])
    assert code == 1
    assert "no images" in capsys.readouterr().err
    assert record(tmp_path / "rep.json.run.json")["status"] == "error"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("train")
    cfg = d / "train.json"
    cfg.write_text(json.dumps(TINY_TRAIN))
    ckpts = []
    for seed in (0, 1):
        out = d / f"g{seed}.gfck"
        code = run(["train", "genfab", "--data", str(smoke_manifest_path()), "--config", str(cfg),
                    "--seed", str(seed), "--out", str(out)])
        assert code == 0
        ckpts.append(out)
    return d, cfg, ckpts


def test_train_outputs(trained):
    d, _, ckpts = trained
    model, meta = load_checkpoint(ckpts[0])
    assert meta["train_config"]["steps"] == 2 and meta["train_config"]["seed"] == 0
    assert (d / "g0_loss.csv").is_file()
    rec = record(d / "g0.gfck.run.json")
    assert rec["status"] == "ok" and rec["seeds"]["seed"] == 0


def test_train_deterministic(trained, tmp_path):
    d, cfg, ckpts = trained
    out = tmp_path / "again.gfck"
    assert run(["train", "genfab", "--data", str(smoke_manifest_path()), "--config", str(cfg),
                "--seed", "0", "--out", str(out)]) == 0
    assert out.read_bytes() == ckpts[0].read_bytes()


@pytest.mark.parametrize("model", ["unet", "mcdropout", "ensemble"])
def test_train_baselines(trained, tmp_path, model):
    _, cfg, _ = trained
    out = tmp_path / f"{model}.gfck"
    argv = ["train", model, "--data", str(smoke_manifest_path()), "--config", str(cfg),
            "--out", str(out), "--members", "2"]
    if model == "mcdropout":
        # dropout sits in the first three decoder blocks, so use a deeper net
        argv += ["--steps", "1"]
        cfg2 = tmp_path / "deep.json"
        cfg2.write_text(json.dumps({**TINY_TRAIN, "depth": 4}))
        argv[argv.index(str(cfg))] = str(cfg2)
    assert run(argv) == 0
    layout = smoke_manifest_path().parent / "pattern00.png"
    assert run(["generate", "--ckpt", str(out), "--layout", str(layout), "--samples", "3",
                "--out", str(tmp_path / "gen")]) == 0
    imgs = [load_gray(p) for p in sorted((tmp_path / "gen").glob("*_gen*.png"))]
    assert len(imgs) == 3
    distinct = len({im.tobytes() for im in imgs})
    assert distinct == {"unet": 1, "mcdropout": 3, "ensemble": 2}[model]


def test_generate_and_evaluate(trained, tmp_path):
    d, _, ckpts = trained
    layout = smoke_manifest_path().parent / "pattern00.png"
    argv = ["generate", "--ckpt", str(ckpts[0]), "--layout", str(layout), "--samples", "4",
            "--seed", "3"]
    assert run(argv + ["--out", str(tmp_path / "g1")]) == 0
    assert run(argv + ["--out", str(tmp_path / "g2")]) == 0
    assert (record(tmp_path / "g1" / "run.json")["artifacts"]
            == record(tmp_path / "g2" / "run.json")["artifacts"])
    assert run(["fab", "simulate", "--layout", str(layout), "--samples", "4",
                "--out", str(tmp_path / "real")]) == 0
    report = tmp_path / "rep.json"
    assert run(["evaluate", "--real", str(tmp_path / "real"), "--generated", str(tmp_path / "g1"),
                "--bins", "256", "--metrics", "iou,kl,wd,fd", "--report", str(report)]) == 0
    rep = json.loads(report.read_text())
    assert rep["structure_id"] == "pattern00"
    assert rep["sample_counts"] == {"generated": 4, "real": 4}
    for key in ("iou_random_mean", "iou_greedy_mean", "kl_real_vs_model", "wd_pairwise_mean", "fd"):
        assert rep[key] is not None


def test_evaluate_unknown_metric(tmp_path):
    d = tmp_path / "s"
    d.mkdir()
    save_mask(d / "a.png", np.ones((4, 4), np.uint8))
    assert run(["evaluate", "--real", str(d), "--generated", str(d), "--metrics", "iou,psnr",
                "--report", str(tmp_path / "r.json")]) == 1


def test_uncertainty(trained, tmp_path):
    _, _, ckpts = trained
    layout = smoke_manifest_path().parent / "pattern01.png"
    out = tmp_path / "unc"
    assert run(["uncertainty", "--ckpts", *map(str, ckpts), "--layout", str(layout),
                "--samples", "3", "--out", str(out)]) == 0
    total, ale, epi = (np.load(out / f"{n}.npy") for n in ("total", "aleatoric", "epistemic"))
    assert np.allclose(total, ale + epi, atol=1e-6)
    for n in ("total", "aleatoric", "epistemic"):
        assert (out / f"{n}.png").is_file()


def test_uncertainty_needs_two(trained, tmp_path):
    _, _, ckpts = trained
    layout = smoke_manifest_path().parent / "pattern01.png"
    assert run(["uncertainty", "--ckpts", str(ckpts[0]), "--layout", str(layout),
                "--samples", "3", "--out", str(tmp_path / "u")]) == 1


def test_plot(trained, tmp_path):
    d, _, _ = trained
    assert run(["plot", "losses", "--in", str(d / "g0_loss.csv"),
                "--out", str(tmp_path / "loss.png")]) == 0
    assert (tmp_path / "loss.png").is_file() and (tmp_path / "loss_terms.png").is_file()
    np.save(tmp_path / "m.npy", np.zeros((8, 8)))
    assert run(["plot", "heatmap", "--in", str(tmp_path / "m.npy"),
                "--out", str(tmp_path / "h.png"), "--scale", "0.25"]) == 0
    assert run(["plot", "heatmap", "--in", str(tmp_path / "m.npy"),
                "--out", str(tmp_path / "h.png"), "--scale", "big"]) == 1


def test_malformed_loss_log(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("step,loss_D,loss_G_total,loss_G_gan,loss_G_l1,wall_ms\n1,1,1,1,1\n")
    assert run(["plot", "losses", "--in", str(p), "--out", str(tmp_path / "x.png")]) == 1
    assert "line 2" in capsys.readouterr().err


def test_divergence_exit_code(tmp_path, monkeypatch):
    import fabtwin.cli as cli
    from fabtwin.exceptions import TrainingDivergedError

    def boom(*a, **k):
        raise TrainingDivergedError("non-finite loss at step 1")
    monkeypatch.setattr(cli, "train_genfab", boom)
    out = tmp_path / "g.gfck"
    assert run(["train", "genfab", "--data", str(smoke_manifest_path()), "--out", str(out)]) == 2
    assert record(tmp_path / "g.gfck.run.json")["status"] == "error"


def test_threads_env(monkeypatch, tmp_path):
    monkeypatch.setenv("FABTWIN_THREADS", "-3")
    assert run(["gen-data", "structures", "--kind", "square", "--out", str(tmp_path)]) == 1


def test_console_entry():
    res = subprocess.run([sys.executable, "-m", "fabtwin.cli", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0
    for name in ("gen-data", "fab", "train", "generate", "evaluate", "uncertainty", "plot"):
        assert name in res.stdout
