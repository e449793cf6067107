from __future__ import annotations

import json

import numpy as np
import pytest
import torch
from filelock import FileLock
from PIL import Image

from modgan.checkpoint import load_checkpoint
from modgan.cli import main
from modgan.config import TrainConfig
from modgan.data.colormnist import load_split
from modgan.data.manifest import load_png, to_uint8

TINY = ["width=0.03125", "n_res=1", "image_size=32", "batch_size=8", "n_critic=2", "log_every=1"]


def _overrides(*items):
    return [a for kv in (*TINY, *items) for a in ("--override", kv)]


@pytest.fixture(scope="module")
def trained(tiny_data, tmp_path_factory):
    """A zero-epoch translation run through the CLI."""
    out = tmp_path_factory.mktemp("run")
    rc = main(["train", "--out", str(out), "--data", str(tiny_data), *_overrides("epochs_flat=0", "epochs_decay=0")])
    assert rc == 0
    return out


# -- argument errors ----------------------------------------------------------------------


@pytest.mark.parametrize(
    "argv",
    [[], ["frobnicate", "--out", "x"], ["train"], ["evaluate", "--out", "x", "--order", "sideways", "--checkpoint", "c"]],
)
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_runtime_error_is_one_line(tmp_path, capsys):
    rc = main(["translate", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "nope"), "--plan", "img:a.png -> out"])
    err = capsys.readouterr().err.strip().splitlines()
    assert rc == 1 and len(err) == 1
    assert err[0].startswith("error: LoadError: no checkpoint found")


def test_config_error_reported(tmp_path, tiny_data, capsys):
    rc = main(["train", "--out", str(tmp_path), "--data", str(tiny_data), "--override", "lambda_gp=-1"])
    assert rc == 1
    assert capsys.readouterr().err.startswith("error: ConfigError: lambda_gp")


def test_out_dir_lock(tmp_path, capsys):
    with FileLock(str(tmp_path / ".modgan.lock")):
        rc = main(["synth-data", "--out", str(tmp_path), "--count", "4"])
    assert rc == 1
    assert capsys.readouterr().err.startswith("error: Timeout")


# -- commands ----------------------------------------------------------------------------


def test_synth_data(tmp_path, idx_source):
    out = tmp_path / "d"
    assert main(["synth-data", "--out", str(out), "--mnist", str(idx_source), "--count", "20", "--size", "32", "--seed", "5"]) == 0
    train, test = load_split(out, "train"), load_split(out, "test")
    assert len(train) + len(test) == 20
    run = json.loads((out / "run.json").read_text())
    assert run["command"] == "synth-data" and run["seed"] == 5 and run["config_hash"] is None
    assert set(run["versions"]) == {"modgan", "python", "torch", "numpy"}


def test_train_writes_provenance(trained, tiny_data):
    run = json.loads((trained / "run.json").read_text())
    expect = TrainConfig.load(None, [*TINY, "epochs_flat=0", "epochs_decay=0", f"data={tiny_data}"])
    assert run["command"] == "train" and run["seed"] == 0
    assert run["config_hash"] == expect.hash()
    ckpt = load_checkpoint(trained / "checkpoints" / "final")
    assert ckpt.config == expect


def test_train_from_yaml_with_override(tmp_path, tiny_data):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model:\n  width: 0.03125\n  n_res: 1\ntraining:\n  epochs_flat: 0\n  epochs_decay: 0\n  seed: 3\n")
    out = tmp_path / "r"
    assert main(["train", "--out", str(out), "--config", str(cfg), "--data", str(tiny_data), "--override", "image_size=32", "--seed", "9"]) == 0
    ckpt = load_checkpoint(out / "checkpoints" / "final")
    assert (ckpt.config.width, ckpt.config.n_res, ckpt.config.seed) == (0.03125, 1, 9)


def test_translate_identity_and_masks(trained, tiny_data, tmp_path):
    src = tiny_data / load_split(tiny_data, "test").rows[0][0]
    ckpt = load_checkpoint(trained / "checkpoints" / "final")
    assert main(["translate", "--out", str(tmp_path / "a"), "--checkpoint", str(trained), "--plan", f"img:{src} -> out"]) == 0
    x = load_png(src)[None]
    with torch.no_grad():
        expect = to_uint8(ckpt.model.reconstructor(ckpt.model.encoder(x))[0]).permute(1, 2, 0).numpy()
    assert np.array_equal(np.asarray(Image.open(tmp_path / "a" / "output.png")), expect)
    assert not (tmp_path / "a" / "mask_0.png").exists()

    plan = f"img:{src} -> color=red -> bgcolor=white -> out"
    assert main(["translate", "--out", str(tmp_path / "b"), "--checkpoint", str(trained), "--plan", plan, "--plan", f"img:{src} -> style=flat -> out"]) == 0
    names = sorted(p.name for p in (tmp_path / "b" / "0000").iterdir())
    assert names == ["mask_0.png", "mask_1.png", "mask_aggregate.png", "output.png"]
    assert Image.open(tmp_path / "b" / "0000" / "mask_0.png").size == (32, 32)
    assert (tmp_path / "b" / "0001" / "output.png").exists()


def test_translate_bad_plan(trained, tmp_path, capsys):
    rc = main(["translate", "--out", str(tmp_path), "--checkpoint", str(trained), "--plan", "img:a.png -> colour=red -> out"])
    assert rc == 1
    assert capsys.readouterr().err.startswith("error: PlanError:")


def test_generate(tiny_data, tmp_path):
    run = tmp_path / "gen"
    overrides = _overrides("task=generation", "epochs_flat=0", "epochs_decay=0")
    assert main(["train", "--out", str(run), "--data", str(tiny_data), *overrides]) == 0
    out = tmp_path / "g"
    argv = ["generate", "--out", str(out), "--checkpoint", str(run), "--plan", "gen:4 -> color=blue -> out", "--count", "3", "--seed", "2"]
    assert main(argv) == 0
    first = [np.asarray(Image.open(out / f"output_{b:03d}.png")) for b in range(3)]
    assert (out / "mask_0_002.png").exists()
    assert main([*argv[:2], str(tmp_path / "g2"), *argv[3:]]) == 0
    again = [np.asarray(Image.open(tmp_path / "g2" / f"output_{b:03d}.png")) for b in range(3)]
    assert all(np.array_equal(a, b) for a, b in zip(first, again))


def test_evaluate_with_saved_classifier(trained, tiny_data, tmp_path, capsys):
    clf_dir = tmp_path / "clf"
    # a deliberately short classifier run; its held-out accuracy is then forced so the gate passes
    assert main(["evaluate", "--out", str(tmp_path / "e0"), "--checkpoint", str(trained), "--classifier", str(clf_dir), "--classifier-epochs", "1"]) in (0, 1)
    meta = json.loads((clf_dir / "classifier.json").read_text())
    meta["accuracy"] = {k: 1.0 for k in meta["accuracy"]}
    (clf_dir / "classifier.json").write_text(json.dumps(meta))
    out = tmp_path / "e"
    argv = ["evaluate", "--out", str(out), "--checkpoint", str(trained), "--classifier", str(clf_dir), "--combinations", "color,color+style", "--order", "random"]
    assert main(argv) == 0
    lines = (out / "table.csv").read_text().splitlines()
    assert lines[0] == "variant,order,combination,error_percent"
    assert [ln.split(",")[:3] for ln in lines[1:]] == [["full", "random", "C"], ["full", "random", "CS"]]
    assert all(0 <= float(ln.split(",")[3]) <= 100 for ln in lines[1:])
    assert "full (random order)" in (out / "table.txt").read_text()


def test_evaluate_gate_failure(trained, tmp_path, capsys):
    clf_dir = tmp_path / "clf"
    main(["evaluate", "--out", str(tmp_path / "e0"), "--checkpoint", str(trained), "--classifier", str(clf_dir), "--classifier-epochs", "1"])
    capsys.readouterr()
    meta = json.loads((clf_dir / "classifier.json").read_text())
    meta["accuracy"]["style"] = 0.5
    (clf_dir / "classifier.json").write_text(json.dumps(meta))
    rc = main(["evaluate", "--out", str(tmp_path / "e1"), "--checkpoint", str(trained), "--classifier", str(clf_dir), "--combinations", "style"])
    assert rc == 1
    assert capsys.readouterr().err.startswith("error: EvaluationError: classifier held-out accuracy below")


def test_visualize_masks(trained, tmp_path):
    out = tmp_path / "v"
    assert main(["visualize-masks", "--out", str(out), "--checkpoint", str(trained), "--plan", "color=red -> style=stroke", "--num-images", "2"]) == 0
    grids = sorted(out.glob("*_grid.png"))
    assert [g.name for g in grids] == ["img000_plan00_grid.png", "img001_plan00_grid.png"]
    assert Image.open(grids[0]).size == (32 * 5, 32)
