import json

import numpy as np
import pytest

from microdiff.cli import main
from microdiff.io import read_curves_csv, read_microstructure, write_pgm


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny generated dataset and a briefly trained checkpoint shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["generate-dataset", "--count", "6", "--shape", "16,16", "--fraction", "0.3", "--seed", "3",
                 "--params", '{"radius_range": [2.0, 3.0]}', "--out", str(data)]) == 0
    ckpt = root / "m.ckpt"
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--steps", "3", "--batch-size", "2",
                 "--base-channels", "4"]) == 0
    return root, data, ckpt


def test_generate_dataset_outputs(workspace):
    _, data, _ = workspace
    files = sorted(data.glob("*.pgm"))
    assert len(files) == 6
    manifest = json.loads((data / "manifest.json").read_text())
    assert len(manifest["seeds"]) == 6 and len(set(manifest["hashes"])) == 6
    assert manifest["labels"] is None
    assert read_microstructure(files[0]).shape == (16, 16)


def test_generate_labelled_and_3d(tmp_path):
    out = tmp_path / "lab"
    assert main(["generate-dataset", "--count", "2", "--shape", "16x16", "--label-fractions", "0.2,0.4",
                 "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["labels"] == [0, 0, 1, 1]
    vol = tmp_path / "vol"
    assert main(["generate-dataset", "--count", "1", "--shape", "8,8,8", "--kind", "voronoi",
                 "--fraction", "0.5", "--out", str(vol)]) == 0
    assert read_microstructure(vol / "sample_00000.raw").shape == (8, 8, 8)


def test_train_writes_checkpoint_and_losses(workspace):
    _, _, ckpt = workspace
    assert ckpt.exists()
    assert len(json.loads(ckpt.with_suffix(".losses.json").read_text())["losses"]) == 3


def test_sample_is_reproducible(workspace, tmp_path):
    _, _, ckpt = workspace
    for name in ("a", "b"):
        assert main(["sample", "--ckpt", str(ckpt), "-n", "2", "--steps", "5", "--seed", "4",
                     "--out", str(tmp_path / name)]) == 0
    ha = json.loads((tmp_path / "a" / "samples.json").read_text())["hashes"]
    hb = json.loads((tmp_path / "b" / "samples.json").read_text())["hashes"]
    assert ha == hb and len(ha) == 2


def test_interpolate_and_eta_sweep(workspace, tmp_path):
    _, _, ckpt = workspace
    assert main(["interpolate", "--ckpt", str(ckpt), "--frames", "3", "--steps", "4",
                 "--out", str(tmp_path / "i")]) == 0
    assert len(list((tmp_path / "i").glob("frame_*.pgm"))) == 3
    assert read_microstructure(tmp_path / "i" / "strip.pgm").shape == (16, 48)
    assert main(["eta-sweep", "--ckpt", str(ckpt), "--steps", "4", "--etas", "0,0.2,0.4,0.6,0.8,1.0",
                 "--out", str(tmp_path / "e")]) == 0
    rep = json.loads((tmp_path / "e" / "eta_sweep.json").read_text())
    assert len(list((tmp_path / "e").glob("eta_*.pgm"))) == 6
    assert rep["hamming"][0] == 0.0


def test_descriptors_file_and_directory(workspace, tmp_path):
    _, data, _ = workspace
    one = tmp_path / "one.csv"
    assert main(["descriptors", "--input", str(data / "sample_00000.pgm"), "--r-max", "5", "--out", str(one)]) == 0
    curves = read_curves_csv(one)
    assert list(curves) == ["r", "S2", "L"] and len(curves["r"]) == 6
    assert curves["L"][0] == pytest.approx(curves["S2"][0])
    many = tmp_path / "all.csv"
    assert main(["descriptors", "--input", str(data), "--r-max", "5", "--out", str(many)]) == 0
    assert len(list((tmp_path / "all_samples").glob("*.csv"))) == 6


def test_fourier(workspace, tmp_path):
    _, data, _ = workspace
    assert main(["fourier", "--input", str(data), "--out", str(tmp_path / "f")]) == 0
    stats = json.loads((tmp_path / "f" / "stats.json").read_text())
    assert stats["contours"] > 0 and stats["skew_normal"]["scale"] > 0
    assert (tmp_path / "f" / "magnitudes.csv").read_text().startswith("contour,u,magnitude")


def test_permeability_channel(tmp_path):
    write_pgm(tmp_path / "chan.pgm", np.zeros((4, 9), dtype=np.uint8))
    out = tmp_path / "k.json"
    assert main(["permeability", "--input", str(tmp_path / "chan.pgm"), "--walls", "--tol", "1e-9",
                 "--velocity-out", str(tmp_path / "u"), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["converged"] and rep["kappa"] == pytest.approx(81 / 12, rel=0.03)
    assert (tmp_path / "u.raw").exists()


def test_permeability_nonconvergence_exit_code(tmp_path):
    write_pgm(tmp_path / "chan.pgm", np.zeros((4, 9), dtype=np.uint8))
    out = tmp_path / "k.json"
    assert main(["permeability", "--input", str(tmp_path / "chan.pgm"), "--walls", "--max-steps", "5",
                 "--out", str(out)]) == 4
    assert json.loads(out.read_text())["converged"] is False


def test_divergence_exit_code(workspace, tmp_path):
    _, data, _ = workspace
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "x.ckpt"), "--steps", "20",
                 "--optimizer", "sgd", "--lr", "1e30", "--base-channels", "4", "--ema", "0"]) == 3
    assert not (tmp_path / "x.ckpt").exists()


@pytest.mark.parametrize("argv", [
    ["sample"],
    ["descriptors"],
    ["permeability", "--input", "does-not-exist.pgm"],
    ["train", "--data", "does-not-exist"],
])
def test_validation_exit_codes(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path / "out")]) == 2
    assert not (tmp_path / "out").exists()


def test_invalid_values_write_nothing(workspace, tmp_path):
    _, data, ckpt = workspace
    out = tmp_path / "out"
    cases = [
        ["sample", "--ckpt", str(ckpt), "--eta", "2", "--out", str(out)],
        ["eta-sweep", "--ckpt", str(ckpt), "--etas", "0,1.5", "--out", str(out)],
        ["interpolate", "--ckpt", str(ckpt), "--frames", "1", "--out", str(out)],
        ["descriptors", "--input", str(data), "--r-max", "16", "--out", str(out / "c.csv")],
        ["generate-dataset", "--count", "0", "--out", str(out)],
        ["generate-dataset", "--kind", "nonsense", "--out", str(out)],
        ["train", "--data", str(data), "--steps", "-1", "--out", str(out / "m.ckpt")],
        ["train", "--data", str(data), "--ema", "1.0", "--out", str(out / "m.ckpt")],
    ]
    for argv in cases:
        assert main(argv) == 2, argv
        assert not out.exists(), argv


def test_config_overrides_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"count": 2, "shape": [8, 8], "fraction": 0.25, "out": str(tmp_path / "d")}))
    assert main(["generate-dataset", "--count", "9", "--config", str(cfg)]) == 0
    assert len(list((tmp_path / "d").glob("*.pgm"))) == 2


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_option": 1}))
    assert main(["generate-dataset", "--config", str(bad)]) == 2
    bad.write_text("{not json")
    assert main(["generate-dataset", "--config", str(bad)]) == 2
    bad.write_text("[1, 2]")
    assert main(["generate-dataset", "--config", str(bad)]) == 2


def test_pipeline_subcommand(tmp_path):
    cfg = {
        "dataset": {"count": 4, "shape": [16, 16], "params": {"radius_range": [2.0, 3.0]}},
        "model": {"base_channels": 4},
        "training": {"steps": 2, "batch_size": 2},
        "sampler": {"n_samples": 2, "steps": 3},
        "evaluation": {"r_max": 4},
        "out_dir": str(tmp_path / "run"),
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    assert main(["pipeline", "--config", str(path)]) == 0
    rep = json.loads((tmp_path / "run" / "report.json").read_text())
    assert set(rep["stages"]) == {"generate", "train", "sample", "descriptors"}
    assert main(["pipeline", "--config", str(path), "--out-dir", str(tmp_path / "run2")]) == 0
    rep2 = json.loads((tmp_path / "run2" / "report.json").read_text())
    assert rep2["samples"] == rep["samples"]
    assert main(["pipeline"]) == 2
    cfg["training"]["lr"] = -1
    path.write_text(json.dumps(cfg))
    assert main(["pipeline", "--config", str(path), "--out-dir", str(tmp_path / "run3")]) == 2
    assert not (tmp_path / "run3").exists()


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.strip()
