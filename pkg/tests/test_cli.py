import os

import numpy as np
import pytest

from vcnn import cli
from vcnn import model as M
from vcnn.niftio import gen_phantom, load_manifest, read_nifti
from reference import TOTALS_2D, TOTALS_3D


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _totals(out):
    got = {}
    for line in out.splitlines():
        for key in ("Total", "Trainable", "Non-trainable"):
            if line.startswith(key + " params:"):
                got[key.lower()] = int(line.split(":")[1].replace(",", ""))
    return got


@pytest.mark.parametrize("name,totals", [("cnn2d", TOTALS_2D), ("cnn3d", TOTALS_3D)])
def test_inspect_totals(capsys, name, totals):
    code, out, _ = run(capsys, "inspect", name)
    assert code == 0
    assert _totals(out) == {"total": totals[0], "trainable": totals[1], "non-trainable": totals[2]}


@pytest.mark.parametrize("argv", [
    ["inspect", "resnet"], ["inspect"], [], ["frobnicate"], ["inspect", "cnn3d", "--input-size", "4"],
    ["gen-phantoms", "--count", "-1", "--out", "x"], ["gen-phantoms"], ["train", "--epochs", "0"],
    ["inspect", "cnn3d", "--threads", "0"],
])
def test_usage_errors(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 1 and err


def test_gen_phantoms_layout_and_reproducibility(capsys, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(capsys, "gen-phantoms", "--out", d, "--count", 2, "--size", 16, "--seed", 3)[0] == 0
    names = sorted(os.listdir(a))
    assert len(names) == 7 and "manifest.csv" in names
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes()
    rows = load_manifest(a / "manifest.csv")
    assert [r.age_class for r in rows] == ["newborn"] * 2 + ["1yr"] * 2 + ["3yr"] * 2
    v = read_nifti(a / rows[0].path)
    ref = gen_phantom("newborn", 3 * cli.MAX_PER_CLASS, size=16)
    assert np.array_equal(v.voxels, ref.voxels)


@pytest.mark.parametrize("datatype", ["int16", "uint8"])
def test_gen_phantoms_integer_types(capsys, tmp_path, datatype):
    assert run(capsys, "gen-phantoms", "--out", tmp_path, "--count", 1, "--size", 12,
               "--datatype", datatype, "--gzip", "yes")[0] == 0
    v = read_nifti(tmp_path / "1yr_000.nii.gz")
    ref = gen_phantom("1yr", 0, size=12).voxels
    step = (ref.max() - ref.min()) / (np.iinfo(datatype).max - np.iinfo(datatype).min)
    assert np.max(np.abs(v.voxels - ref)) <= step * 0.51


def test_config_file(capsys, tmp_path):
    cfg = tmp_path / "vcnn.cfg"
    cfg.write_text("# defaults\ninput-size = 16\n")
    code, out, _ = run(capsys, "inspect", "cnn3d-small", "--config", cfg)
    assert code == 0 and "(16, 16, 16, 1)" in out
    code, out, _ = run(capsys, "inspect", "cnn3d-small", "--config", cfg, "--input-size", "24")
    assert code == 0 and "(24, 24, 24, 1)" in out
    cfg.write_text("colour = blue\n")
    assert run(capsys, "inspect", "cnn3d", "--config", cfg)[0] == 1
    assert run(capsys, "inspect", "cnn3d", "--config", tmp_path / "missing.cfg")[0] in (1, 2)


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("phantoms")
    assert cli.main(["gen-phantoms", "--out", str(d), "--count", "2", "--size", "24"]) == 0
    return d


def test_train_eval_predict(capsys, tmp_path, phantom_dir):
    out = tmp_path / "run"
    code, report, _ = run(capsys, "train", "--manifest", phantom_dir / "manifest.csv", "--out", out,
                          "--model", "cnn3d-small", "--epochs", 2, "--split-mode", "none")
    assert code == 0 and "accuracy" in report
    assert sorted(os.listdir(out)) == ["confusion.txt", "epochs.csv", "metrics.csv", "model.vcnn"]
    assert len((out / "epochs.csv").read_text().splitlines()) == 3
    m = M.load_checkpoint(out / "model.vcnn")
    assert m.model_id == "cnn3d-small"

    code, report, _ = run(capsys, "eval", "--checkpoint", out / "model.vcnn",
                          "--manifest", phantom_dir / "manifest.csv")
    assert code == 0 and "macro sensitivity" in report

    code, line, _ = run(capsys, "predict", "--checkpoint", out / "model.vcnn",
                        "--input", phantom_dir / "3yr_000.nii")
    assert code == 0
    label, probs = line.strip().split("\t")
    values = [float(p.split("=")[1]) for p in probs.split()]
    assert label in M.CLASS_NAMES and abs(sum(values) - 1) < 1e-5

    # a checkpoint for another architecture is a data error
    code, _, err = run(capsys, "eval", "--checkpoint", out / "model.vcnn", "--manifest",
                       phantom_dir / "manifest.csv", "--model", "cnn3d")
    assert code == 2 and err


def test_malformed_input_is_data_error(capsys, tmp_path, phantom_dir):
    bad = tmp_path / "bad.nii"
    bad.write_bytes(b"\0" * 100)
    code, _, err = run(capsys, "predict", "--checkpoint", tmp_path / "none.vcnn", "--input", bad)
    assert code == 2
    ckpt = tmp_path / "junk.vcnn"
    ckpt.write_bytes(b"VCNN1garbage")
    assert run(capsys, "predict", "--checkpoint", ckpt, "--input", phantom_dir / "3yr_000.nii")[0] == 2


def test_preflight_writes_nothing(capsys, tmp_path, phantom_dir):
    manifest = tmp_path / "manifest.csv"
    lines = (phantom_dir / "manifest.csv").read_text().splitlines()
    body = [str(phantom_dir) + "/" + ln for ln in lines[1:]]
    body[-1] = body[-1].replace("3yr_001.nii", "missing.nii")
    manifest.write_text("\n".join([lines[0]] + body) + "\n")
    out = tmp_path / "run"
    code, _, err = run(capsys, "train", "--manifest", manifest, "--out", out, "--model", "cnn3d-small")
    assert code == 2 and "missing.nii" in err
    assert not out.exists()


def test_numeric_failure_exit_code(capsys, tmp_path, phantom_dir):
    out = tmp_path / "run"
    code, _, err = run(capsys, "train", "--manifest", phantom_dir / "manifest.csv", "--out", out,
                       "--model", "cnn3d-small", "--epochs", 3, "--split-mode", "none",
                       "--learning-rate", "1e30")
    assert code == 3 and "non-finite" in err
    assert not out.exists()
