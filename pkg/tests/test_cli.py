from pathlib import Path

import numpy as np
import pytest

from segtrus import cli
from segtrus import data as D
from segtrus.errors import NumericError
from segtrus.kernels import GradcheckReport
from segtrus.train import load_checkpoint

GOLDEN = Path(__file__).parent / "golden"
TINY = '{"widths": [4, 6], "conv_counts": [2, 2]}'


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", root / "data", "--count", 12, "--size", 16, "--seed", 1) == 0
    assert run("train", "--data", root / "data", "--out", root / "m.ckpt", "--config", TINY,
               "--lr", 20, "--epochs", 2, "--log", root / "log.csv") == 0
    return root


def test_gen_data_layout(workspace):
    files = sorted(p.name for p in (workspace / "data").iterdir())
    assert "manifest.csv" in files
    assert sum(f.startswith("img_") for f in files) == sum(f.startswith("msk_") for f in files) == 12
    split = D.read_manifest(workspace / "data" / "manifest.csv")
    assert sorted(split.values()).count(D.TEST) == 1


def test_gen_data_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--out", tmp_path / name, "--count", 3, "--size", 16, "--seed", 4) == 0
    for p in (tmp_path / "a").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
    assert not (tmp_path / "a" / "manifest.csv").exists()  # too few samples to split


def test_train_log_and_reproducibility(workspace, tmp_path):
    rows = (workspace / "log.csv").read_text().splitlines()
    assert rows[0] == "epoch,mean_loss,train_dsc" and len(rows) == 3
    assert run("train", "--data", workspace / "data", "--out", tmp_path / "again.ckpt",
               "--config", TINY, "--lr", 20, "--epochs", 2) == 0
    assert (tmp_path / "again.ckpt").read_bytes() == (workspace / "m.ckpt").read_bytes()


def test_train_without_manifest_splits_in_memory(tmp_path):
    D.save_dataset(tmp_path / "d", D.Dataset(D.generate_samples(10, 16, 0)))
    assert run("train", "--data", tmp_path / "d", "--out", tmp_path / "m.ckpt",
               "--config", TINY, "--epochs", 1, "--no-nrc", "--rrc-mode", "indices-add") == 0
    ckpt = load_checkpoint(tmp_path / "m.ckpt")
    assert not ckpt.config.nrc_enabled and ckpt.config.rrc_mode == "indices_plus_add"
    assert ckpt.config.input_size == (16, 16)


def test_eval_report(workspace, tmp_path, capsys):
    for split in ("test", "train", "all"):
        report = tmp_path / f"{split}.csv"
        assert run("eval", "--model", workspace / "m.ckpt", "--data", workspace / "data",
                   "--split", split, "--report", report) == 0
        rows = report.read_text().splitlines()
        assert rows[0] == "run,avg,max,min" and rows[1].startswith("1,")
        avg, hi, lo = map(float, rows[1].split(",")[1:])
        assert 0.0 <= lo <= avg <= hi <= 1.0
    assert "avg" in capsys.readouterr().out


def test_infer_writes_mask_and_overlay(workspace, tmp_path, capsys):
    data = workspace / "data"
    sid = D.load_dataset(data).ids[0]
    assert run("infer", "--model", workspace / "m.ckpt", "--image", data / f"img_{sid}.pgm",
               "--out", tmp_path / "seg.pgm", "--truth", data / f"msk_{sid}.pgm",
               "--overlay", tmp_path / "ov.ppm") == 0
    seg = D.read_pgm_bytes(tmp_path / "seg.pgm")
    assert seg.shape == (16, 16) and set(np.unique(seg)) <= {0, 255}
    assert D.read_ppm(tmp_path / "ov.ppm").shape == (16, 16, 3)
    assert capsys.readouterr().out.startswith("dsc ")


def test_infer_size_mismatch(workspace, tmp_path):
    D.write_pgm(np.zeros((8, 8)), tmp_path / "small.pgm")
    assert run("infer", "--model", workspace / "m.ckpt", "--image", tmp_path / "small.pgm",
               "--out", tmp_path / "o.pgm") == 2


def test_infer_truth_needs_overlay(workspace, tmp_path):
    assert run("infer", "--model", workspace / "m.ckpt", "--image", "x.pgm",
               "--out", tmp_path / "o.pgm", "--truth", "t.pgm") == 1


@pytest.mark.parametrize("argv, code", [
    ([], 1),
    (["bogus"], 1),
    (["gradcheck", "--nope"], 1),
    (["gen-data", "--out", "x"], 1),
    (["gen-data", "--out", "{tmp}/g", "--count", "2", "--size", "8"], 1),
    (["eval", "--model", "{tmp}/missing.ckpt", "--data", "{tmp}", "--report", "{tmp}/r.csv"], 2),
    (["train", "--data", "{tmp}", "--out", "{tmp}/m.ckpt"], 2),
    (["train", "--data", "{tmp}", "--out", "{tmp}/m.ckpt", "--config", "{{not json"], 2),
])
def test_exit_codes(tmp_path, argv, code, capsys):
    assert cli.main([a.format(tmp=tmp_path) for a in argv]) == code
    if code == 1:
        assert "usage:" in capsys.readouterr().err


def test_bad_config_field_is_usage_error(workspace, tmp_path):
    assert run("train", "--data", workspace / "data", "--out", tmp_path / "m.ckpt",
               "--config", '{"depth": 3}') == 1


def test_corrupt_checkpoint_exit_code(workspace, tmp_path):
    blob = bytearray((workspace / "m.ckpt").read_bytes())
    blob[40] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
    assert run("eval", "--model", tmp_path / "bad.ckpt", "--data", workspace / "data",
               "--report", tmp_path / "r.csv") == 2


def test_gradcheck_command(capsys):
    assert run("gradcheck") == 0
    out = capsys.readouterr().out.splitlines()
    assert all(line.startswith("PASS") for line in out[:-1]) and "passed" in out[-1]


def test_gradcheck_failure_exit_code(monkeypatch, capsys):
    monkeypatch.setattr(cli, "gradcheck_suite",
                        lambda tol, seed: iter([("fake", GradcheckReport(tol, {"x": 1.0}))]))
    assert run("gradcheck") == 3
    assert capsys.readouterr().out.startswith("FAIL fake")


def test_numeric_failure_exit_code(monkeypatch, workspace, tmp_path):
    def explode(*args, **kwargs):
        raise NumericError("loss is nan at epoch 1 step 1")
    monkeypatch.setattr(cli, "run_training", explode)
    assert run("train", "--data", workspace / "data", "--out", tmp_path / "m.ckpt",
               "--config", TINY) == 3


# ---- overlay --------------------------------------------------------------

def square(top, left, side=3, size=6):
    m = np.zeros((size, size), dtype=np.uint8)
    m[top:top + side, left:left + side] = 1
    return m


def test_overlay_matches_golden():
    rgb = cli.render_overlay(np.full((6, 6), 0.5), square(1, 1), square(1, 2))
    golden = D.read_ppm(GOLDEN / "overlay_6x6.ppm")
    np.testing.assert_array_equal(rgb, golden)


def test_overlay_trivial_cases():
    image = np.linspace(0, 1, 36).reshape(6, 6)
    gray = np.repeat(D.quantize(image)[..., None], 3, axis=2)
    empty = np.zeros((6, 6), dtype=np.uint8)
    np.testing.assert_array_equal(cli.render_overlay(image, empty, empty), gray)
    same = cli.render_overlay(image, square(1, 1), square(1, 1))
    boundary = cli.mask_boundary(square(1, 1))
    assert (same[boundary] == cli.BOTH_COLOR).all()
    np.testing.assert_array_equal(same[~boundary], gray[~boundary])


def test_mask_boundary_full_image():
    # the image edge counts as background, so a full mask outlines the frame
    b = cli.mask_boundary(np.ones((4, 4)))
    assert b.sum() == 12 and not b[1:3, 1:3].any()
