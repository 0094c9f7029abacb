import json
import subprocess
import sys

import numpy as np
import pytest

from panodiff import gradcheck
from panodiff.cli import main
from panodiff.formats import load_checkpoint, load_tensor, save_tensor

SMALL = {"height": 8, "width": 16, "c_e": 4, "num_classes": 4, "hint_widths": [4, 4, 4],
         "encoder_width": 4, "denoiser_hidden": 8, "batch_size": 2, "train_steps": 5}


def tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.fixture
def work(tmp_path):
    cfg = tmp_path / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["synth-data", "--config", str(cfg), "--count", "3", "--seed", "4",
                 "--out", str(tmp_path / "ds")]) == 0
    return tmp_path, cfg


def commands(tmp, cfg, out):
    ds = tmp / "ds"
    return [
        ["synth-data", "--config", str(cfg), "--count", "2", "--out", str(out / "synth")],
        ["rotate", str(ds / "pano_0000.sdtf"), "--yaw", "33", "--pitch", "5", "--out", str(out / "rot.sdtf")],
        ["nfov-mask", "--fov", "90", "--height", "8", "--yaw", "20", "--out", str(out / "mask.sdtf")],
        ["encode", str(ds / "seg_0000.sdtf"), str(ds / "labels.sdet"), "--visible", str(out / "mask.sdtf"),
         "--out", str(out / "emb.sdtf")],
        ["augment", str(ds), "--config", str(cfg), "--copies", "2", "--out", str(out / "aug")],
        ["train-toy", "--config", str(cfg), "--dataset", str(ds), "--out", str(out / "run")],
        ["generate", "--checkpoint", str(out / "run" / "checkpoint.npz"), "--segmap", str(ds / "seg_0001.sdtf"),
         "--n", "10", "--k-rot", "2", "--count", "2", "--out", str(out / "gen")],
        ["generate", "--k-rot", "4", "--n", "50", "--seed", "2", "--mode", "stochastic", "--ppm",
         "--out", str(out / "gen_analytic")],
        ["seam", str(out / "gen_analytic" / "image.sdtf"), "--out", str(out / "seam.csv")],
        ["gradcheck", "--instances", "1", "--out", str(out / "grad.json")],
    ]


def test_every_command_is_byte_reproducible(work, capsys):
    tmp, cfg = work
    outs = [tmp / "a", tmp / "b"]
    for out in outs:
        for argv in commands(tmp, cfg, out):
            assert main(argv) == 0, argv
    a, b = tree(outs[0]), tree(outs[1])
    assert set(a) == set(b) and len(a) > 20
    for name in a:
        assert a[name] == b[name], name


def test_rotate_zero_is_bit_identical(work):
    tmp, _ = work
    src = tmp / "ds" / "pano_0000.sdtf"
    assert main(["rotate", str(src), "--yaw", "0", "--out", str(tmp / "r.sdtf")]) == 0
    assert (tmp / "r.sdtf").read_bytes() == src.read_bytes()


def test_generate_step_log(tmp_path):
    assert main(["generate", "--k-rot", "4", "--n", "50", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "steps.csv").read_text().splitlines()
    assert lines[0] == "step,rotated,yaw_deg,cumulative_deg"
    rows = [l.split(",") for l in lines[1:]]
    assert [int(r[0]) for r in rows] == list(range(50, 0, -1))
    assert [int(r[0]) for r in rows if r[1] == "1"] == [40, 30, 20, 10]
    assert float(rows[-1][3]) == 360.0
    img = load_tensor(tmp_path / "image.sdtf")
    assert img.shape == (1, 32, 64) and np.all(np.isfinite(img))


def test_train_toy_outputs(work):
    tmp, cfg = work
    assert main(["train-toy", "--config", str(cfg), "--steps", "3", "--out", str(tmp / "run")]) == 0
    lines = (tmp / "run" / "losses.csv").read_text().splitlines()
    assert lines[0] == "step,L_c,L_siam,L_all" and len(lines) == 4
    for line in lines[1:]:
        _, l_c, l_s, l_all = map(float, line.split(","))
        assert l_all == l_c + 0.1 * l_s
    params, config_json, step = load_checkpoint(tmp / "run" / "checkpoint.npz")
    assert step == 3 and json.loads(config_json)["train_steps"] == 3


def test_truncated_file_exits_without_output(work, capsys):
    tmp, _ = work
    good = (tmp / "ds" / "pano_0000.sdtf").read_bytes()
    bad = tmp / "bad.sdtf"
    bad.write_bytes(good[:-3])
    for argv in (["rotate", str(bad), "--yaw", "10", "--out", str(tmp / "o1.sdtf")],
                 ["seam", str(bad), "--out", str(tmp / "o2.csv")],
                 ["encode", str(bad), str(tmp / "ds" / "labels.sdet"), "--out", str(tmp / "o3.sdtf")]):
        assert main(argv) == 3
        assert not (tmp / argv[-1]).exists()
    assert "malformed" in capsys.readouterr().err
    bad.write_bytes(b"JUNK" + good[4:])
    assert main(["rotate", str(bad), "--out", str(tmp / "o4.sdtf")]) == 3
    assert main(["rotate", str(tmp / "missing.sdtf"), "--out", str(tmp / "o5.sdtf")]) == 3
    assert not list(tmp.glob("o*"))


def test_exit_codes(tmp_path, capsys):
    assert main(["no-such-command"]) == 2
    assert main([]) == 2
    assert main(["rotate", "x.sdtf"]) == 3  # missing input is reported before --out
    cfg = tmp_path / "c.json"
    cfg.write_text('{"k_rot": 99}')
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 4
    cfg.write_text("{oops")
    assert main(["synth-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 4
    assert main(["generate", "--k-rot", "60", "--n", "50", "--out", str(tmp_path / "g")]) == 4
    assert main(["nfov-mask", "--fov", "200", "--out", str(tmp_path / "m.sdtf")]) == 1
    assert not (tmp_path / "g").exists() and not (tmp_path / "m.sdtf").exists()


def test_gradcheck_exit_code(monkeypatch, capsys):
    monkeypatch.setattr(gradcheck, "run_all", lambda n, seed: {"deformable": 1e-9})
    assert main(["gradcheck"]) == 0
    monkeypatch.setattr(gradcheck, "run_all", lambda n, seed: {"deformable": 1e-9, "simsiam": 2e-4})
    assert main(["gradcheck"]) == 5
    assert "FAIL" in capsys.readouterr().out


def test_seam_prints_metric(tmp_path, capsys):
    img = np.zeros((1, 2, 8), dtype=np.float32)
    img[..., :] = np.arange(8)
    save_tensor(tmp_path / "ramp.sdtf", img)
    assert main(["seam", str(tmp_path / "ramp.sdtf")]) == 0
    d_seam, d_int, ratio = map(float, capsys.readouterr().out.strip().split(","))
    assert (d_seam, d_int) == (7.0, 1.0) and ratio == 7.0 / (1.0 + 1e-12)


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "panodiff", "nfov-mask", "--fov", "60", "--height", "4",
                        "--out", str(tmp_path / "m.sdtf")], capture_output=True)
    assert r.returncode == 0, r.stderr
    m = load_tensor(tmp_path / "m.sdtf")
    assert m.shape == (4, 8) and set(np.unique(m)) <= {0.0, 1.0}
