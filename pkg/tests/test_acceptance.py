"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion.

Lines are printed live and repeated in the terminal summary.
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from panodiff.config import ExperimentConfig
from panodiff.deform import HintBlock
from panodiff.geometry import rotate_image, rotation_matrix, yaw_shift
from panodiff.geometry import ErpGrid
from panodiff.gradcheck import TOLERANCE, run_all
from panodiff.sampling import (
    AnalyticGaussianDenoiser, SamplerConfig, SgaSchedule, default_schedule, rotation_angle,
    seam_metric, select_rotation_steps, sga_sample,
)
from panodiff.semantic import LabelEmbeddingTable, encode_segmentation, masks_from_seg, pixel_embedding
from panodiff.synth import synth_corpus, synth_segmap
from panodiff.training import ControlEncoder, simsiam_loss, total_loss, train_toy


def report(n, name, ok, detail, seconds):
    line = f"{'PASS' if ok else 'FAIL'}  [{n}] {name}: {detail} ({seconds:.3g} s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_1_schedule_arithmetic():
    t = time.perf_counter()
    steps = select_rotation_steps(50, 4)
    angle = rotation_angle(4)
    dt = time.perf_counter() - t
    report(1, "schedule arithmetic", steps == [10, 20, 30, 40] and angle == 90.0 and dt < 1e-3,
           f"S={steps}, angle={angle}", dt)


def test_2_geometry_exactness():
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    shifts_exact = True
    for w in (16, 64):
        x = rng.normal(size=(2, w // 2, w))
        for k in range(w):
            shifts_exact &= np.array_equal(rotate_image(x, (k * 360 / w, 0, 0)), yaw_shift(x, k))
    orth = det = 0.0
    for a in rng.uniform(-360, 360, (1000, 3)):
        r = rotation_matrix(a)
        orth = max(orth, np.max(np.abs(r @ r.T - np.eye(3))))
        det = max(det, abs(np.linalg.det(r) - 1))
    dt = time.perf_counter() - t
    ok = shifts_exact and orth < 1e-12 and det < 1e-12 and dt < 5
    report(2, "geometry exactness", ok,
           f"shifts bit-exact={shifts_exact}, max|RR^T-I|={orth:.1e}, max|det-1|={det:.1e}", dt)


def test_3_semantic_encoding():
    t = time.perf_counter()
    rng = np.random.default_rng(1)
    exact = unity = True
    for _ in range(100):
        k = int(rng.integers(2, 12))
        tab = rng.normal(size=(int(rng.integers(1, 20)), k))
        ids = rng.integers(0, k, (int(rng.integers(1, 17)), int(rng.integers(1, 33))))
        m = masks_from_seg(ids, k)
        unity &= np.array_equal(m.sum(axis=0), np.ones(ids.shape))
        exact &= np.array_equal(pixel_embedding(m, tab), tab[:, ids])
    dt = time.perf_counter() - t
    report(3, "semantic encoding", exact and unity and dt < 5,
           f"lookup exact={exact}, partition of unity={unity}", dt)


def test_4_gradient_suites():
    t = time.perf_counter()
    errs = run_all(10)
    dt = time.perf_counter() - t
    ok = all(v < TOLERANCE for v in errs.values()) and dt < 60
    report(4, "gradient suites", ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()), dt)


def test_5_zero_init_control():
    t = time.perf_counter()
    rng = np.random.default_rng(2)
    zero = True
    for c_e, c_z in ((16, 1), (8, 4), (3, 2)):
        block = HintBlock.init(c_e, c_z, rng=rng)
        for scale in (1e-3, 1.0, 1e3):
            zero &= bool(np.all(block(rng.normal(size=(c_e, 8, 16)) * scale) == 0.0))
    dt = time.perf_counter() - t
    report(5, "zero-init control", zero, f"all outputs exactly 0 = {zero}", dt)


def test_6_sga_equivariance():
    t = time.perf_counter()
    schedule = default_schedule(50)
    den = AnalyticGaussianDenoiser(0.1, 0.7)
    diffs = []
    for seed in range(3):
        cfg = SamplerConfig("deterministic", seed)
        base = sga_sample(den, schedule, SgaSchedule.build(50, 0, 64), cfg, (1, 32, 64))
        sga = sga_sample(den, schedule, SgaSchedule.build(50, 4, 64, snap=True), cfg, (1, 32, 64))
        diffs.append(float(np.max(np.abs(sga - base))))
    dt = time.perf_counter() - t
    report(6, "SGA equivariance oracle", max(diffs) <= 1e-9 and dt < 10,
           f"max |SGA - baseline| = {max(diffs):.1e}", dt)


def test_7_seam_connectivity():
    t = time.perf_counter()
    cfg = ExperimentConfig(hint_widths=(8, 8, 8), c_e=8, batch_size=2, lr=0.01, momentum=0.9,
                           train_steps=1500)
    grid = ErpGrid(cfg.height, cfg.width)
    panos, segs = synth_corpus(grid, 256, cfg.c_z, cfg.num_classes, seed=1)
    table = LabelEmbeddingTable.from_labels([f"class{i}" for i in range(cfg.num_classes - 1)], cfg.c_e)
    state, _ = train_toy(cfg, panos, segs, table)
    model = state.model
    schedule = default_schedule(cfg.n_steps, cfg.train_timesteps)
    guidance = model.control_latent(encode_segmentation(synth_segmap(grid, cfg.num_classes, seed=5), table))
    medians = {}
    for k in (0, 4):
        sga = SgaSchedule.build(cfg.n_steps, k, cfg.width)
        ratios = [seam_metric(sga_sample(model, schedule, sga, SamplerConfig("deterministic", s),
                                         (cfg.c_z, cfg.height, cfg.width), guidance))[2]
                  for s in range(20)]
        medians[k] = float(np.median(ratios))
    dt = time.perf_counter() - t
    report(7, "seam connectivity", medians[4] < medians[0] and dt < 900,
           f"median seam ratio without SGA {medians[0]:.3f}, with SGA {medians[4]:.3f}", dt)


def test_8_loss_composition():
    t = time.perf_counter()
    rng = np.random.default_rng(3)
    comp = max(abs(total_loss(a, b, 0.1) - (a + 0.1 * b)) for a, b in rng.normal(size=(1000, 2)))
    enc = ControlEncoder.init(2, width=3, rng=rng)
    vals = [simsiam_loss(enc, rng.normal(size=(2, 4, 8)), (360, 3, 3), s)[0] for s in range(1000)]
    in_range = min(vals) >= -1 and max(vals) <= 1
    enc.head = None
    same = simsiam_loss(enc, rng.normal(size=(2, 4, 8)), (0, 0, 0), 0)[0]
    dt = time.perf_counter() - t
    report(8, "loss composition and SimSiam range", comp == 0.0 and in_range and same == -1.0,
           f"max |L_all - (L_c + 0.1 L_siam)| = {comp}, L_siam in [{min(vals):.3f}, {max(vals):.3f}], "
           f"identical branches {same}", dt)


SMALL = {"height": 8, "width": 16, "c_e": 4, "num_classes": 4, "hint_widths": [4, 4, 4],
         "encoder_width": 4, "denoiser_hidden": 8, "batch_size": 2, "train_steps": 10}


def _cli_run(root, cfg):
    root.mkdir()
    argvs = [
        ["synth-data", "--config", cfg, "--count", "3", "--out", "ds"],
        ["rotate", "ds/pano_0000.sdtf", "--yaw", "40", "--roll", "7", "--out", "rot.sdtf"],
        ["nfov-mask", "--fov", "75", "--height", "8", "--pitch", "10", "--out", "mask.sdtf"],
        ["encode", "ds/seg_0000.sdtf", "ds/labels.sdet", "--visible", "mask.sdtf", "--out", "emb.sdtf"],
        ["augment", "ds", "--config", cfg, "--copies", "2", "--out", "aug"],
        ["train-toy", "--config", cfg, "--dataset", "ds", "--out", "run"],
        ["generate", "--checkpoint", "run/checkpoint.npz", "--segmap", "ds/seg_0002.sdtf", "--n", "20",
         "--out", "gen"],
        ["generate", "--k-rot", "4", "--n", "50", "--mode", "stochastic", "--seed", "3", "--ppm", "--out", "gen2"],
        ["seam", "gen2/image.sdtf", "--out", "seam.csv"],
        ["gradcheck", "--instances", "1", "--out", "grad.json"],
    ]
    for argv in argvs:
        r = subprocess.run([sys.executable, "-m", "panodiff", *argv], cwd=root, capture_output=True)
        if r.returncode != 0:
            raise AssertionError(f"{argv[0]} exited {r.returncode}: {r.stderr.decode()}")
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_9_cli_reproducibility(tmp_path):
    t = time.perf_counter()
    cfg = tmp_path / "small.json"
    cfg.write_text(json.dumps(SMALL))
    a = _cli_run(tmp_path / "a", str(cfg))
    b = _cli_run(tmp_path / "b", str(cfg))
    differing = sorted(k for k in a if a[k] != b.get(k)) + sorted(set(b) - set(a))
    dt = time.perf_counter() - t
    report(9, "CLI reproducibility", not differing,
           f"{len(a)} artifacts from 9 subcommands, byte-identical across two processes"
           if not differing else f"differing: {differing}", dt)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
