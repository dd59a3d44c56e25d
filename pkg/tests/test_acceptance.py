"""Acceptance criteria 1-9. Each test prints (and records) one PASS/FAIL line."""

import inspect
import itertools
import os
import statistics
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import ap_bruteforce, exhaustive_band_selection, iou_exact, iou_float, jacobi_eigh, nms_quadratic
from s2a import cli, gradsuite
from s2a import detector as D
from s2a import ssa as S
from s2a.boxes import Detection, iou
from s2a.cube_io import HyperCube, default_wavelengths
from s2a.evaluation import average_precision, validate_dataset
from s2a.hid import covariance, fit_pca, select_bands
from s2a.tensor import Tensor
from test_ssa import zero_split_equals_plain


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def _cube(data):
    data = np.asarray(data, dtype=np.float32)
    return HyperCube(data, default_wavelengths(data.shape[0]))


def test_1_band_selection_optimality():
    t = time.perf_counter()
    rng = np.random.default_rng(2024)
    bad = []
    for c in range(50):
        cube = _cube(rng.normal(size=(16, 8, 8)) * rng.uniform(0.5, 2.0, size=(16, 1, 1)))
        sel = select_bands(cube, 3)
        obj, bounds, reps = exhaustive_band_selection(cube.data, 3)
        if not (sel.objective_value == obj and sel.segment_boundaries == bounds):
            bad.append(c)
    dt = time.perf_counter() - t
    verdict(1, not bad and dt < 30, f"DP == exhaustive on {50 - len(bad)}/50 cubes (B=16, k=3), {dt:.1f} s")


def test_2_pca_correctness():
    t = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_res, worst_rel = 0.0, 0.0
    for _ in range(20):
        mix = rng.normal(size=(16, 16))
        cube = _cube((mix @ rng.normal(size=(16, 24 * 24))).reshape(16, 24, 24))
        _, C = covariance(cube)
        model = fit_pca(cube, 16)
        ref = jacobi_eigh(C)[0][::-1]
        nC = np.linalg.norm(C)
        for lam, v in zip(model.explained_variance, model.components):
            worst_res = max(worst_res, np.linalg.norm(C @ v - lam * v) / nC)
        worst_rel = max(worst_rel, float(np.max(np.abs(model.explained_variance - ref) / np.abs(ref))))
    dt = time.perf_counter() - t
    ok = worst_res <= 1e-6 and worst_rel <= 1e-8 and dt < 10
    verdict(2, ok, f"max ||Cv-lv||/||C|| = {worst_res:.1e}, max eigenvalue rel. error vs Jacobi = {worst_rel:.1e}, {dt:.1f} s")


def test_3_gradient_suite():
    t = time.perf_counter()
    results = gradsuite.run_suite(gradsuite.OP_MODULES, seeds=range(20), eps=1e-5, tol=1e-4)
    dt = time.perf_counter() - t
    names = {r.name for r in results}
    worst = max(r.max_rel_error for r in results)
    ok = all(r.passed for r in results) and "ssa_block_n16_d4_r2" in names and dt < 120
    verdict(3, ok, f"{len(results)} checks over {len(names)} ops x 20 seeds, max rel. error {worst:.1e}, {dt:.0f} s")


def test_4_ssa_invariants():
    rng = np.random.default_rng(11)
    shapes_ok = 0
    for _ in range(50):
        r = int(rng.integers(1, 3))
        d, N = int(rng.integers(1, 7)), int(rng.integers(1, 3))
        cfg = S.SsaConfig(d=d, h=r * int(rng.integers(1, 4)), w=r * int(rng.integers(1, 4)), r=r,
                          d_k=int(rng.integers(1, 6)))
        pair = S.StreamPair(Tensor(rng.normal(size=(N, cfg.n, d))), Tensor(rng.normal(size=(N, cfg.n, d))))
        out = S.ssa_forward(pair, cfg, S.init_params(cfg, rng))
        shapes_ok += out.a.shape == out.e.shape == (N, cfg.n, d)
    zero_ok = all(zero_split_equals_plain(s) for s in range(3))
    swap_ok = True
    for s in range(5):
        cfg = S.SsaConfig(d=4, h=4, w=4, r=2)
        params = S.init_params(cfg, np.random.default_rng(s))
        pair = S.StreamPair(Tensor(rng.normal(size=(2, 16, 4))), Tensor(rng.normal(size=(2, 16, 4))))
        out = S.ssa_forward(pair, cfg, params)
        sw = S.ssa_forward(S.StreamPair(pair.e, pair.a), cfg, S.swap_streams(params))
        swap_ok &= sw.a.data.tobytes() == out.e.data.tobytes() and sw.e.data.tobytes() == out.a.data.tobytes()
    verdict(4, shapes_ok == 50 and zero_ok and swap_ok,
            f"shape kept {shapes_ok}/50, zero-split == plain two-stream bitwise: {zero_ok}, swap exact: {swap_ok}")


def test_5_metric_oracles():
    rng = np.random.default_rng(5)
    mism = 0
    for _ in range(120):
        n = int(rng.integers(1, 11))
        boxes = []
        for _ in range(n):
            x0, y0 = rng.integers(0, 12, size=2)
            w, h = rng.integers(1, 8, size=2)
            boxes.append((int(x0), int(y0), int(x0 + w), int(y0 + h)))
        for a, b in itertools.combinations(boxes, 2):
            mism += iou(a, b) != float(iou_exact(a, b))
        dets = [Detection(int(rng.integers(2)), float(rng.integers(1, 9)) / 8, tuple(map(float, b)),
                          str(rng.integers(2))) for b in boxes]
        gts = {str(k): [tuple(map(float, b)) for b in boxes if rng.random() < 0.5] for k in range(2)}
        for thr in (0.5, 0.75):
            mism += average_precision(dets, gts, thr) != ap_bruteforce(dets, gts, thr)
        mism += sorted(D.nms_indices(dets, 0.6)) != sorted(nms_quadratic(dets, 0.6))
    hand = iou((0, 0, 2, 2), (1, 0, 3, 2)) == 1 / 3 and iou_exact((0, 0, 2, 2), (1, 0, 3, 2)) == Fraction(1, 3)
    default = inspect.signature(D.nms).parameters["iou_threshold"].default
    verdict(5, mism == 0 and hand and default == 0.6,
            f"{mism} mismatches over 120 micro-instances, IoU hand case = 1/3: {hand}, NMS default {default}")


def test_6_scaled_ablation():
    from s2a.experiment import run_ablation

    t = time.perf_counter()
    res = run_ablation(seeds=(0, 1, 2))
    dt = time.perf_counter() - t
    med = {k: statistics.median(v) for k, v in res.items()}
    ok = med["sa_se_ssa"] >= med["sa_sa"] + 0.15 and med["sa_se_ssa"] >= 0.85 and dt < 900
    detail = ", ".join(f"{k} {med[k]:.3f} {[round(x, 3) for x in res[k]]}" for k in res)
    verdict(6, ok, f"median mAP50: {detail}; {dt:.0f} s")


def test_7_schedule_and_additivity():
    lr_ok = (abs(D.poly_lr(0, 50) - 0.01) <= 1e-12 and abs(D.poly_lr(50, 50)) <= 1e-12
             and abs(D.poly_lr(25, 50) - 0.01 * 0.5**0.9) <= 1e-12)
    from s2a.experiment import TrainParams, build_scene_set, fit
    from s2a.synthetic import SyntheticSceneSpec, generate_corpus

    train = build_scene_set(generate_corpus(SyntheticSceneSpec(seed=9), 16))
    model = D.Detector.create(D.BackboneConfig((4, 4, 8, 8, 8)), D.default_anchors(), 2, (64, 64), seed=0)
    gaps, lrs = [], []
    fit(model, train, "se", TrainParams(steps=24), seed=0,
        log=lambda opt, p: (gaps.append(abs(p.total - (p.cls + p.box))), lrs.append(opt.lr)))
    add_ok = len(gaps) == 24 and max(gaps) <= 1e-9
    verdict(7, lr_ok and add_ok and lrs[0] == 0.01,
            f"lr(0)={D.poly_lr(0, 50)}, lr(max)={D.poly_lr(50, 50)}, lr(max/2)={D.poly_lr(25, 50):.15g}; "
            f"max |total-(cls+box)| over {len(gaps)} steps = {max(gaps):.1e}")


CFG = """\
synth.count = 20
synth.height = 32
synth.width = 32
stage_channels = 2 4 4 8 8
anchors = 8x8@3, 16x16@4, 32x32@5
max_epoch = 2
batch = 4
seed = 11
split = 7:1:2
"""


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_8_pipeline_determinism(tmp_path):
    trees = []
    for run in ("a", "b"):
        out = tmp_path / run
        cfg = tmp_path / f"{run}.txt"
        cfg.write_text(CFG + f"output_dir = {out}\n")
        for cmd in ("generate", "decouple", "split", "train", "detect", "eval"):
            assert cli.main([cmd, "--config", str(cfg), "-q"]) == 0, cmd
        trees.append(_tree(out))
    a, b = trees
    groups = {g: [k for k in a if k.startswith(g)] for g in ("splits", "checkpoints", "detections", "eval")}
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    ok = same and all(groups.values())
    verdict(8, ok, f"{len(a)} files byte-identical across two runs: {same} "
                   f"({', '.join(f'{g} {len(v)}' for g, v in groups.items())})")


def test_9_hod3k_counts():
    root = os.environ.get("S2A_HOD3K_ANNOTATIONS")
    if not root or not Path(root).is_dir():
        line = "criterion 9: SKIP - set S2A_HOD3K_ANNOTATIONS to a HOD3K annotation directory"
        print(line)
        ACCEPTANCE_LINES.append(line)
        pytest.skip("HOD3K annotations not available")
    stats = validate_dataset(root)
    counts = stats.named_counts()
    ok = counts == {"people": 12144, "car": 817, "bike": 2188} and stats.total == 15149
    verdict(9, ok, f"counts {counts}, total {stats.total}")
