from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import ap_bruteforce, iou_exact, iou_float, iou_raster
from s2a.boxes import Detection, GroundTruthBox, iou, iou_matrix
from s2a.evaluation import (
    IOU_THRESHOLDS,
    average_precision,
    confusion_matrix,
    evaluate,
    validate_dataset,
    write_metrics,
)

int_box = st.tuples(st.integers(0, 8), st.integers(0, 8), st.integers(1, 6), st.integers(1, 6)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3])
)


def test_iou_example():
    assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == 1 / 3
    assert iou_exact((0, 0, 2, 2), (1, 0, 3, 2)) == Fraction(1, 3)


@given(int_box, int_box)
def test_iou_matches_exact_and_raster(a, b):
    exact = iou_exact(a, b)
    assert exact == iou_raster(a, b)
    # integer corners: one correctly rounded division, so equality is exact
    assert iou(a, b) == float(exact)
    assert iou(a, b) == iou_float(a, b)
    assert iou(a, b) == iou(b, a)


@given(st.lists(int_box, min_size=1, max_size=5), st.lists(int_box, min_size=1, max_size=5))
def test_iou_matrix_matches_scalar(a, b):
    M = iou_matrix(a, b)
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            assert M[i, j] == iou(x, y)


def test_iou_disjoint_and_touching():
    assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0
    assert iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0


# -------------------------------------------------------------------------- AP


def test_ap_perfect():
    gts = {"a": [(0, 0, 4, 4)], "b": [(2, 2, 6, 6)]}
    dets = [Detection(0, 0.9, (0, 0, 4, 4), "a"), Detection(0, 0.8, (2, 2, 6, 6), "b")]
    assert average_precision(dets, gts) == 1.0


def test_ap_half():
    # two GTs, one found at rank 1 and a false positive at rank 2: AP = 0.5
    gts = {"a": [(0, 0, 4, 4), (10, 10, 14, 14)]}
    dets = [Detection(0, 0.9, (0, 0, 4, 4), "a"), Detection(0, 0.8, (20, 20, 24, 24), "a")]
    assert average_precision(dets, gts) == 0.5


def test_ap_false_positive_first():
    gts = {"a": [(0, 0, 4, 4)]}
    dets = [Detection(0, 0.9, (20, 20, 24, 24), "a"), Detection(0, 0.8, (0, 0, 4, 4), "a")]
    assert average_precision(dets, gts) == 0.5


def test_ap_no_detections_or_gts():
    assert average_precision([], {"a": [(0, 0, 1, 1)]}) == 0.0
    assert average_precision([Detection(0, 0.5, (0, 0, 1, 1), "a")], {}) == 0.0


@st.composite
def micro_instance(draw):
    imgs = ["i0", "i1", "i2"]
    gts = {im: draw(st.lists(int_box, max_size=3)) for im in imgs}
    dets = [
        Detection(0, draw(st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9])), box, draw(st.sampled_from(imgs)))
        for box in draw(st.lists(int_box, max_size=10))
    ]
    return dets, gts


@given(micro_instance(), st.sampled_from([0.3, 0.5, 0.75]))
def test_ap_matches_bruteforce(inst, thr):
    dets, gts = inst
    assert average_precision(dets, gts, thr) == ap_bruteforce(dets, gts, thr)


@given(micro_instance())
def test_ap_in_unit_interval(inst):
    dets, gts = inst
    assert 0.0 <= average_precision(dets, gts) <= 1.0


# ---------------------------------------------------------------- full metrics


def _gt(cls, x0, y0, x1, y1, W=32, H=32):
    return GroundTruthBox(cls, (x0 + x1) / 2 / W, (y0 + y1) / 2 / H, (x1 - x0) / W, (y1 - y0) / H)


def test_evaluate_perfect():
    gts = {"a": [_gt(0, 0, 0, 8, 8), _gt(1, 16, 16, 24, 28)]}
    dets = [Detection(0, 0.9, (0, 0, 8, 8), "a"), Detection(1, 0.8, (16, 16, 24, 28), "a")]
    res = evaluate(dets, gts, 2, (32, 32))
    assert res.map50 == 1.0 and res.map5095 == 1.0
    assert res.confusion.tolist() == [[1, 0, 0], [0, 1, 0], [0, 0, 0]]


def test_evaluate_wrong_class():
    gts = {"a": [_gt(0, 0, 0, 8, 8)]}
    dets = [Detection(1, 0.9, (0, 0, 8, 8), "a")]
    res = evaluate(dets, gts, 2, (32, 32))
    assert res.per_class_ap50 == {0: 0.0, 1: 0.0}
    assert res.confusion.tolist() == [[0, 1, 0], [0, 0, 0], [0, 0, 0]]


def test_evaluate_skips_absent_class():
    gts = {"a": [_gt(0, 0, 0, 8, 8)]}
    res = evaluate([Detection(0, 0.9, (0, 0, 8, 8), "a")], gts, 3, (32, 32))
    assert set(res.per_class_ap50) == {0} and res.map50 == 1.0


def test_map5095_averages_thresholds():
    gts = {"a": [_gt(0, 0, 0, 10, 10)]}
    det = Detection(0, 0.9, (0, 0, 10, 8), "a")  # IoU 0.8
    res = evaluate([det], gts, 1, (32, 32))
    assert res.map50 == 1.0
    assert res.map5095 == pytest.approx(sum(t <= 0.8 for t in IOU_THRESHOLDS) / 10)


@given(micro_instance())
def test_confusion_row_sums(inst):
    dets, boxes = inst
    gts = {im: [_gt(k % 2, *b) for k, b in enumerate(bs)] for im, bs in boxes.items()}
    dets = [Detection(k % 2, d.score, d.box, d.image_id) for k, d in enumerate(dets)]
    M = confusion_matrix(dets, gts, (32, 32), 2, conf_threshold=0.25)
    for c in range(2):
        assert M[c].sum() == sum(g.class_id == c for gs in gts.values() for g in gs)
    assert M[:, :2].sum() == sum(d.score >= 0.25 for d in dets)
    assert M[2, 2] == 0


def test_confusion_ignores_low_confidence():
    gts = {"a": [_gt(0, 0, 0, 8, 8)]}
    M = confusion_matrix([Detection(0, 0.1, (0, 0, 8, 8), "a")], gts, (32, 32), 1)
    assert M.tolist() == [[0, 1], [0, 0]]


def test_write_metrics(tmp_path):
    gts = {"a": [_gt(0, 0, 0, 8, 8)]}
    res = evaluate([Detection(0, 0.9, (0, 0, 8, 8), "a")], gts, 2, (32, 32))
    write_metrics(res, tmp_path)
    assert "map50 = 1.000000" in (tmp_path / "metrics.txt").read_text()
    csv = (tmp_path / "confusion.csv").read_text().splitlines()
    assert csv[0] == "gt\\pred,0,1,background" and csv[1] == "0,1,0,0"


# ------------------------------------------------------------- dataset checks


def test_validate_dataset(tmp_path):
    (tmp_path / "a.txt").write_text("0 0.5 0.5 0.1 0.1\n1 0.2 0.2 0.1 0.1\n")
    (tmp_path / "b.txt").write_text("2 0.5 0.5 0.1 0.1\n0 0.5 0.5 2.0 0.1\nbad line\n")
    (tmp_path / "c.txt").write_text("")
    splits = tmp_path / "splits"
    splits.mkdir()
    (splits / "train.txt").write_text("a\nb\n")
    stats = validate_dataset(tmp_path, splits)
    assert stats.class_counts == {0: 1, 1: 1, 2: 1}
    assert stats.total == 3 and stats.images == 3 and stats.mean_per_image == 1.0
    assert stats.named_counts() == {"people": 1, "car": 1, "bike": 1}
    assert stats.split_sizes == {"train": 2}
    assert len(stats.errors) == 2 and stats.errors[0].startswith(str(tmp_path / "b.txt") + ":2:")


def test_validate_missing_directory(tmp_path):
    stats = validate_dataset(tmp_path / "none")
    assert stats.total == 0 and stats.images == 0
