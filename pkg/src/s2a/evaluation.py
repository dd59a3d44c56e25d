"""Detection metrics: per-class AP, mAP50, mAP@[.50:.95], confusion matrix,
and annotation-corpus statistics."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import iou, parse_annotation_lines

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
HOD3K_CLASSES = ("people", "car", "bike")


@dataclass
class EvalResult:
    per_class_ap50: dict
    map50: float
    map5095: float
    confusion: np.ndarray
    per_class_ap5095: dict = field(default_factory=dict)
    classes: tuple = ()


def _gt_corners(gts_by_image, image_size):
    W, H = image_size[1], image_size[0]
    return {img: [(g.class_id, g.corners(W, H)) for g in gts] for img, gts in gts_by_image.items()}


def _sort_key(d):
    return (-d.score, d.image_id, d.box[0])


def match_detections(dets, gts_by_image, iou_thresh):
    """Greedy score-ordered matching of one class's detections.

    ``gts_by_image`` maps image id -> list of pixel boxes for that class.
    Returns (tp flags in sorted order, number of GTs).
    """
    order = sorted(dets, key=_sort_key)
    used = {img: [False] * len(boxes) for img, boxes in gts_by_image.items()}
    tp = np.zeros(len(order), dtype=bool)
    for k, d in enumerate(order):
        boxes = gts_by_image.get(d.image_id, [])
        best, best_j = -1.0, -1
        for j, g in enumerate(boxes):
            if used[d.image_id][j]:
                continue
            o = iou(d.box, g)
            if o >= iou_thresh and o > best:
                best, best_j = o, j
        if best_j >= 0:
            used[d.image_id][best_j] = True
            tp[k] = True
    return tp, sum(len(b) for b in gts_by_image.values())


def ap_from_tp(tp, n_gt):
    """All-points interpolated AP from TP flags in descending-score order."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    r = np.concatenate([[0.0], recall, [recall[-1]]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.nonzero(r[1:] != r[:-1])[0]
    # fsum: exactly rounded, independent of summation order
    return math.fsum((r[steps + 1] - r[steps]) * p[steps + 1])


def average_precision(dets, gts_by_image, iou_thresh=0.5):
    """AP of one class; ``gts_by_image`` maps image id -> list of pixel boxes."""
    tp, n_gt = match_detections(dets, gts_by_image, iou_thresh)
    return ap_from_tp(tp, n_gt)


def confusion_matrix(dets, gts_by_image, image_size, num_classes, iou_thresh=0.5, conf_threshold=0.25):
    """(C+1) x (C+1) counts: row = GT class (last row: background, i.e. false
    positives), column = predicted class (last column: missed GTs)."""
    C = num_classes
    M = np.zeros((C + 1, C + 1), dtype=np.int64)
    gts = _gt_corners(gts_by_image, image_size)
    by_img = {}
    for d in dets:
        if d.score >= conf_threshold:
            by_img.setdefault(d.image_id, []).append(d)
    for img in sorted(set(gts) | set(by_img)):
        g = gts.get(img, [])
        used = [False] * len(g)
        for d in sorted(by_img.get(img, []), key=_sort_key):
            best, best_j = -1.0, -1
            for j, (_, box) in enumerate(g):
                if used[j]:
                    continue
                o = iou(d.box, box)
                if o >= iou_thresh and o > best:
                    best, best_j = o, j
            if best_j >= 0:
                used[best_j] = True
                M[g[best_j][0], d.class_id] += 1
            else:
                M[C, d.class_id] += 1
        for j, (cls, _) in enumerate(g):
            if not used[j]:
                M[cls, C] += 1
    return M


def evaluate(dets, gts_by_image, num_classes, image_size, conf_threshold=0.25):
    """Full metric set. ``gts_by_image``: image id -> list of GroundTruthBox."""
    gts = _gt_corners(gts_by_image, image_size)
    ap = {t: {} for t in IOU_THRESHOLDS}
    counted = []
    for c in range(num_classes):
        cdets = [d for d in dets if d.class_id == c]
        cgts = {img: [b for cls, b in boxes if cls == c] for img, boxes in gts.items()}
        n_gt = sum(len(b) for b in cgts.values())
        if n_gt == 0 and not cdets:
            continue
        counted.append(c)
        for t in IOU_THRESHOLDS:
            ap[t][c] = average_precision(cdets, cgts, t)
    per50 = {c: ap[0.5][c] for c in counted}
    per5095 = {c: float(np.mean([ap[t][c] for t in IOU_THRESHOLDS])) for c in counted}
    map50 = float(np.mean(list(per50.values()))) if counted else 0.0
    map5095 = float(np.mean([np.mean([ap[t][c] for c in counted]) for t in IOU_THRESHOLDS])) if counted else 0.0
    conf = confusion_matrix(dets, gts_by_image, image_size, num_classes, conf_threshold=conf_threshold)
    return EvalResult(per50, map50, map5095, conf, per5095, tuple(range(num_classes)))


def format_table(result, class_names=None):
    names = class_names or {c: str(c) for c in result.classes}
    lines = [f"{'class':<12}{'AP50':>8}{'AP50:95':>10}"]
    for c in sorted(result.per_class_ap50):
        lines.append(f"{names.get(c, str(c)):<12}{result.per_class_ap50[c]:>8.4f}{result.per_class_ap5095[c]:>10.4f}")
    lines.append(f"{'all':<12}{result.map50:>8.4f}{result.map5095:>10.4f}")
    return "\n".join(lines) + "\n"


def write_metrics(result, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"map50 = {result.map50:.6f}", f"map5095 = {result.map5095:.6f}"]
    for c in sorted(result.per_class_ap50):
        lines.append(f"ap50.class{c} = {result.per_class_ap50[c]:.6f}")
        lines.append(f"ap5095.class{c} = {result.per_class_ap5095[c]:.6f}")
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")
    C = result.confusion.shape[0] - 1
    header = "gt\\pred," + ",".join([str(c) for c in range(C)] + ["background"])
    rows = [header]
    for r in range(C + 1):
        label = str(r) if r < C else "background"
        rows.append(label + "," + ",".join(str(int(v)) for v in result.confusion[r]))
    (out / "confusion.csv").write_text("\n".join(rows) + "\n")
    (out / "table.txt").write_text(format_table(result))


# --------------------------------------------------------------- dataset stats


@dataclass
class DatasetStats:
    class_counts: dict
    total: int
    images: int
    mean_per_image: float
    split_sizes: dict
    errors: list

    def named_counts(self, names=HOD3K_CLASSES):
        return {names[c] if c < len(names) else str(c): n for c, n in sorted(self.class_counts.items())}


def validate_dataset(annotation_dir, split_dir=None):
    """Count boxes per class over every ``*.txt`` annotation file in a directory."""
    root = Path(annotation_dir)
    counts, errors = Counter(), []
    files = sorted(root.glob("*.txt")) if root.exists() else []
    for f in files:
        boxes, errs = parse_annotation_lines(f.read_text().splitlines(), str(f))
        errors.extend(errs)
        counts.update(b.class_id for b in boxes)
    total = sum(counts.values())
    splits = {}
    if split_dir is not None:
        for name in ("train", "val", "test"):
            p = Path(split_dir) / f"{name}.txt"
            if p.exists():
                splits[name] = len([x for x in p.read_text().split() if x])
    return DatasetStats(dict(sorted(counts.items())), total, len(files), total / len(files) if files else 0.0, splits, errors)
