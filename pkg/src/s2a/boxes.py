"""Box types, IoU, and the plain-text annotation/detection file formats."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple  # (x_min, y_min, x_max, y_max) in pixels
    image_id: str = ""

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate detection box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center ({self.cx}, {self.cy}) outside [0, 1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size ({self.w}, {self.h}) outside (0, 1]")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")

    def corners(self, width, height):
        """Pixel corners (x_min, y_min, x_max, y_max) for an image of the given size."""
        return (
            (self.cx - self.w / 2) * width,
            (self.cy - self.h / 2) * height,
            (self.cx + self.w / 2) * width,
            (self.cy + self.h / 2) * height,
        )


def iou(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    area_a = max(0.0, ax1 - ax0) * max(0.0, ay1 - ay0)
    area_b = max(0.0, bx1 - bx0) * max(0.0, by1 - by0)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def iou_matrix(a, b):
    """Pairwise IoU of (n, 4) and (m, 4) corner arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    valid = (area_a[:, None] > 0) & (area_b[None, :] > 0) & (inter > 0)
    return np.where(valid, inter / np.where(union > 0, union, 1.0), 0.0)


# ------------------------------------------------------------------ file formats


class AnnotationError(ValueError):
    pass


def parse_annotation_lines(lines, source="<string>"):
    """Parse ``class cx cy w h`` lines. Returns (boxes, errors) where errors
    are ``"file:line: message"`` strings."""
    boxes, errors = [], []
    for no, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        try:
            if len(parts) != 5:
                raise ValueError(f"expected 5 fields, got {len(parts)}")
            cls = int(parts[0])
            boxes.append(GroundTruthBox(cls, *(float(p) for p in parts[1:])))
        except ValueError as exc:
            errors.append(f"{source}:{no}: {exc}")
    return boxes, errors


def read_annotations(path):
    boxes, errors = parse_annotation_lines(Path(path).read_text().splitlines(), str(path))
    if errors:
        raise AnnotationError("; ".join(errors))
    return boxes


def write_annotations(boxes, path):
    lines = [f"{b.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}" for b in boxes]
    Path(path).write_text("".join(line + "\n" for line in lines))


def write_detections(dets, path):
    lines = [f"{d.class_id} {d.score:.6f} {d.box[0]:.3f} {d.box[1]:.3f} {d.box[2]:.3f} {d.box[3]:.3f}" for d in dets]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_detections(path, image_id=""):
    out = []
    for no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise AnnotationError(f"{path}:{no}: expected 6 fields, got {len(parts)}")
        box = tuple(float(p) for p in parts[2:])
        out.append(Detection(int(parts[0]), float(parts[1]), box, image_id))
    return out
