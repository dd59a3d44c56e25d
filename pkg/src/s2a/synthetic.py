"""Synthetic hyperspectral scenes where location and class live in different places.

Objects are brighter than the background by roughly the same amount in every
band, so any three bands show where they are. The class is carried only by
a weak zero-sum signature over the "class bands"; the "location bands" carry
none of it; they have a higher gain and independent per-band noise, which
makes them expensive to reconstruct from any other plane. Band selection
therefore lands on them, so the spatial-aggregated image has no class
information, while the signature is a coherent direction across
many bands and shows up as a principal component in the spectral-aggregated
image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import GroundTruthBox
from .cube_io import HyperCube, default_wavelengths


def _class_patterns(num_classes, class_bands):
    """Rows of +-1 patterns over the class bands, zero-sum, with one dominant
    entry so a fitted component has a well defined sign."""
    nb = len(class_bands)
    base = np.array([1.0 if k % 2 == 0 else -1.0 for k in range(nb)])
    base[0] = 2.0
    base -= base.mean()
    if num_classes == 2:
        return np.stack([base, -base])
    rng = np.random.default_rng(1234)
    rows = [base]
    while len(rows) < num_classes:
        cand = rng.choice([-1.0, 1.0], size=nb)
        cand -= cand.mean()
        if all(abs(np.dot(cand, r)) < 0.5 * np.dot(r, r) for r in rows):
            rows.append(cand)
    return np.stack(rows)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    image_size: tuple = (64, 64)
    bands: int = 16
    num_classes: int = 2
    objects_per_image: tuple = (2, 3)
    object_size_px: tuple = (14, 24)
    location_bands: tuple = (2, 7, 12)
    location_gain: float = 3.0
    background_level: float = 1.0
    background_texture: float = 0.08
    object_brightness: tuple = (0.45, 0.7)
    signature_strength: float = 0.08
    noise_std: float = 0.02
    location_noise_std: float = 0.06
    all_classes_per_image: bool = True
    seed: int = 0
    class_patterns: np.ndarray = field(default=None, compare=False)

    def __post_init__(self):
        H, W = self.image_size
        if H % 32 or W % 32:
            raise ValueError(f"image size {self.image_size} must be divisible by 32")
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        lo, hi = self.objects_per_image
        if lo < 0 or hi < lo:
            raise ValueError("bad object count range")
        if any(not 0 <= b < self.bands for b in self.location_bands):
            raise ValueError("location band index out of range")
        if self.class_patterns is None:
            pats = np.zeros((self.num_classes, self.bands))
            cb = self.class_bands
            pats[:, cb] = _class_patterns(self.num_classes, cb)
            object.__setattr__(self, "class_patterns", pats)
        pats = np.asarray(self.class_patterns)
        for i in range(len(pats)):
            for j in range(i):
                if np.allclose(pats[i], pats[j]):
                    raise ValueError("class signatures must be pairwise distinct")

    @property
    def class_bands(self):
        return [b for b in range(self.bands) if b not in self.location_bands]


def _smooth_field(rng, H, W, cells=4):
    coarse = rng.standard_normal((cells + 1, cells + 1))
    ys = np.linspace(0, cells, H)
    xs = np.linspace(0, cells, W)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c = coarse
    return (
        c[y0][:, x0] * (1 - fy) * (1 - fx)
        + c[y0 + 1][:, x0] * fy * (1 - fx)
        + c[y0][:, x0 + 1] * (1 - fy) * fx
        + c[y0 + 1][:, x0 + 1] * fy * fx
    )


def _place_boxes(rng, spec, count):
    H, W = spec.image_size
    lo, hi = spec.object_size_px
    placed = []
    for _ in range(count):
        for _attempt in range(50):
            bw, bh = rng.integers(lo, hi + 1, size=2)
            x0 = int(rng.integers(0, W - bw + 1))
            y0 = int(rng.integers(0, H - bh + 1))
            box = (x0, y0, x0 + int(bw), y0 + int(bh))
            # keep a one pixel gap between objects
            if all(box[2] + 1 <= b[0] or b[2] + 1 <= box[0] or box[3] + 1 <= b[1] or b[3] + 1 <= box[1] for b in placed):
                placed.append(box)
                break
    return placed


def render_scene(spec, rng):
    """One (cube, ground-truth boxes) pair."""
    H, W = spec.image_size
    B = spec.bands
    shape = np.linspace(0.7, 1.3, B)
    tex = _smooth_field(rng, H, W) * spec.background_texture
    cube = spec.background_level + tex[None] * shape[:, None, None]
    lo, hi = spec.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    boxes = _place_boxes(rng, spec, n_obj)
    classes = rng.integers(0, spec.num_classes, size=len(boxes))
    if spec.all_classes_per_image and len(boxes) >= spec.num_classes:
        # with a single class per scene its signature is collinear with
        # object brightness and PCA folds the two into one component
        classes[: spec.num_classes] = np.arange(spec.num_classes)
        classes = rng.permutation(classes)
    gts = []
    for (x0, y0, x1, y1), cls in zip(boxes, classes.tolist()):
        bright = rng.uniform(*spec.object_brightness)
        sig = spec.signature_strength * spec.class_patterns[cls]
        cube[:, y0:y1, x0:x1] += (bright + sig)[:, None, None]
        gts.append(
            GroundTruthBox(cls, (x0 + x1) / 2 / W, (y0 + y1) / 2 / H, (x1 - x0) / W, (y1 - y0) / H)
        )
    cube[list(spec.location_bands)] *= spec.location_gain
    noise = np.full(B, spec.noise_std)
    noise[list(spec.location_bands)] = spec.location_noise_std
    cube = cube + noise[:, None, None] * rng.standard_normal(cube.shape)
    return HyperCube(cube.astype(np.float32), default_wavelengths(B)), gts


def generate_corpus(spec, count):
    """``count`` scenes from one seeded stream; ids are zero-padded indices."""
    rng = np.random.default_rng(spec.seed)
    out = []
    for k in range(count):
        cube, gts = render_scene(spec, rng)
        out.append((f"scene_{k:05d}", cube, gts))
    return out
