"""Two-stream backbone with SSA insertion, one-stage anchor head, loss, NMS, SGD.

Stage ``i`` maps the stage-``i`` input (stride ``2**(i-1)``) to its output at
stride ``2**i``. For stages listed in ``ssa_stages`` the block computes
corrections from both stream inputs first and each stream runs on
``input + correction``. The fused pyramid levels are ``S_i = a_i + e_i`` for
``i`` in 3, 4, 5 (strides 8, 16, 32).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ssa as ssa_mod
from . import tensor as T
from .boxes import Detection, iou
from .tensor import Tensor

LEVELS = (3, 4, 5)


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class Anchor:
    width: float
    height: float
    level: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("anchor dimensions must be positive")
        if self.level not in LEVELS:
            raise ValueError(f"anchor level must be one of {LEVELS}")

    @property
    def stride(self):
        return 2**self.level


def default_anchors(mult=4.0):
    return [Anchor(mult * 2**lv, mult * 2**lv, lv) for lv in LEVELS]


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple = (4, 8, 16, 32, 64)
    ssa_stages: tuple = (3, 4, 5)
    input_channels: int = 3
    streams: int = 2
    ssa_r: int = 2
    ssa_d_k: int | None = None
    ffn_expansion: int = 4
    sam_reduction: int = 4

    def __post_init__(self):
        ch = tuple(int(c) for c in self.stage_channels)
        if len(ch) != 5 or min(ch) < 1 or any(b < a for a, b in zip(ch, ch[1:])):
            raise ValueError(f"stage_channels must be 5 positive non-decreasing ints, got {ch}")
        if not set(self.ssa_stages) <= {3, 4, 5}:
            raise ValueError(f"ssa_stages must be a subset of {{3, 4, 5}}, got {self.ssa_stages}")
        if self.streams not in (1, 2):
            raise ValueError("streams must be 1 or 2")
        if self.streams == 1 and self.ssa_stages:
            raise ValueError("a single-stream backbone cannot host SSA blocks")
        object.__setattr__(self, "stage_channels", ch)
        object.__setattr__(self, "ssa_stages", tuple(sorted(self.ssa_stages)))

    def in_channels(self, stage):
        return self.input_channels if stage == 1 else self.stage_channels[stage - 2]

    def ssa_config(self, stage, height, width):
        div = 2 ** (stage - 1)
        return ssa_mod.stage_config(
            self.in_channels(stage), height // div, width // div, r=self.ssa_r, d_k=self.ssa_d_k,
            ffn_expansion=self.ffn_expansion, sam_reduction=self.sam_reduction,
        )


def _he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def stream_names(cfg):
    return ("a", "e")[: cfg.streams]


def init_backbone(cfg, image_size, rng):
    """Flat name -> Tensor dict for both streams and every SSA block."""
    H, W = image_size
    if H % 32 or W % 32:
        raise ValueError(f"input size {H}x{W} must be divisible by 32")
    params = {}
    for s in stream_names(cfg):
        for i in range(1, 6):
            cin, cout = cfg.in_channels(i), cfg.stage_channels[i - 1]
            params[f"{s}.stage{i}.down.w"] = _he(rng, (cout, cin, 3, 3))
            params[f"{s}.stage{i}.down.b"] = np.zeros(cout)
            params[f"{s}.stage{i}.res.w"] = _he(rng, (cout, cout, 3, 3)) * 0.5
            params[f"{s}.stage{i}.res.b"] = np.zeros(cout)
    for i in cfg.ssa_stages:
        sp = ssa_mod.init_params(cfg.ssa_config(i, H, W), rng, split_scale=0.1)
        for k, v in sp.items():
            params[f"ssa{i}.{k}"] = v.data
    return {k: Tensor(v, requires_grad=True) for k, v in params.items()}


def stage_forward(x, params, prefix):
    y = T.relu(T.conv2d(x, params[prefix + ".down.w"], params[prefix + ".down.b"], stride=2, padding=1))
    return y + T.relu(T.conv2d(y, params[prefix + ".res.w"], params[prefix + ".res.b"], stride=1, padding=1))


def ssa_params_for(params, stage):
    pre = f"ssa{stage}."
    return ssa_mod.SsaParams({k[len(pre):]: v for k, v in params.items() if k.startswith(pre)})


def backbone_forward(sa, se, cfg, params):
    """Return [S3, S4, S5] fused feature maps."""
    sa = T.as_tensor(sa)
    N, C, H, W = sa.shape
    if H % 32 or W % 32:
        raise ValueError(f"input size {H}x{W} must be divisible by 32")
    if C != cfg.input_channels:
        raise ValueError(f"expected {cfg.input_channels} input channels, got {C}")
    a = sa
    e = T.as_tensor(se) if cfg.streams == 2 else None
    if e is not None and e.shape != sa.shape:
        raise ValueError("stream inputs must share a shape")
    fused = []
    for i in range(1, 6):
        if i in cfg.ssa_stages:
            scfg = cfg.ssa_config(i, H, W)
            pair = ssa_mod.StreamPair(ssa_mod.grid_to_tokens(a), ssa_mod.grid_to_tokens(e))
            corr = ssa_mod.ssa_forward(pair, scfg, ssa_params_for(params, i))
            a = a + ssa_mod.tokens_to_grid(corr.a, scfg.h, scfg.w)
            e = e + ssa_mod.tokens_to_grid(corr.e, scfg.h, scfg.w)
        a = stage_forward(a, params, f"a.stage{i}")
        if e is not None:
            e = stage_forward(e, params, f"e.stage{i}")
        if i in LEVELS:
            fused.append(a + e if e is not None else a)
    return fused


# ------------------------------------------------------------------------ head


def anchors_by_level(anchors):
    return {lv: [a for a in anchors if a.level == lv] for lv in LEVELS}


def init_head(cfg, anchors, num_classes, rng):
    params = {}
    per = anchors_by_level(anchors)
    for lv, ch in zip(LEVELS, cfg.stage_channels[2:]):
        out = len(per[lv]) * (5 + num_classes)
        params[f"head{lv}.w"] = Tensor(rng.standard_normal((out, ch, 1, 1)) * 0.01, requires_grad=True)
        params[f"head{lv}.b"] = Tensor(np.zeros(out), requires_grad=True)
    return params


def head_forward(S3, S4, S5, anchors, num_classes, params):
    """Per level an (N, A*(5+C), h, w) map of (tx, ty, tw, th, obj, class logits) per anchor."""
    per = anchors_by_level(anchors)
    raw = []
    for lv, s in zip(LEVELS, (S3, S4, S5)):
        w = params[f"head{lv}.w"]
        if w.shape[0] != len(per[lv]) * (5 + num_classes) or w.shape[1] != s.shape[1]:
            raise ValueError(f"head{lv} weight {w.shape} does not fit features {s.shape}")
        raw.append(T.conv2d(s, w, params[f"head{lv}.b"]))
    return raw


@dataclass(frozen=True)
class LocationTable:
    """Static per-location geometry, in the flattened (level, i, j, anchor) order."""

    level: np.ndarray
    row: np.ndarray
    col: np.ndarray
    anchor_idx: np.ndarray
    stride: np.ndarray
    anchor_w: np.ndarray
    anchor_h: np.ndarray
    grid: dict

    def __len__(self):
        return len(self.level)


def location_table(anchors, image_size):
    H, W = image_size
    per = anchors_by_level(anchors)
    cols = {k: [] for k in ("level", "row", "col", "anchor_idx", "stride", "anchor_w", "anchor_h")}
    grid = {}
    for lv in LEVELS:
        s = 2**lv
        gh, gw = H // s, W // s
        grid[lv] = (gh, gw)
        for i in range(gh):
            for j in range(gw):
                for ai, anc in enumerate(per[lv]):
                    cols["level"].append(lv)
                    cols["row"].append(i)
                    cols["col"].append(j)
                    cols["anchor_idx"].append(ai)
                    cols["stride"].append(s)
                    cols["anchor_w"].append(anc.width)
                    cols["anchor_h"].append(anc.height)
    arrs = {k: np.asarray(v, dtype=float if k in ("anchor_w", "anchor_h") else int) for k, v in cols.items()}
    return LocationTable(grid=grid, **arrs)


def flatten_raw(raw, anchors, num_classes):
    """Level maps -> (N, L, 5+C) in location-table order."""
    per = anchors_by_level(anchors)
    parts = []
    for lv, r in zip(LEVELS, raw):
        N, _, h, w = r.shape
        A = len(per[lv])
        if A == 0:
            continue
        x = T.reshape(r, (N, A, 5 + num_classes, h, w))
        x = T.transpose(x, (0, 3, 4, 1, 2))
        parts.append(T.reshape(x, (N, h * w * A, 5 + num_classes)))
    return T.concat(parts, axis=1)


EXP_CLAMP = 4.0


def _sig(z):
    return T._sigmoid(np.asarray(z, dtype=np.float64))


def decode(raw, anchors, num_classes, image_size, conf_threshold=0.25):
    """Raw level maps -> per-image lists of detections (score >= threshold kept)."""
    H, W = image_size
    table = location_table(anchors, image_size)
    flat = flatten_raw([T.as_tensor(r) for r in raw], anchors, num_classes).data
    out = []
    for n in range(flat.shape[0]):
        p = flat[n]
        cx = (table.col + _sig(p[:, 0])) * table.stride
        cy = (table.row + _sig(p[:, 1])) * table.stride
        bw = table.anchor_w * np.exp(np.clip(p[:, 2], -EXP_CLAMP, EXP_CLAMP))
        bh = table.anchor_h * np.exp(np.clip(p[:, 3], -EXP_CLAMP, EXP_CLAMP))
        cls_logits = p[:, 5:]
        best = np.argmax(cls_logits, axis=1)
        score = _sig(p[:, 4]) * _sig(cls_logits[np.arange(len(p)), best])
        x0 = np.clip(cx - bw / 2, 0, W)
        y0 = np.clip(cy - bh / 2, 0, H)
        x1 = np.clip(cx + bw / 2, 0, W)
        y1 = np.clip(cy + bh / 2, 0, H)
        dets = []
        for k in np.nonzero(score >= conf_threshold)[0]:
            if x0[k] < x1[k] and y0[k] < y1[k]:
                dets.append(Detection(int(best[k]), float(score[k]), (float(x0[k]), float(y0[k]), float(x1[k]), float(y1[k]))))
        out.append(dets)
    return out


def encode_box(box, loc, table, eps=1e-9):
    """Targets (tx, ty, tw, th) that decode exactly back to ``box`` at location ``loc``."""
    x0, y0, x1, y1 = box
    s = table.stride[loc]
    fx = np.clip((x0 + x1) / 2 / s - table.col[loc], eps, 1 - eps)
    fy = np.clip((y0 + y1) / 2 / s - table.row[loc], eps, 1 - eps)
    return (
        math.log(fx / (1 - fx)),
        math.log(fy / (1 - fy)),
        math.log((x1 - x0) / table.anchor_w[loc]),
        math.log((y1 - y0) / table.anchor_h[loc]),
    )


# ------------------------------------------------------------------ assignment


@dataclass
class Assignment:
    """Targets for one image: objectness per location and the positive set."""

    obj_target: np.ndarray
    pos_loc: np.ndarray
    pos_class: np.ndarray
    pos_box: np.ndarray  # (P, 4) pixel corners
    pos_gt: np.ndarray  # index into the image's GT list

    @property
    def num_pos(self):
        return len(self.pos_loc)


def shape_iou(w1, h1, w2, h2):
    inter = min(w1, w2) * min(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)


def assign_targets(gts, anchors, image_size, table=None):
    """One positive (level, anchor, cell) per GT by best centered anchor IoU.

    Candidates are ranked by IoU, ties going to the lower level and then the
    lower anchor index. A GT whose best slot is already taken by an earlier
    GT falls back to its next candidate; it is dropped if none is free.
    """
    H, W = image_size
    table = table if table is not None else location_table(anchors, image_size)
    per = anchors_by_level(anchors)
    offsets, off = {}, 0
    for lv in LEVELS:
        offsets[lv] = off
        gh, gw = table.grid[lv]
        off += gh * gw * len(per[lv])
    obj = np.zeros(len(table))
    taken = set()
    locs, classes, boxes, gidx = [], [], [], []
    for g_i, g in enumerate(gts):
        gw_px, gh_px = g.w * W, g.h * H
        cands = []
        for lv in LEVELS:
            for ai, anc in enumerate(per[lv]):
                cands.append((-shape_iou(gw_px, gh_px, anc.width, anc.height), lv, ai))
        cands.sort()
        for _, lv, ai in cands:
            s = 2**lv
            gh, gw = table.grid[lv]
            j = min(int(g.cx * W // s), gw - 1)
            i = min(int(g.cy * H // s), gh - 1)
            loc = offsets[lv] + (i * gw + j) * len(per[lv]) + ai
            if loc not in taken:
                taken.add(loc)
                obj[loc] = 1.0
                locs.append(loc)
                classes.append(g.class_id)
                boxes.append(g.corners(W, H))
                gidx.append(g_i)
                break
    return Assignment(
        obj,
        np.asarray(locs, dtype=int),
        np.asarray(classes, dtype=int),
        np.asarray(boxes, dtype=float).reshape(-1, 4),
        np.asarray(gidx, dtype=int),
    )


# ------------------------------------------------------------------------ loss


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    cls: float
    box: float


def detection_loss(raw, assignments, anchors, num_classes, image_size):
    """Returns (total loss Tensor, LossBreakdown).

    cls = mean objectness BCE over all locations + mean class BCE over the
    positives' logits; box = mean (1 - IoU) over positives.
    """
    table = location_table(anchors, image_size)
    flat = flatten_raw(raw, anchors, num_classes)
    N, L, K = flat.shape
    rows = T.reshape(flat, (N * L, K))
    obj_t = np.concatenate([a.obj_target for a in assignments])
    obj_logits = T.index(rows, (slice(None), 4))
    l_obj = T.mean(T.bce_with_logits(obj_logits, obj_t))

    pos = np.concatenate([n * L + a.pos_loc for n, a in enumerate(assignments)]).astype(int)
    P = len(pos)
    if P == 0:
        l_cls = l_obj
        l_box = Tensor(0.0)
        total = l_cls + l_box
        return total, LossBreakdown(float(total.data), float(l_cls.data), 0.0)

    classes = np.concatenate([a.pos_class for a in assignments])
    gt = np.concatenate([a.pos_box for a in assignments])
    prow = T.index(rows, pos)
    onehot = np.zeros((P, num_classes))
    onehot[np.arange(P), classes] = 1.0
    l_clsbce = T.mean(T.bce_with_logits(T.index(prow, (slice(None), slice(5, 5 + num_classes))), onehot))
    l_cls = l_obj + l_clsbce

    loc = pos % L
    s, col, row = table.stride[loc], table.col[loc], table.row[loc]
    cx = (col + T.sigmoid(prow[:, 0])) * s
    cy = (row + T.sigmoid(prow[:, 1])) * s
    bw = T.exp(T.clip(prow[:, 2], -EXP_CLAMP, EXP_CLAMP)) * table.anchor_w[loc]
    bh = T.exp(T.clip(prow[:, 3], -EXP_CLAMP, EXP_CLAMP)) * table.anchor_h[loc]
    x0, x1 = cx - T.scale(bw, 0.5), cx + T.scale(bw, 0.5)
    y0, y1 = cy - T.scale(bh, 0.5), cy + T.scale(bh, 0.5)
    iw = T.relu(T.minimum(x1, gt[:, 2]) - T.maximum(x0, gt[:, 0]))
    ih = T.relu(T.minimum(y1, gt[:, 3]) - T.maximum(y0, gt[:, 1]))
    inter = iw * ih
    union = bw * bh + (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1]) - inter
    l_box = T.mean(1.0 - inter / union)
    total = l_cls + l_box
    return total, LossBreakdown(float(total.data), float(l_cls.data), float(l_box.data))


# ------------------------------------------------------------------------- NMS


def _nms_order(dets):
    return sorted(range(len(dets)), key=lambda k: (-dets[k].score, dets[k].box[0], dets[k].box[1], k))


def nms_indices(dets, iou_threshold=0.6):
    """Indices kept by per-class greedy NMS, in keep order."""
    keep = []
    for cls in sorted({d.class_id for d in dets}):
        idx = [k for k in _nms_order(dets) if dets[k].class_id == cls]
        boxes = np.array([dets[k].box for k in idx], dtype=float).reshape(-1, 4)
        alive = np.ones(len(idx), dtype=bool)
        for p in range(len(idx)):
            if not alive[p]:
                continue
            keep.append(idx[p])
            rest = np.nonzero(alive[p + 1 :])[0] + p + 1
            if len(rest):
                ov = _iou_one_to_many(boxes[p], boxes[rest])
                alive[rest[ov > iou_threshold]] = False
    return sorted(keep, key=lambda k: (-dets[k].score, dets[k].box[0], dets[k].box[1], k))


def _iou_one_to_many(b, others):
    iw = np.minimum(b[2], others[:, 2]) - np.maximum(b[0], others[:, 0])
    ih = np.minimum(b[3], others[:, 3]) - np.maximum(b[1], others[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area = (b[2] - b[0]) * (b[3] - b[1])
    areas = (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
    return inter / (area + areas - inter)


def nms(dets, iou_threshold=0.6):
    return [dets[k] for k in nms_indices(dets, iou_threshold)]


# ---------------------------------------------------------------------- model


@dataclass
class Detector:
    backbone: BackboneConfig
    anchors: list
    num_classes: int
    image_size: tuple
    params: dict = field(default_factory=dict)

    @classmethod
    def create(cls, backbone, anchors, num_classes, image_size, seed=0):
        rng = np.random.default_rng(seed)
        params = init_backbone(backbone, image_size, rng)
        params.update(init_head(backbone, anchors, num_classes, rng))
        return cls(backbone, list(anchors), num_classes, tuple(image_size), params)

    def forward(self, sa, se=None):
        feats = backbone_forward(sa, se, self.backbone, self.params)
        return head_forward(*feats, self.anchors, self.num_classes, self.params)

    def loss(self, sa, se, gts_per_image):
        raw = self.forward(sa, se)
        assignments = [assign_targets(g, self.anchors, self.image_size) for g in gts_per_image]
        return detection_loss(raw, assignments, self.anchors, self.num_classes, self.image_size)

    def detect(self, sa, se=None, conf_threshold=0.25, iou_threshold=0.6):
        raw = self.forward(sa, se)
        return [nms(d, iou_threshold) for d in decode(raw, self.anchors, self.num_classes, self.image_size, conf_threshold)]

    def state(self):
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state):
        missing = set(self.params) - set(state)
        extra = {k for k in state if not k.startswith("opt.") and not k.startswith("meta.")} - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, v in self.params.items():
            if state[k].shape != v.shape:
                raise ValueError(f"checkpoint mismatch for {k}: {state[k].shape} vs {v.shape}")
            v.data = np.array(state[k], dtype=np.float64)


# ------------------------------------------------------------------- training


def poly_lr(epoch, max_epoch, base_lr=0.01, power=0.9):
    """(1 - epoch/max_epoch)**power * base_lr."""
    if max_epoch <= 0:
        raise ValueError("max_epoch must be positive")
    frac = min(max(epoch / max_epoch, 0.0), 1.0)
    return (1.0 - frac) ** power * base_lr


@dataclass
class SgdState:
    base_lr: float = 0.01
    power: float = 0.9
    max_epoch: int = 50
    momentum: float = 0.9
    weight_decay: float = 0.0
    epoch: int = 0
    step: int = 0
    velocity: dict = field(default_factory=dict)

    @property
    def lr(self):
        return poly_lr(self.epoch, self.max_epoch, self.base_lr, self.power)


def train_step(model, batch, opt):
    """One forward/backward/SGD update. ``batch`` = (sa, se, gts_per_image)."""
    sa, se, gts = batch
    for p in model.params.values():
        p.grad = None
    total, parts = model.loss(sa, se, gts)
    if not np.isfinite(parts.total):
        raise NumericalError(
            f"non-finite loss at epoch {opt.epoch} step {opt.step}: total={parts.total} cls={parts.cls} box={parts.box}"
        )
    T.backward(total)
    lr = opt.lr
    for name in sorted(model.params):
        p = model.params[name]
        if p.grad is None:
            continue
        g = p.grad
        if opt.weight_decay:
            g = g + opt.weight_decay * p.data
        v = opt.velocity.get(name)
        v = g if v is None else opt.momentum * v + g
        opt.velocity[name] = v
        p.data = p.data - lr * v
        p.grad = None
    opt.step += 1
    return parts
