"""Finite-difference checks for every differentiable op, grouped by module.

Each case is ``(module, name, f, inputs)`` where ``f(*inputs)`` returns a
scalar Tensor. Inputs are drawn away from kinks (relu at 0, ties in max,
clip bounds) so central differences are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import detector as D
from . import ssa
from . import tensor as T
from .boxes import GroundTruthBox
from .tensor import Tensor

MODULES = ("ops", "conv", "ssa", "detector", "model")
# per-op modules; "model" is the slower whole-network check
OP_MODULES = MODULES[:4]


def _t(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def _away(rng, shape, gap=0.1):
    """Uniform magnitudes in [gap, 1] with random signs."""
    return rng.uniform(gap, 1.0, shape) * rng.choice([-1.0, 1.0], shape)


def _distinct(rng, shape, spacing=0.05):
    """Random values whose entries differ pairwise by at least ``spacing``."""
    n = int(np.prod(shape))
    return rng.permutation(np.arange(n) * spacing + rng.uniform(0, spacing / 4)).reshape(shape) - n * spacing / 2


def _probe(out, rng):
    """Scalar loss sum(out * R) with a fixed random R."""
    R = rng.standard_normal(out.shape)
    return lambda y: T.tsum(y * R)


def _wrap(op, rng, *example):
    probe = _probe(op(*example), rng)
    return lambda *xs: probe(op(*xs))


def op_cases(rng):
    x = _t(rng.standard_normal((3, 4)))
    y = _t(rng.standard_normal((3, 4)))
    row = _t(rng.standard_normal((1, 4)))
    pos = _t(rng.uniform(0.5, 2.0, (3, 4)))
    kink = _t(_away(rng, (3, 4)))
    uniq = _t(_distinct(rng, (3, 4)))
    gap = _away(rng, (3, 4))
    other = _t(x.data + gap)
    clipped = _t(rng.uniform(-2, 2, (3, 4)))
    clipped.data[np.abs(np.abs(clipped.data) - 1.0) < 0.1] += 0.25
    target = rng.integers(0, 2, (3, 4)).astype(float)
    a3 = _t(rng.standard_normal((2, 3, 4)))
    b3 = _t(rng.standard_normal((4, 5)))
    img = _t(rng.standard_normal((1, 2, 3, 3)))
    specs = [
        ("add_broadcast", lambda a, b: a + b, (x, row)),
        ("sub", lambda a, b: a - b, (x, y)),
        ("mul_broadcast", lambda a, b: a * b, (x, row)),
        ("div", lambda a, b: a / b, (x, pos)),
        ("scale", lambda a: T.scale(a, -1.7), (x,)),
        ("relu", T.relu, (kink,)),
        ("sigmoid", T.sigmoid, (x,)),
        ("exp", T.exp, (x,)),
        ("log", T.log, (pos,)),
        ("clip", lambda a: T.clip(a, -1.0, 1.0), (clipped,)),
        ("maximum", T.maximum, (x, other)),
        ("minimum", T.minimum, (x, other)),
        ("bce_with_logits", lambda a: T.bce_with_logits(a, target), (x,)),
        ("sum_axis", lambda a: T.tsum(a, axis=1), (x,)),
        ("mean_all", lambda a: T.mean(a), (x,)),
        ("max_axis", lambda a: T.tmax(a, axis=0), (uniq,)),
        ("softmax", lambda a: T.softmax(a, axis=-1), (x,)),
        ("reshape", lambda a: T.reshape(a, (4, 3)), (x,)),
        ("transpose", lambda a: T.transpose(a, (1, 0)), (x,)),
        ("concat", lambda a, b: T.concat([a, b], axis=1), (x, y)),
        ("split", lambda a: T.split(a, [1, 3], axis=1)[1], (x,)),
        ("index", lambda a: T.index(a, (slice(None), [0, 2, 2])), (x,)),
        ("pad2d", lambda a: T.pad2d(a, 1), (img,)),
        ("matmul_batched", T.matmul, (a3, b3)),
    ]
    return [("ops", name, _wrap(op, rng, *inputs), list(inputs)) for name, op, inputs in specs]


def conv_cases(rng):
    x = _t(rng.standard_normal((2, 3, 5, 5)))
    w = _t(rng.standard_normal((4, 3, 3, 3)))
    b = _t(rng.standard_normal(4))
    wd = _t(rng.standard_normal((3, 2, 2)))
    w1 = _t(rng.standard_normal((2, 3, 1, 1)))
    specs = [
        ("conv2d_s1_p1_bias", lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1), (x, w, b)),
        ("conv2d_s2_p1", lambda x, w: T.conv2d(x, w, stride=2, padding=1), (x, w)),
        ("conv2d_1x1", lambda x, w: T.conv2d(x, w), (x, w1)),
        ("depthwise_s2", lambda x, w: T.depthwise_conv2d(x, w, stride=2), (x, wd)),
        ("depthwise_s1_p1", lambda x, w: T.depthwise_conv2d(x, w, stride=1, padding=1), (x, wd)),
    ]
    return [("conv", name, _wrap(op, rng, *inputs), list(inputs)) for name, op, inputs in specs]


def _ssa_setup(rng, d=4, h=4, w=4, r=2):
    cfg = ssa.SsaConfig(d=d, h=h, w=w, r=r)
    params = ssa.init_params(cfg, rng)
    a = _t(rng.standard_normal((1, cfg.n, d)))
    e = _t(rng.standard_normal((1, cfg.n, d)))
    return cfg, params, a, e


def _with_params(fn, names):
    """Adapt ``fn(a, e, params)`` to positional inputs (a, e, *param tensors)."""
    return lambda a, e, *ps: fn(a, e, ssa.SsaParams(zip(names, ps)))


def ssa_cases(rng):
    cfg, params, a, e = _ssa_setup(rng)
    names = sorted(params)
    ptensors = [params[k] for k in names]
    pair = lambda a, e: ssa.StreamPair(a, e)  # noqa: E731

    def reduce_fn(a, e, p):
        K, V = ssa.spatial_reduce(ssa.stack_features(pair(a, e)), cfg, p)
        return T.concat([K, V], axis=-1)

    def attn_fn(a, e, p):
        K, V = ssa.spatial_reduce(ssa.stack_features(pair(a, e)), cfg, p)
        out = ssa.cross_attention(pair(a, e), K, V, cfg, p)
        return T.concat([out.a, out.e], axis=-1)

    def ffn_fn(a, e, p):
        out = ssa.residual_ffn(pair(a, e), pair(e, a), p)
        return T.concat([out.a, out.e], axis=-1)

    def sam_fn(a, e, p):
        out = ssa.sam_attention(pair(a, e), cfg, p)
        return T.concat([out.a, out.e], axis=-1)

    def split_fn(a, e, p):
        out = ssa.split_project(pair(a, e), p)
        return T.concat([out.a, out.e], axis=-1)

    def full_fn(a, e, p):
        out = ssa.ssa_forward(pair(a, e), cfg, p)
        return T.concat([out.a, out.e], axis=-1)

    cases = []
    for name, fn in (("spatial_reduce", reduce_fn), ("cross_attention", attn_fn), ("residual_ffn", ffn_fn),
                     ("sam_attention", sam_fn), ("split_project", split_fn), ("ssa_block_n16_d4_r2", full_fn)):
        op = _with_params(fn, names)
        cases.append(("ssa", name, _wrap(op, rng, a, e, *ptensors), [a, e] + ptensors))
    return cases


def detector_cases(rng):
    size = (32, 32)
    anchors = D.default_anchors(2.0)
    gts = [[GroundTruthBox(0, 0.3, 0.4, 0.25, 0.3), GroundTruthBox(1, 0.7, 0.6, 0.4, 0.35)]]
    assignments = [D.assign_targets(g, anchors, size) for g in gts]

    x = _t(rng.standard_normal((1, 2, 8, 8)))
    sp = {"s.down.w": _t(rng.standard_normal((3, 2, 3, 3))), "s.down.b": _t(rng.standard_normal(3)),
          "s.res.w": _t(rng.standard_normal((3, 3, 3, 3))), "s.res.b": _t(rng.standard_normal(3))}
    sp_names = sorted(sp)

    def stage_fn(x, *ps):
        return D.stage_forward(x, dict(zip(sp_names, ps)), "s")

    raw_shapes = [(1, 7, 4, 4), (1, 7, 2, 2), (1, 7, 1, 1)]
    raws = [_t(rng.standard_normal(s) * 0.5) for s in raw_shapes]

    def loss_fn(*rs):
        return D.detection_loss(list(rs), assignments, anchors, 2, size)[0]

    feats = [_t(rng.standard_normal((1, 4, 32 // 2**lv, 32 // 2**lv))) for lv in D.LEVELS]
    hp = D.init_head(D.BackboneConfig(stage_channels=(2, 2, 4, 4, 4)), anchors, 2, rng)
    for v in hp.values():
        v.data = v.data + 0.1 * rng.standard_normal(v.shape)
    hp_names = sorted(hp)

    def head_fn(s3, s4, s5, *ps):
        return T.concat([T.reshape(r, (-1,)) for r in D.head_forward(s3, s4, s5, anchors, 2, dict(zip(hp_names, ps)))])

    return [
        ("detector", "stage_forward", _wrap(stage_fn, rng, x, *[sp[k] for k in sp_names]),
         [x] + [sp[k] for k in sp_names]),
        ("detector", "head_forward", _wrap(head_fn, rng, *feats, *[hp[k] for k in hp_names]),
         feats + [hp[k] for k in hp_names]),
        ("detector", "detection_loss", loss_fn, raws),
    ]


def model_cases(rng):
    cfg = D.BackboneConfig(stage_channels=(2, 2, 4, 4, 4), ssa_stages=(4,))
    size = (32, 32)
    params = D.init_backbone(cfg, size, rng)
    anchors = D.default_anchors(2.0)
    params.update(D.init_head(cfg, anchors, 2, rng))
    names = sorted(params)
    # zero-initialised biases put dead relu units exactly on the kink
    for k in names:
        params[k].data = params[k].data + 0.1 * rng.standard_normal(params[k].shape)
    sa = _t(rng.standard_normal((1, 3, *size)))
    se = _t(rng.standard_normal((1, 3, *size)))
    gts = [[GroundTruthBox(0, 0.3, 0.4, 0.25, 0.3), GroundTruthBox(1, 0.7, 0.6, 0.4, 0.35)]]
    assignments = [D.assign_targets(g, anchors, size) for g in gts]

    def model_fn(sa, se, *ps):
        p = dict(zip(names, ps))
        raw = D.head_forward(*D.backbone_forward(sa, se, cfg, p), anchors, 2, p)
        return D.detection_loss(raw, assignments, anchors, 2, size)[0]

    return [
        ("model", "detector_end_to_end", model_fn, [sa, se] + [params[k] for k in names]),
    ]


BUILDERS = {"ops": op_cases, "conv": conv_cases, "ssa": ssa_cases, "detector": detector_cases, "model": model_cases}


@dataclass
class CaseResult:
    module: str
    name: str
    seed: int
    max_rel_error: float
    n_checked: int
    passed: bool


def run_suite(modules=MODULES, seeds=range(20), eps=1e-5, tol=1e-4, max_per_tensor=24):
    """Grad-check every case of the requested modules for every seed."""
    results = []
    for module in modules:
        if module not in BUILDERS:
            raise ValueError(f"unknown gradcheck module {module!r}; choose from {MODULES}")
    for seed in seeds:
        for module in modules:
            rng = np.random.default_rng([seed, MODULES.index(module)])
            for mod, name, f, inputs in BUILDERS[module](rng):
                rep = T.grad_check(f, inputs, eps=eps, tol=tol, max_per_tensor=max_per_tensor, rng=rng)
                results.append(CaseResult(mod, name, int(seed), rep.max_rel_error, rep.n_checked, rep.passed))
    return results


def format_report(results):
    lines = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.module}.{r.name} seed={r.seed} max_rel_error={r.max_rel_error:.3e} n={r.n_checked} {status}")
    return "\n".join(lines) + "\n"
