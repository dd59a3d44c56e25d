"""Spectral-spatial aggregation block.

Maps a pair of stream features ``a`` (spatial stream) and ``e`` (spectral
stream), each ``(N, n, d)`` with ``n = h*w`` tokens, to a pair of correction
features of the same shape:

    stack -> reduce keys/values -> cross attention -> residual + FFN
          -> channel/spatial attention (SAM) -> two 1x1 projections

Every weight that touches the concatenated 2d channels is stored as an
``_a``/``_e`` half, and every place the two streams meet is a single binary
addition (or maximum). Swapping the streams together with their weights is
therefore an exact relabeling, down to the last bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class SsaConfig:
    d: int
    h: int
    w: int
    d_k: int | None = None
    d_v: int | None = None
    r: int = 2
    ffn_expansion: int = 4
    sam_reduction: int = 4
    sam_kernel: int = 7

    def __post_init__(self):
        if self.d_k is None:
            object.__setattr__(self, "d_k", self.d)
        if self.d_v is None:
            object.__setattr__(self, "d_v", self.d)
        if self.r < 1 or self.h % self.r or self.w % self.r:
            raise ValueError(f"token grid {self.h}x{self.w} not divisible by reduction rate {self.r}")
        if self.d_k < 1 or self.d_v < 1 or self.ffn_expansion < 1:
            raise ValueError("d_k, d_v and ffn_expansion must be positive")
        if self.d_v != self.d:
            # the attention output is added straight back onto the d-wide input
            raise ValueError(f"d_v ({self.d_v}) must equal d ({self.d}) for the residual connection")

    @property
    def n(self):
        return self.h * self.w

    @property
    def m(self):
        return self.n // (self.r * self.r)

    @property
    def sam_hidden(self):
        return max(1, (2 * self.d) // self.sam_reduction)


PARAM_SHAPES = {
    "W_Q_a": lambda c: (c.d, c.d_k),
    "W_Q_e": lambda c: (c.d, c.d_k),
    "W_K": lambda c: (c.d, c.d_k),
    "W_V": lambda c: (c.d, c.d_v),
    "dw_K": lambda c: (c.d_k, c.r, c.r),
    "dw_V": lambda c: (c.d_v, c.r, c.r),
    "ffn_w1": lambda c: (c.d_v, c.d_v * c.ffn_expansion),
    "ffn_b1": lambda c: (c.d_v * c.ffn_expansion,),
    "ffn_w2": lambda c: (c.d_v * c.ffn_expansion, c.d),
    "ffn_b2": lambda c: (c.d,),
    # channel MLP: 2d -> hidden -> 2d, input and output split per stream
    "sam_w1_a": lambda c: (c.d, c.sam_hidden),
    "sam_w1_e": lambda c: (c.d, c.sam_hidden),
    "sam_b1": lambda c: (c.sam_hidden,),
    "sam_w2_a": lambda c: (c.sam_hidden, c.d),
    "sam_w2_e": lambda c: (c.sam_hidden, c.d),
    "sam_b2_a": lambda c: (c.d,),
    "sam_b2_e": lambda c: (c.d,),
    # spatial attention conv over the (mean, max) maps
    "sam_conv_w": lambda c: (1, 2, c.sam_kernel, c.sam_kernel),
    "sam_conv_b": lambda c: (1,),
    # 1x1 convs 2d -> d, as (d_out, d_in) blocks over the a- and e-channel halves
    "split_a_from_a": lambda c: (c.d, c.d),
    "split_a_from_e": lambda c: (c.d, c.d),
    "split_e_from_a": lambda c: (c.d, c.d),
    "split_e_from_e": lambda c: (c.d, c.d),
}


class SsaParams(dict):
    """Name -> Tensor mapping holding every learnable weight of one block."""

    def tensors(self):
        return [self[k] for k in sorted(self)]

    def copy(self):
        return SsaParams({k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.items()})


BIASES = {"ffn_b1", "ffn_b2", "sam_b1", "sam_b2_a", "sam_b2_e", "sam_conv_b"}


def init_params(cfg, rng, split_scale=1.0):
    """Fan-in scaled normals, zero biases, near-averaging reduction kernels."""
    p = SsaParams()
    for name, shape_fn in PARAM_SHAPES.items():
        shape = shape_fn(cfg)
        if name in BIASES:
            arr = np.zeros(shape)
        elif name.startswith("dw_"):
            arr = 1.0 / (cfg.r * cfg.r) + 0.1 * rng.standard_normal(shape)
        elif name == "sam_conv_w":
            arr = rng.standard_normal(shape) / math.sqrt(2 * cfg.sam_kernel**2)
        elif name.startswith("sam_w1"):
            arr = rng.standard_normal(shape) / math.sqrt(2 * cfg.d)
        elif name.startswith("split_"):
            arr = split_scale * rng.standard_normal(shape) / math.sqrt(2 * cfg.d)
        else:
            arr = rng.standard_normal(shape) / math.sqrt(shape[0])
        p[name] = Tensor(arr, requires_grad=True)
    return p


def zero_params(cfg):
    return SsaParams({k: Tensor(np.zeros(f(cfg)), requires_grad=True) for k, f in PARAM_SHAPES.items()})


def swap_streams(params):
    """Relabel a <-> e: the returned block applied to (e, a) gives (e_T, a_T)."""
    out = SsaParams(params)
    pairs = [
        ("W_Q_a", "W_Q_e"),
        ("sam_w1_a", "sam_w1_e"),
        ("sam_w2_a", "sam_w2_e"),
        ("sam_b2_a", "sam_b2_e"),
        ("split_a_from_a", "split_e_from_e"),
        ("split_a_from_e", "split_e_from_a"),
    ]
    for x, y in pairs:
        out[x], out[y] = params[y], params[x]
    return out


@dataclass(frozen=True)
class StreamPair:
    a: Tensor
    e: Tensor

    def __post_init__(self):
        if self.a.shape != self.e.shape:
            raise ValueError(f"stream shapes differ: {self.a.shape} vs {self.e.shape}")


def _check_tokens(x, cfg):
    if x.ndim != 3 or x.shape[1] != cfg.n or x.shape[2] != cfg.d:
        raise ValueError(f"expected (N, {cfg.n}, {cfg.d}) stream features, got {x.shape}")


# ------------------------------------------------------------------ operations


def stack_features(pair):
    """(N, n, d) x 2 -> (N, n, d, 2); the last axis indexes (a, e)."""
    return T.concat([T.reshape(pair.a, pair.a.shape + (1,)), T.reshape(pair.e, pair.e.shape + (1,))], axis=-1)


def unstack_features(f):
    a, e = T.split(f, [1, 1], axis=-1)
    return StreamPair(T.reshape(a, a.shape[:-1]), T.reshape(e, e.shape[:-1]))


def _reduce_tokens(x, kernel, cfg):
    """(N, n, c) tokens -> (N, n/r^2, c) via a depthwise r x r stride-r conv."""
    N, _, c = x.shape
    grid = T.transpose(T.reshape(x, (N, cfg.h, cfg.w, c)), (0, 3, 1, 2))
    red = T.depthwise_conv2d(grid, kernel, stride=cfg.r)
    return T.reshape(T.transpose(red, (0, 2, 3, 1)), (N, cfg.m, c))


def reduce_streams(f, cfg, params):
    """Per-stream reduced keys and values: ((K_a, K_e), (V_a, V_e)), each (N, n/r^2, .)."""
    if f.ndim != 4 or f.shape[-1] != 2:
        raise ValueError(f"expected stacked features (N, n, d, 2), got {f.shape}")
    pair = unstack_features(f)
    ks = tuple(_reduce_tokens(s @ params["W_K"], params["dw_K"], cfg) for s in (pair.a, pair.e))
    vs = tuple(_reduce_tokens(s @ params["W_V"], params["dw_V"], cfg) for s in (pair.a, pair.e))
    return ks, vs


def spatial_reduce(f, cfg, params):
    """Joint key/value sets: both streams' reduced tokens, a-tokens first.

    Returns K (N, 2n/r^2, d_k) and V (N, 2n/r^2, d_v).
    """
    (ka, ke), (va, ve) = reduce_streams(f, cfg, params)
    return T.concat([ka, ke], axis=1), T.concat([va, ve], axis=1)


def _attend(q, ks, vs, d_k):
    """Softmax attention over the union of two key blocks.

    The max, the normalizer and the weighted value sum each combine the two
    blocks with one commutative binary op.
    """
    s = [T.scale(q @ T.transpose(k, (0, 2, 1)), 1.0 / math.sqrt(d_k)) for k in ks]
    peak = T.maximum(T.tmax(s[0], axis=-1, keepdims=True), T.tmax(s[1], axis=-1, keepdims=True))
    # constant shift: softmax is shift invariant, so no gradient flows through it
    peak = Tensor(peak.data)
    ex = [T.exp(si - peak) for si in s]
    denom = T.tsum(ex[0], axis=-1, keepdims=True) + T.tsum(ex[1], axis=-1, keepdims=True)
    num = ex[0] @ vs[0] + ex[1] @ vs[1]
    weights = [x / denom for x in ex]
    return num / denom, weights


def _halves(x):
    m = x.shape[1] // 2
    if x.shape[1] != 2 * m:
        raise ValueError(f"joint token set must have an even token count, got {x.shape[1]}")
    return tuple(T.split(x, [m, m], axis=1))


def attention_weights(pair, K, cfg, params):
    """Row-stochastic weights over the joint key set, per stream: (N, n, 2m)."""
    ks = _halves(K)
    out = []
    for x, wq in ((pair.a, params["W_Q_a"]), (pair.e, params["W_Q_e"])):
        _, w = _attend(x @ wq, ks, ks, cfg.d_k)
        out.append(np.concatenate([w[0].data, w[1].data], axis=-1))
    return out


def cross_attention(pair, K, V, cfg, params):
    """Attn1 for queries from ``a`` and Attn2 for queries from ``e``, over the joint key set."""
    if K.shape[-1] != cfg.d_k or V.shape[-1] != cfg.d_v or K.shape[1] != V.shape[1]:
        raise ValueError(f"key/value shapes {K.shape}, {V.shape} do not match the config")
    ks, vs = _halves(K), _halves(V)
    out_a, _ = _attend(pair.a @ params["W_Q_a"], ks, vs, cfg.d_k)
    out_e, _ = _attend(pair.e @ params["W_Q_e"], ks, vs, cfg.d_k)
    return StreamPair(out_a, out_e)


def ffn(x, params):
    h = T.relu(x @ params["ffn_w1"] + params["ffn_b1"])
    return h @ params["ffn_w2"] + params["ffn_b2"]


def residual_ffn(pair_in, attn_out, params):
    a_t = pair_in.a + attn_out.a
    e_t = pair_in.e + attn_out.e
    return StreamPair(a_t + ffn(a_t, params), e_t + ffn(e_t, params))


def _channel_mlp(pa, pe, params):
    hidden = T.relu(pa @ params["sam_w1_a"] + pe @ params["sam_w1_e"] + params["sam_b1"])
    return hidden @ params["sam_w2_a"] + params["sam_b2_a"], hidden @ params["sam_w2_e"] + params["sam_b2_e"]


def sam_attention(pair, cfg, params):
    """Channel then spatial attention over concat(a, e) channels, kept as halves.

    Returns the re-weighted halves (f_s restricted to the a-channels and to
    the e-channels).
    """
    a, e = pair.a, pair.e
    N = a.shape[0]
    # channel attention: global avg/max pooling over tokens, shared MLP
    avg_a, avg_e = T.mean(a, axis=1), T.mean(e, axis=1)
    max_a, max_e = T.tmax(a, axis=1), T.tmax(e, axis=1)
    ya1, ye1 = _channel_mlp(avg_a, avg_e, params)
    ya2, ye2 = _channel_mlp(max_a, max_e, params)
    mc_a = T.reshape(T.sigmoid(ya1 + ya2), (N, 1, cfg.d))
    mc_e = T.reshape(T.sigmoid(ye1 + ye2), (N, 1, cfg.d))
    fa, fe = a * mc_a, e * mc_e
    # spatial attention: mean and max over all 2d channels per token
    ch_mean = T.scale(T.tsum(fa, axis=2) + T.tsum(fe, axis=2), 1.0 / (2 * cfg.d))
    ch_max = T.maximum(T.tmax(fa, axis=2), T.tmax(fe, axis=2))
    maps = T.reshape(T.concat([T.reshape(ch_mean, (N, 1, cfg.n)), T.reshape(ch_max, (N, 1, cfg.n))], axis=1),
                     (N, 2, cfg.h, cfg.w))
    logits = T.conv2d(maps, params["sam_conv_w"], params["sam_conv_b"], stride=1, padding=cfg.sam_kernel // 2)
    ms = T.reshape(T.sigmoid(logits), (N, cfg.n, 1))
    return StreamPair(fa * ms, fe * ms)


def split_project(fs, params):
    """Two independent 1x1 convs (2d -> d) applied to the same features."""
    a, e = fs.a, fs.e
    tr = lambda w: T.transpose(w, (1, 0))  # noqa: E731
    a_T = a @ tr(params["split_a_from_a"]) + e @ tr(params["split_a_from_e"])
    e_T = e @ tr(params["split_e_from_e"]) + a @ tr(params["split_e_from_a"])
    return StreamPair(a_T, e_T)


def ssa_forward(pair, cfg, params):
    _check_tokens(pair.a, cfg)
    _check_tokens(pair.e, cfg)
    f = stack_features(pair)
    K, V = spatial_reduce(f, cfg, params)
    attn = cross_attention(pair, K, V, cfg, params)
    bar = residual_ffn(pair, attn, params)
    fs = sam_attention(bar, cfg, params)
    return split_project(fs, params)


def grid_to_tokens(x):
    """(N, C, H, W) feature map -> (N, H*W, C) tokens."""
    N, C, H, W = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (N, H * W, C))


def tokens_to_grid(x, h, w):
    N, n, C = x.shape
    return T.transpose(T.reshape(x, (N, h, w, C)), (0, 3, 1, 2))


def stage_config(d, h, w, r=2, d_k=None, ffn_expansion=4, sam_reduction=4):
    """Config for one backbone stage; falls back to r=1 when the grid is not divisible."""
    if h % r or w % r:
        r = 1
    return SsaConfig(d=d, h=h, w=w, d_k=d_k or d, d_v=d, r=r, ffn_expansion=ffn_expansion,
                     sam_reduction=sam_reduction)
