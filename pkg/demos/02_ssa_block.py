"""
The spectral-spatial aggregation block
======================================

Two token streams of shape (N, h*w, d) are stacked, reduced to a joint key
set, cross-attended, re-weighted by channel and spatial attention, and split
back into one correction per stream.
"""

import numpy as np

from s2a import ssa as S
from s2a.tensor import Tensor, backward, grad_check, tsum

rng = np.random.default_rng(0)
cfg = S.SsaConfig(d=4, h=4, w=4, r=2)
params = S.init_params(cfg, rng)
a = Tensor(rng.normal(size=(1, cfg.n, cfg.d)))
e = Tensor(rng.normal(size=(1, cfg.n, cfg.d)))
pair = S.StreamPair(a, e)

out = S.ssa_forward(pair, cfg, params)
print("tokens", cfg.n, "reduced keys per stream", cfg.m)
print("output shapes", out.a.shape, out.e.shape)

# every query attends over 2m keys, half from each stream
K, _ = S.spatial_reduce(S.stack_features(pair), cfg, params)
wa, we = S.attention_weights(pair, K, cfg, params)
print("attention rows sum to", np.unique(wa.sum(-1).round(12)))
print("share of attention on the spectral stream's keys:", wa[..., cfg.m:].sum(-1).mean().round(3))

# swapping the streams together with their weights swaps the outputs exactly
sw = S.ssa_forward(S.StreamPair(e, a), cfg, S.swap_streams(params))
print("swap exact:", np.array_equal(sw.a.data, out.e.data) and np.array_equal(sw.e.data, out.a.data))

# zero split projections switch the block off
print("zero split -> zero correction:",
      not S.ssa_forward(pair, cfg, S.SsaParams({**params, **{k: Tensor(np.zeros(v.shape)) for k, v in params.items()
                                                          if k.startswith("split_")}})).a.data.any())

# gradients of the whole block against central differences
rep = grad_check(lambda a, e, q: tsum(S.ssa_forward(S.StreamPair(a, e), cfg, {**params, "W_Q_a": q}).a),
                 [a, e, params["W_Q_a"]], max_per_tensor=16)
print(f"grad check: max relative error {rep.max_rel_error:.2e} over {rep.n_checked} coordinates")
