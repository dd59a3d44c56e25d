import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ssa_dense
from s2a import ssa as S
from s2a.detector import BackboneConfig, Detector, default_anchors
from s2a.tensor import Tensor


def _pair(rng, N, n, d, scale=1.0):
    return S.StreamPair(Tensor(scale * rng.normal(size=(N, n, d))), Tensor(scale * rng.normal(size=(N, n, d))))


def _block(seed, d=4, h=4, w=4, r=2, N=2, d_k=None):
    rng = np.random.default_rng(seed)
    cfg = S.SsaConfig(d=d, h=h, w=w, r=r, d_k=d_k)
    params = S.init_params(cfg, rng)
    for k, v in params.items():
        v.data = v.data + 0.1 * rng.normal(size=v.shape)
    return cfg, params, _pair(rng, N, cfg.n, d)


@pytest.mark.parametrize("seed", range(4))
def test_matches_dense_oracle(seed):
    cfg, params, pair = _block(seed, d=4, h=4, w=4, r=2, d_k=3 if seed % 2 else None)
    out = S.ssa_forward(pair, cfg, params)
    ra, re = ssa_dense(pair.a.data, pair.e.data, cfg, params)
    np.testing.assert_allclose(out.a.data, ra, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(out.e.data, re, rtol=1e-10, atol=1e-10)


def test_single_key_attention_copies_value():
    # one reduced token per stream, identical keys: attention averages the two values
    cfg = S.SsaConfig(d=2, h=2, w=2, r=2)
    params = S.init_params(cfg, np.random.default_rng(0))
    K = Tensor(np.ones((1, 2, 2)))
    V = Tensor(np.array([[[1.0, 3.0], [5.0, 7.0]]]))
    pair = _pair(np.random.default_rng(1), 1, 4, 2)
    out = S.cross_attention(pair, K, V, cfg, params)
    np.testing.assert_allclose(out.a.data, np.broadcast_to([3.0, 5.0], (1, 4, 2)), atol=1e-14)
    np.testing.assert_allclose(out.e.data, np.broadcast_to([3.0, 5.0], (1, 4, 2)), atol=1e-14)


def test_zero_queries_give_uniform_weights():
    cfg = S.SsaConfig(d=3, h=4, w=4, r=2)
    params = S.init_params(cfg, np.random.default_rng(2))
    params["W_Q_a"] = Tensor(np.zeros((3, 3)))
    pair = _pair(np.random.default_rng(3), 1, 16, 3)
    K, _ = S.spatial_reduce(S.stack_features(pair), cfg, params)
    wa, _ = S.attention_weights(pair, K, cfg, params)
    np.testing.assert_allclose(wa, 1.0 / (2 * cfg.m), atol=1e-15)


@given(st.integers(0, 2**31))
def test_attention_rows_sum_to_one(seed):
    cfg, params, pair = _block(seed % 1000)
    K, _ = S.spatial_reduce(S.stack_features(pair), cfg, params)
    for w in S.attention_weights(pair, K, cfg, params):
        assert w.shape == (2, cfg.n, 2 * cfg.m)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_zero_params_give_zero_output():
    cfg = S.SsaConfig(d=4, h=4, w=4)
    out = S.ssa_forward(_pair(np.random.default_rng(4), 1, 16, 4), cfg, S.zero_params(cfg))
    assert not out.a.data.any() and not out.e.data.any()


@settings(max_examples=50)
@given(
    st.integers(1, 3), st.integers(1, 6), st.sampled_from([1, 2]), st.integers(1, 3), st.integers(1, 3),
    st.integers(1, 5), st.integers(0, 2**31),
)
def test_shape_preserved(N, d, r, hb, wb, d_k, seed):
    rng = np.random.default_rng(seed)
    cfg = S.SsaConfig(d=d, h=hb * r, w=wb * r, r=r, d_k=d_k)
    out = S.ssa_forward(_pair(rng, N, cfg.n, d), cfg, S.init_params(cfg, rng))
    assert out.a.shape == out.e.shape == (N, cfg.n, d)
    assert np.all(np.isfinite(out.a.data)) and np.all(np.isfinite(out.e.data))


@pytest.mark.parametrize("seed", range(5))
def test_stream_swap_is_exact(seed):
    cfg, params, pair = _block(seed)
    out = S.ssa_forward(pair, cfg, params)
    swapped = S.ssa_forward(S.StreamPair(pair.e, pair.a), cfg, S.swap_streams(params))
    assert swapped.a.data.tobytes() == out.e.data.tobytes()
    assert swapped.e.data.tobytes() == out.a.data.tobytes()


def test_swap_is_an_involution():
    cfg, params, _ = _block(0)
    back = S.swap_streams(S.swap_streams(params))
    assert all(back[k] is params[k] for k in params)


def test_config_validation():
    with pytest.raises(ValueError):
        S.SsaConfig(d=4, h=3, w=4, r=2)
    with pytest.raises(ValueError):
        S.SsaConfig(d=4, h=4, w=4, d_v=3)
    cfg = S.SsaConfig(d=4, h=4, w=4)
    with pytest.raises(ValueError):
        S.ssa_forward(_pair(np.random.default_rng(0), 1, 8, 4), cfg, S.init_params(cfg, np.random.default_rng(0)))


def test_stage_config_falls_back_to_r1():
    assert S.stage_config(8, 3, 3).r == 1
    assert S.stage_config(8, 4, 4).r == 2


def zero_split_equals_plain(seed):
    """Detector with SSA blocks whose split weights are zero vs. the plain two-stream detector."""
    rng = np.random.default_rng(seed)
    chans = (2, 2, 4, 4, 8)
    anchors = default_anchors(0.25)
    ssa = Detector.create(BackboneConfig(chans, ssa_stages=(3, 4, 5)), anchors, 2, (32, 32), seed=seed)
    plain = Detector.create(BackboneConfig(chans, ssa_stages=()), anchors, 2, (32, 32), seed=seed + 1)
    for k, v in ssa.params.items():
        if k.startswith("ssa") and ".split_" in k:
            v.data = np.zeros_like(v.data)
    plain.load_state({k: v for k, v in ssa.state().items() if not k.startswith("ssa")})
    sa, se = rng.uniform(-0.5, 0.5, size=(2, 2, 3, 32, 32))
    ra, rb = ssa.forward(sa, se), plain.forward(sa, se)
    return all(x.data.tobytes() == y.data.tobytes() for x, y in zip(ra, rb))


@pytest.mark.parametrize("seed", range(3))
def test_zero_split_weights_reduce_to_plain_two_stream(seed):
    assert zero_split_equals_plain(seed)
