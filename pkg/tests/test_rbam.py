import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdhnet import oracles, rbam
from bdhnet.numerics import ad, finite_diff_check


def rng(seed):
    return np.random.default_rng(seed)


def consts(d):
    return {k: ad.const(np.asarray(v, dtype=np.float64)) for k, v in d.items()}


# ---------------------------------------------------------------- temporal sum

def test_temporal_sum_zero():
    assert not rbam.temporal_sum(np.zeros((12, 4, 4, 3))).value.any()


def test_temporal_sum_counts():
    s = np.zeros((12, 4, 4, 1))
    s[:, 2, 1, 0] = 1.0
    out = rbam.temporal_sum(s).value
    assert out[2, 1] == 12.0 and out.sum() == 12.0


def test_temporal_sum_order_free():
    s = (rng(0).uniform(size=(12, 4, 4, 3)) > 0.5).astype(float)
    perm = rng(1).permutation(12)
    assert np.array_equal(rbam.temporal_sum(s).value, rbam.temporal_sum(s[perm]).value)


# ---------------------------------------------------------------- deformable sum

def test_zero_offsets_give_box_filter():
    s = rng(2).uniform(size=(9, 7))
    got = rbam.deform_sum_offsets(s, np.zeros((9, 7, 18))).value
    assert np.max(np.abs(got - oracles.box_sum_replicate(s))) <= 1e-12


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_uniform_field_offset_invariant(seed):
    off = rng(seed).uniform(-1, 1, size=(10, 10, 18))
    got = rbam.deform_sum_offsets(np.ones((10, 10)), off).value
    np.testing.assert_allclose(got[2:-2, 2:-2], 9.0, rtol=0, atol=1e-12)


def test_random_offsets_match_loop_oracle():
    s = rng(3).uniform(size=(6, 8))
    off = rng(4).uniform(-3, 3, size=(6, 8, 18))
    got = rbam.deform_sum_offsets(s, off).value
    assert np.max(np.abs(got - oracles.deform_sum(s, off))) <= 1e-10


def test_offset_head_zero_init_is_rigid():
    feat = rng(5).normal(size=(6, 6, 4))
    p = consts({"off_w": np.zeros((3, 3, 4, 18)), "off_b": np.zeros(18)})
    s = rng(6).uniform(size=(6, 6))
    assert np.array_equal(rbam.deform_sum(s, feat, p).value, rbam.deform_sum_offsets(s, np.zeros((6, 6, 18))).value)


def test_deform_sum_rejects_bad_offsets():
    with pytest.raises(ValueError):
        rbam.deform_sum_offsets(np.zeros((4, 4)), np.zeros((4, 4, 9)))


# ---------------------------------------------------------------- normalisation

def test_minmax_example():
    assert rbam.minmax_norm(np.array([1.0, 3.0, 5.0])).value.tolist() == [0.0, 0.5, 1.0]


def test_minmax_constant():
    out = rbam.minmax_norm(np.full((3, 3), 2.5)).value
    assert not out.any()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), a_exp=st.integers(-3, 3), b=st.integers(-8, 8))
def test_minmax_affine_invariance_exact(seed, a_exp, b):
    # dyadic inputs, power-of-two scale and integer shift: every step is exact
    x = rng(seed).integers(0, 64, size=(5, 5)).astype(float) / 4
    assert np.array_equal(rbam.minmax_norm(x).value, rbam.minmax_norm(2.0 ** a_exp * x + b).value)


def test_minmax_gradient():
    x = rng(7).uniform(size=(4, 4))
    up = rng(8).normal(size=(4, 4))
    v = ad.param(x)
    ad.backward(rbam.minmax_norm(v), up)
    assert finite_diff_check(lambda a: float(np.sum(rbam.minmax_norm(a).value * up)), x, v.grad) < 1e-6


# ---------------------------------------------------------------- threshold map

def thr_params(seed, c=4, hidden=4, zero=False):
    r = rng(seed)
    f = (lambda *s: np.zeros(s)) if zero else (lambda *s: r.normal(size=s))
    return {"thr1_w": f(3, 3, c, hidden), "thr1_b": f(hidden), "thr2_w": f(3, 3, hidden, 1), "thr2_b": f(1)}


def test_threshold_map_zero_weights():
    out = rbam.threshold_map(rng(0).normal(size=(5, 5, 4)), consts(thr_params(0, zero=True))).value
    assert not out.any()


def test_threshold_map_matches_conv_oracle():
    feat = rng(1).normal(size=(6, 5, 4))
    p = thr_params(2)
    h = np.maximum(oracles.conv2d(feat, p["thr1_w"], p["thr1_b"], 1, 1), 0)
    raw = oracles.conv2d(h, p["thr2_w"], p["thr2_b"], 1, 1)[:, :, 0]
    ref = (raw - raw.min()) / (raw.max() - raw.min())
    got = rbam.threshold_map(feat, consts(p)).value
    assert np.max(np.abs(got - ref)) <= 1e-10
    assert got.min() >= 0 and got.max() <= 1


# ---------------------------------------------------------------- mask

def test_mask_examples():
    assert rbam.make_mask(np.array([0.7]), np.array([0.5])).value[0] == 1.0
    s = rng(3).uniform(size=(4, 4))
    assert np.all(rbam.make_mask(s, s).value == 1.0)
    assert np.all(rbam.make_mask(s, np.zeros((4, 4))).value == 1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_mask_equals_comparator(seed):
    s, t = rng(seed).uniform(size=(2, 6, 6))
    t[0, 0] = s[0, 0]
    m = rbam.make_mask(s, t).value
    assert np.array_equal(m, np.where(s >= t, 1.0, 0.0))


def test_mask_straight_through_window():
    s = ad.param(np.array([0.9, 0.2, 0.6]))
    t = ad.const(np.array([0.0, 0.9, 0.5]))
    ad.backward(rbam.make_mask(s, t), np.ones(3))
    assert s.grad.tolist() == [0.0, 0.0, 1.0]


def test_smoothed_mask_is_sigmoid():
    s, t = rng(4).uniform(size=(2, 5))
    m = rbam.make_mask(s, t, smooth=True, alpha=0.25).value
    np.testing.assert_allclose(m, 1 / (1 + np.exp(-(s - t) / 0.25)), rtol=0, atol=1e-15)


def test_mask_affine_invariant_in_local_sum():
    s_local = rng(5).integers(0, 40, size=(6, 6)).astype(float)
    t_map = rng(6).uniform(size=(6, 6))
    m1 = rbam.make_mask(rbam.minmax_norm(s_local), t_map).value
    m2 = rbam.make_mask(rbam.minmax_norm(4.0 * s_local + 16.0), t_map).value
    assert np.array_equal(m1, m2)


# ---------------------------------------------------------------- temporal conv

def test_temporal_conv_by_hand():
    r = rng(7)
    s = r.normal(size=(5, 2, 3, 2))
    w, b, mix = r.normal(size=(3, 2)), r.normal(size=2), r.normal(size=5)
    got = rbam.temporal_conv(s, consts({"tc_w": w, "tc_b": b, "tc_mix": mix})).value
    pad = np.concatenate([np.zeros((1, 2, 3, 2)), s, np.zeros((1, 2, 3, 2))])
    ref = sum(mix[t] * (w[0] * pad[t] + w[1] * pad[t + 1] + w[2] * pad[t + 2] + b) for t in range(5))
    assert np.max(np.abs(got - ref)) <= 1e-12


# ---------------------------------------------------------------- attention

def attn_params(seed, c):
    r = rng(seed)
    return consts({f"{d}_{p}": r.normal(size=(c, c)) / np.sqrt(c) for d in ("ie", "ei") for p in "qkvo"})


def test_gate_identities_exact():
    r = rng(8)
    i, e = r.normal(size=(2, 10, 10, 8))
    p = attn_params(9, 8)
    i0, e0 = rbam.masked_cross_attention(i, e, np.zeros((10, 10)), p, heads=4, window=4)
    i1, e1 = rbam.masked_cross_attention(i, e, np.ones((10, 10)), p, heads=4, window=4)
    full_i, full_e = rbam.masked_cross_attention(i, e, None, p, heads=4, window=4)
    assert np.array_equal(i0.value, i) and np.array_equal(e1.value, e)
    assert np.array_equal(e0.value, full_e.value) and np.array_equal(i1.value, full_i.value)


def test_partial_mask_gates_per_pixel():
    r = rng(10)
    i, e = r.normal(size=(2, 8, 8, 4))
    m = (r.uniform(size=(8, 8)) > 0.5).astype(float)
    ip, ep = rbam.masked_cross_attention(i, e, m, attn_params(11, 4), heads=2)
    assert np.array_equal(ip.value[m == 0], i[m == 0])
    assert np.array_equal(ep.value[m == 1], e[m == 1])


def test_single_window_matches_attention_oracle():
    r = rng(12)
    c, heads = 4, 2
    i, e = r.normal(size=(2, 2, 2, c))
    p = attn_params(13, c)
    ip, _ = rbam.masked_cross_attention(i, e, None, p, heads=heads, window=8)
    q = i.reshape(4, c) @ p["ie_q"].value
    k = e.reshape(4, c) @ p["ie_k"].value
    v = e.reshape(4, c) @ p["ie_v"].value
    d = c // heads
    heads_out = [oracles.attention(q[:, h * d:(h + 1) * d].tolist(), k[:, h * d:(h + 1) * d].tolist(),
                                   v[:, h * d:(h + 1) * d].tolist()) for h in range(heads)]
    ref = i.reshape(4, c) + np.concatenate(heads_out, axis=1) @ p["ie_o"].value
    assert np.max(np.abs(ip.value.reshape(4, c) - ref)) <= 1e-8


def test_windows_are_independent():
    r = rng(14)
    i, e = r.normal(size=(2, 8, 8, 4))
    p = attn_params(15, 4)
    base, _ = rbam.masked_cross_attention(i, e, None, p, heads=2, window=4)
    e2 = e.copy()
    e2[4:, 4:] += 1.0                                # touch only the bottom-right window
    moved, _ = rbam.masked_cross_attention(i, e2, None, p, heads=2, window=4)
    assert np.array_equal(base.value[:4], moved.value[:4])
    assert not np.array_equal(base.value[4:, 4:], moved.value[4:, 4:])


def test_ragged_windows_keep_shape():
    r = rng(16)
    i, e = r.normal(size=(2, 10, 6, 4))
    ip, ep = rbam.masked_cross_attention(i, e, None, attn_params(17, 4), heads=2, window=4)
    assert ip.shape == (10, 6, 4) and ep.shape == (10, 6, 4)


def test_attention_rejects_bad_heads():
    with pytest.raises(ValueError):
        rbam.masked_cross_attention(np.zeros((4, 4, 6)), np.zeros((4, 4, 6)), None, attn_params(0, 6), heads=4)


# ---------------------------------------------------------------- fuse

def fuse_params(c, seed=None):
    r = rng(seed if seed is not None else 0)
    f = (lambda *s: r.normal(size=s) * 0.5) if seed is not None else (lambda *s: np.zeros(s))
    return {"mlp1_w": f(2 * c, 2 * c), "mlp1_b": f(2 * c), "mlp2_w": f(2 * c, 2 * c), "mlp2_b": f(2 * c),
            "fconv_w": f(3, 3, 2 * c, c), "fconv_b": f(c)}


def test_fuse_projection_selects_image_branch():
    c = 3
    p = fuse_params(c)
    p["fconv_w"][1, 1, :c, :] = np.eye(c)
    i, e = rng(18).normal(size=(2, 5, 5, c))
    assert np.array_equal(rbam.fuse(i, e, consts(p)).value, i)


def test_fuse_zero_weights_bias_only():
    c = 3
    p = fuse_params(c)
    p["fconv_b"] = np.array([0.5, -1.0, 2.0])
    i, e = rng(19).normal(size=(2, 4, 4, c))
    assert np.array_equal(rbam.fuse(i, e, consts(p)).value, np.broadcast_to(p["fconv_b"], (4, 4, c)))


def test_fuse_matches_composed_oracle():
    c = 2
    p = fuse_params(c, seed=20)
    i, e = rng(21).normal(size=(2, 5, 4, c))
    x = np.concatenate([i, e], axis=-1)
    hidden = np.maximum(x @ p["mlp1_w"] + p["mlp1_b"], 0)
    ref = oracles.conv2d(x + hidden @ p["mlp2_w"] + p["mlp2_b"], p["fconv_w"], p["fconv_b"], 1, 1)
    assert np.max(np.abs(rbam.fuse(i, e, consts(p)).value - ref)) <= 1e-10
