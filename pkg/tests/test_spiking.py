import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdhnet import oracles, spiking
from bdhnet.numerics import TraceError, ad

P = spiking.LIFParams(tau=2.0, v_th=1.0)


def step(u, c, params=P):
    st_ = spiking.NeuronState(ad.const(np.array([u])), ad.const(np.zeros(1)))
    return spiking.lif_step(st_, np.array([c]), params)


def test_lif_fires_and_soft_resets():
    s = step(0.0, 1.2)
    assert s.s.value[0] == 1.0 and s.u.value[0] == pytest.approx(0.2, abs=1e-15)


def test_lif_below_threshold():
    s = step(0.0, 0.4)
    assert s.s.value[0] == 0.0 and s.u.value[0] == 0.4


def run_constant(c, steps=60):
    state = spiking.NeuronState.zeros((1,))
    spikes, pots = [], []
    for _ in range(steps):
        state = spiking.lif_step(state, np.array([c]), P)
        spikes.append(state.s.value[0])
        pots.append(state.u.value[0])
    return spikes, pots


def test_constant_subthreshold_current_converges():
    spikes, pots = run_constant(0.4)
    assert sum(spikes) == 0 and pots[-1] == pytest.approx(0.8, abs=1e-12)


def test_constant_current_spike_train_matches_scalar_recurrence():
    spikes, pots = run_constant(0.6)
    ref_s, ref_u = oracles.lif_scalar(0.0, [0.6] * 60, 2.0, 1.0)
    assert spikes == ref_s and np.max(np.abs(np.array(pots) - ref_u)) <= 1e-12
    fire = np.flatnonzero(spikes)
    assert len(fire) > 3 and len(set(np.diff(fire[2:]))) == 1     # periodic once settled


def test_lif_params_validated():
    for bad in (dict(tau=1.0), dict(v_th=0.0), dict(alpha=-1.0)):
        with pytest.raises(ValueError):
            spiking.LIFParams(**bad)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), tau=st.floats(1.1, 8.0))
def test_leak_contraction(seed, tau):
    params = spiking.LIFParams(tau=tau, v_th=1e6)
    u = np.random.default_rng(seed).normal(size=20)
    state = spiking.NeuronState(ad.const(u), ad.const(np.zeros(20)))
    for _ in range(5):
        prev = np.max(np.abs(state.u.value))
        state = spiking.lif_step(state, np.zeros(20), params)
        assert np.max(np.abs(state.u.value)) <= (1 - 1 / tau) * prev + 1e-15


def test_spikes_binary():
    rng = np.random.default_rng(0)
    state = spiking.NeuronState.zeros((50,))
    for _ in range(12):
        state = spiking.lif_step(state, rng.uniform(-1, 2, 50), P)
        assert set(np.unique(state.s.value)) <= {0.0, 1.0}


# ---------------------------------------------------------------- NCM

def zero_enc(c=2):
    return {"phi_w": ad.const(np.zeros((1, 1, c, c))), "phi_b": ad.const(np.zeros(c)),
            "psi_w": ad.const(np.zeros((3, 3, c, c))), "psi_b": ad.const(np.zeros(c))}


def test_zero_configurator_gives_half_threshold():
    f = np.random.default_rng(1).normal(size=(4, 4, 2))
    cfg = spiking.ncm_configure(f, f, zero_enc())
    assert not cfg.v_init.value.any() and np.all(cfg.v_th_map.value == 0.5)


def test_threshold_extremes():
    th = spiking.threshold_from_potential(ad.const(np.array([10.0, -50.0, -800.0, 800.0]))).value
    assert th[0] == pytest.approx(4.5398e-5, rel=1e-4)
    assert th[1] == pytest.approx(1.0) and th[1] < 1.0 and th[2] < 1.0
    assert th[3] > 0.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-700, 700), min_size=1, max_size=50))
def test_threshold_strictly_inside_unit_interval(vals):
    v = np.array(vals)
    th = spiking.threshold_from_potential(ad.const(v)).value
    assert np.all((th > 0) & (th < 1))
    assert np.max(np.abs(th - (1 - 1 / (1 + np.exp(-v))))) <= 1e-6


def test_first_spike_root():
    assert oracles.first_spike_root() == pytest.approx(0.4011, abs=5e-5)


def configured(v):
    v = ad.const(np.asarray(v, dtype=np.float64))
    return spiking.NCMConfig(v, spiking.threshold_from_potential(v))


def test_firing_at_t0_follows_root():
    v_star = oracles.first_spike_root()
    v = np.concatenate([np.linspace(-3, 3, 2001), [v_star - 1e-9, v_star + 1e-9]])
    run = spiking.ncm_lif_run(configured(v), [np.zeros_like(v)], P)
    assert np.array_equal(run.spikes[0].value == 1.0, v >= v_star)


def test_zero_init_zero_current_never_fires():
    run = spiking.ncm_lif_run(configured(np.zeros(3)), [np.zeros(3)] * 12, P)
    assert all(not s.value.any() for s in run.spikes)


def test_large_init_matches_scalar_oracle():
    run = spiking.ncm_lif_run(configured([5.0]), [np.zeros(1)] * 12, P)
    ref, u_ref = oracles.configured_lif_scalar(5.0, [0.0] * 12, 2.0)
    assert [s.value[0] for s in run.spikes] == ref
    assert run.spikes[0].value[0] == 1.0 and sum(ref) > 1
    assert abs(run.u_final.value[0] - u_ref) <= 1e-12


def test_t0_current_is_ignored():
    a = spiking.ncm_lif_run(configured([0.1]), [np.array([5.0]), np.array([0.2])], P)
    b = spiking.ncm_lif_run(configured([0.1]), [np.array([-5.0]), np.array([0.2])], P)
    assert np.array_equal(a.u_final.value, b.u_final.value)


def test_tie_fires():
    cfg = spiking.NCMConfig(ad.const(np.array([0.5])), ad.const(np.array([0.5])))
    assert spiking.ncm_lif_run(cfg, [np.zeros(1)], P).spikes[0].value[0] == 1.0


# ---------------------------------------------------------------- SNN block

def block_weights(rng, cin=1, c=4, scale=0.5):
    def w(*shape):
        return ad.param(rng.uniform(-scale, scale, size=shape))
    return {"syn1_w": w(3, 3, cin, c), "syn1_b": w(c), "syn2_w": w(3, 3, c, c), "syn2_b": w(c),
            "phi_w": w(1, 1, c, c), "phi_b": w(c), "psi_w": w(3, 3, c, c), "psi_b": w(c)}


def test_zero_block_zero_spikes():
    w = {k: ad.const(np.zeros(v.shape)) for k, v in block_weights(np.random.default_rng(0)).items()}
    out = spiking.snn_block(np.zeros((6, 5, 5, 1)), np.zeros((5, 5, 4)), w, P)
    assert not out.spikes.value.any()


def test_block_output_binary():
    rng = np.random.default_rng(1)
    out = spiking.snn_block(rng.normal(size=(12, 6, 6, 1)), rng.normal(size=(6, 6, 4)),
                            block_weights(rng, scale=1.0), P)
    assert set(np.unique(out.spikes.value)) <= {0.0, 1.0}
    assert out.spikes.value.any()


def test_ncm_changes_layer1_only_where_threshold_moves():
    rng = np.random.default_rng(2)
    w = block_weights(rng, scale=1.0)
    w["psi_w"] = ad.const(np.zeros((3, 3, 4, 4)))
    w["psi_b"] = ad.const(np.zeros(4))
    w["phi_b"] = ad.const(np.zeros(4))
    img = rng.normal(size=(6, 6, 4))
    img[:, :3] = 0.0                                   # V_init = 0 on the left half
    x = rng.normal(size=(12, 6, 6, 1))
    on = spiking.snn_block(x, img, w, P, ncm_enabled=True)
    off = spiking.snn_block(x, img, w, P, ncm_enabled=False)
    moved = on.config1.v_th_map.value != 0.5
    diff = np.any(on.s1.value != off.s1.value, axis=0)
    assert not diff[~moved].any()
    assert diff[moved].any()


def test_surrogate_gradient_decays_far_from_threshold():
    x = ad.param(np.array([5.0, -5.0, 0.0]))
    ad.backward(ad.sum_(ad.heaviside_surrogate(x, 0.25)))
    assert np.all(np.abs(x.grad[:2]) < 1e-6) and x.grad[2] == pytest.approx(1.0)


def test_surrogate_backward_zero_upstream():
    rng = np.random.default_rng(3)
    w = block_weights(rng)
    out = spiking.snn_block(rng.normal(size=(4, 5, 5, 1)), rng.normal(size=(5, 5, 4)), w, P)
    grads = spiking.surrogate_backward(out.spikes, np.zeros(out.spikes.shape), w)
    assert all(not g.any() for g in grads.values())


def test_surrogate_backward_nonzero_and_needs_trace():
    rng = np.random.default_rng(4)
    w = block_weights(rng, scale=1.0)
    out = spiking.snn_block(rng.normal(size=(4, 5, 5, 1)), rng.normal(size=(5, 5, 4)), w, P)
    grads = spiking.surrogate_backward(out.spikes, np.ones(out.spikes.shape), w)
    assert np.abs(grads["syn1_w"]).sum() > 0 and np.abs(grads["phi_w"]).sum() > 0
    with pytest.raises(TraceError):
        spiking.surrogate_backward(ad.const(np.zeros(3)), np.ones(3), w)


def test_smoothed_block_gradcheck():
    from bdhnet.numerics import finite_diff_check
    rng = np.random.default_rng(5)
    w = block_weights(rng, scale=0.8)
    x, img = rng.normal(size=(5, 5, 5, 1)), rng.normal(size=(5, 5, 4))
    up = rng.normal(size=(5, 5, 5, 4))

    def f(_):
        return float(np.sum(spiking.snn_block(x, img, w, P, smooth=True).spikes.value * up))
    out = spiking.snn_block(x, img, w, P, smooth=True)
    grads = spiking.surrogate_backward(out.spikes, up, w)
    for name in ("syn1_w", "syn2_w", "phi_w", "psi_b"):
        coords = np.random.default_rng(6).choice(w[name].value.size, min(6, w[name].value.size), replace=False)
        assert finite_diff_check(f, w[name].value, grads[name], coords=coords) < 1e-4
