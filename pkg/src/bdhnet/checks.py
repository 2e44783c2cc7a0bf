"""Named verification checks shared by ``bdhnet selftest``, ``bdhnet gradcheck`` and the test suite.

Every check returns a :class:`CheckResult`; none of them raise on failure.
"""

from __future__ import annotations

import re
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import events as ev
from . import io as fio
from . import metrics, network, oracles, rbam, spiking
from .numerics import Rng, ad, finite_diff_check, kernels, sample_coords


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    limit: float
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: value={self.value:.6g} limit={self.limit:.6g} " \
               f"time={self.seconds:.2f}s {self.detail}".rstrip()


def _timed(fn):
    def run(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


# ---------------------------------------------------------------- 1. physics

EDI_MOTIONS = ("bar", "edge", "texture", "bar", "texture")


@_timed
def edi_roundtrip(n_scenes: int = 5, size: int = 64, frames: int = 9, contrast: float = 0.2,
                  min_psnr: float = 40.0, seed: int = 0) -> CheckResult:
    rng = Rng(seed)
    t0 = time.perf_counter()
    scores = []
    for i in range(n_scenes):
        motion = EDI_MOTIONS[i % len(EDI_MOTIONS)]
        vel = 0.05 if motion == "edge" else 1.0 + 0.5 * i
        seq = ev.synthesize_scene(ev.SceneSpec(size, size, frames, motion, vel), rng.split(f"edi{i}"))
        blurry = ev.accumulate_blur(seq)
        stream = ev.generate_events(seq, contrast)
        rec = ev.edi_reconstruct(blurry, stream, samples=frames)
        scores.append(metrics.psnr(rec, seq.latent))
    elapsed = time.perf_counter() - t0
    worst = min(scores)
    return CheckResult("edi_roundtrip", worst >= min_psnr and elapsed < 10.0, worst, min_psnr,
                       detail=f"psnr={['%.2f' % s for s in scores]} runtime_limit=10s")


# ---------------------------------------------------------------- 2. gradients

GRAD_GROUPS = {
    "encoder": r"\.enc\.",
    "snn_synapses": r"\.snn\.syn",
    "snn_ncm": r"\.snn\.(phi|psi)_",
    "rbam_offsets": r"\.rbam\.off_",
    "rbam_threshold_temporal": r"\.rbam\.(thr|tc)",
    "attention": r"\.rbam\.(ie|ei)_",
    "fusion": r"\.rbam\.(mlp|fconv)",
    "decoder": r"\.dec\.",
}


def gradcheck_model(seed: int = 0, size: int = 16, base_channels: int = 8, bins: int = 12):
    """Small float64 model with every parameter jittered away from its (partly zero) init.

    Zero-initialised offsets would put every sample exactly on the bilinear
    kinks, and zero output projections would hide the attention gradients.
    """
    cfg = network.ablation_config("full", base_channels=base_channels, bins=bins, seed=seed)
    sample = network.toy_dataset(n=1, size=size, bins=bins, levels=cfg.levels, seed=seed)[0]
    model = network.build(cfg, dtype=np.float64)
    rng = Rng(seed).split("jitter")
    for name, p in model.params.items():
        p.value = p.value + rng.split(name).uniform(-0.2, 0.2, size=p.value.shape)
    return model, sample


def gradcheck(n_coords: int = 30, eps: float = 1e-5, min_abs: float = 1e-5, limit: float = 1e-4,
              seed: int = 0, groups: dict | None = None) -> list[CheckResult]:
    """End-to-end central-difference check of the smoothed network, per parameter group.

    Coordinates with ``|grad| <= min_abs`` are skipped: at ``eps = 1e-5`` the
    difference quotient carries about 1e-10 of round-off, which would swamp
    their relative error.
    """
    model, sample = gradcheck_model(seed)
    loss, _ = network.sample_loss(model, sample, smooth=True)
    ad.zero_grad(model.params.values())
    ad.backward(loss, wrt=model.params.values())
    grads = {k: v.grad.copy() for k, v in model.params.items()}

    def objective(_):
        return float(network.sample_loss(model, sample, smooth=True)[0].value)

    gen = np.random.default_rng(seed)
    results = []
    for group, pattern in (groups or GRAD_GROUPS).items():
        t0 = time.perf_counter()
        names = [k for k in model.params if re.search(pattern, k)]
        flat = np.concatenate([grads[k].ravel() for k in names])
        starts = np.cumsum([0] + [grads[k].size for k in names])
        picked = sample_coords(flat, n_coords, gen, min_abs=min_abs)
        worst = 0.0
        for i in picked:
            j = int(np.searchsorted(starts, i, side="right") - 1)
            k = names[j]
            err = finite_diff_check(objective, model.params[k].value, grads[k], eps=eps,
                                    coords=[int(i - starts[j])])
            worst = max(worst, err)
        ok = worst < limit and len(picked) >= n_coords
        results.append(CheckResult(f"gradcheck[{group}]", ok, worst, limit,
                                   time.perf_counter() - t0, f"coords={len(picked)}"))
    return results


# ---------------------------------------------------------------- 3-4. neurons

@_timed
def ncm_firing_law(n: int = 10_000, seed: int = 0) -> CheckResult:
    v_star = oracles.first_spike_root()
    v = Rng(seed).uniform(-4.0, 4.0, size=n)
    cfg = spiking.NCMConfig(ad.const(v), spiking.threshold_from_potential(ad.const(v)))
    run = spiking.ncm_lif_run(cfg, [np.zeros(n)], spiking.LIFParams())
    fired = run.spikes[0].value == 1.0
    mismatches = int(np.sum(fired != (v >= v_star)))
    return CheckResult("ncm_firing_law", mismatches == 0, mismatches, 0,
                       detail=f"v*={v_star:.6f}")


@_timed
def lif_equivalence(n: int = 1000, steps: int = 12, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    rng = Rng(seed)
    params = spiking.LIFParams(tau=2.0, v_th=1.0)
    currents = rng.split("c").uniform(-0.5, 1.5, size=(steps, n))
    state = spiking.NeuronState.zeros((n,))
    u_vec, s_vec = [], []
    for t in range(steps):
        state = spiking.lif_step(state, currents[t], params)
        u_vec.append(state.u.value)
        s_vec.append(state.s.value)
    u_vec, s_vec = np.array(u_vec), np.array(s_vec)
    worst = 0.0
    for i in range(n):
        s_ref, u_ref = oracles.lif_scalar(0.0, currents[:, i].tolist(), params.tau, params.v_th)
        worst = max(worst, float(np.max(np.abs(u_vec[:, i] - u_ref))),
                    float(np.max(np.abs(s_vec[:, i] - s_ref))))
    return CheckResult("lif_equivalence", worst <= tol, worst, tol)


# ---------------------------------------------------------------- 5-6. RBAM

@_timed
def mask_and_gates(seed: int = 0) -> CheckResult:
    rng = Rng(seed)
    failures = []
    s = rng.split("s").uniform(size=(16, 16))
    t = rng.split("t").uniform(size=(16, 16))
    t[0, :4] = s[0, :4]                                   # ties must fire
    m = rbam.make_mask(s, t).value
    if not np.array_equal(m, (s >= t).astype(np.float64)):
        failures.append("mask")
    c = 8
    img = rng.split("i").normal(size=(16, 16, c))
    evt = rng.split("e").normal(size=(16, 16, c))
    attn = {}
    for d in ("ie", "ei"):
        for p in "qkvo":
            attn[f"{d}_{p}"] = ad.const(rng.split(d + p).normal(size=(c, c)))
    i_p, _ = rbam.masked_cross_attention(img, evt, np.zeros((16, 16)), attn)
    if not np.array_equal(i_p.value, img):
        failures.append("M=0 image gate")
    _, e_p = rbam.masked_cross_attention(img, evt, np.ones((16, 16)), attn)
    if not np.array_equal(e_p.value, evt):
        failures.append("M=1 event gate")
    # dyadic values keep the affine map exact in binary floating point
    x = rng.split("x").integers(0, 256, size=(16, 16)).astype(np.float64) / 8.0
    if not np.array_equal(rbam.minmax_norm(x).value, rbam.minmax_norm(4.0 * x + 3.0).value):
        failures.append("minmax affine")
    return CheckResult("mask_and_gates", not failures, len(failures), 0, detail=",".join(failures))


@_timed
def deformable_degeneracy(seed: int = 0, size: int = 12) -> CheckResult:
    rng = Rng(seed)
    s = rng.split("s").uniform(size=(size, size))
    zero = rbam.deform_sum_offsets(s, np.zeros((size, size, 18))).value
    err_box = float(np.max(np.abs(zero - oracles.box_sum_replicate(s))))
    worst = 0.0
    for trial in range(3):
        off = rng.split(f"o{trial}").uniform(-2.5, 2.5, size=(size, size, 18))
        got = rbam.deform_sum_offsets(s, off).value
        worst = max(worst, float(np.max(np.abs(got - oracles.deform_sum(s, off)))))
    ok = err_box <= 1e-12 and worst <= 1e-10
    return CheckResult("deformable_degeneracy", ok, max(err_box, worst), 1e-10,
                       detail=f"box_err={err_box:.3g} (limit 1e-12) random_err={worst:.3g} (limit 1e-10)")


# ---------------------------------------------------------------- 7. training

@_timed
def toy_training(iterations: int = 500, margin_db: float = 3.0, ablation: bool = True,
                 seed: int = 0, keep: dict | None = None) -> CheckResult:
    """``keep``, when given, receives the trained models and the dataset."""
    data = network.toy_dataset(seed=seed)
    base = float(np.mean([metrics.psnr(s.pyramid[0], s.target) for s in data]))
    t0 = time.perf_counter()
    full, curve = network.train(network.build(network.ablation_config("full", seed=seed)), data,
                                network.TrainOptions(iterations=iterations, seed=seed))
    full_psnr = float(np.mean([metrics.psnr(p, s.target) for p, s in zip(network.evaluate(full, data), data)]))
    elapsed = time.perf_counter() - t0
    detail = f"blurry={base:.2f}dB full={full_psnr:.2f}dB"
    ok = full_psnr >= base + margin_db
    if ablation:
        plain, _ = network.train(network.build(network.ablation_config("event_add", seed=seed)), data,
                                 network.TrainOptions(iterations=iterations, seed=seed))
        plain_psnr = float(np.mean([metrics.psnr(p, s.target)
                                    for p, s in zip(network.evaluate(plain, data), data)]))
        ok = ok and full_psnr >= plain_psnr
        detail += f" event_add={plain_psnr:.2f}dB"
        elapsed = time.perf_counter() - t0
    ok = ok and elapsed < 600.0
    if keep is not None:
        keep.update(full=full, data=data, curve=curve)
    return CheckResult("toy_training", ok, full_psnr - base, margin_db, detail=detail)


def _dilate(region: np.ndarray, radius: int) -> np.ndarray:
    out = np.zeros_like(region)
    h, w = region.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy * dy + dx * dx > radius * radius:
                continue
            shifted = np.zeros_like(region)
            shifted[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
                region[max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
            out |= shifted
    return out


@_timed
def mask_centroid(model, n_scenes: int = 10, size: int = 32, radius: int = 3, min_rate: float = 0.9,
                  seed: int = 100) -> CheckResult:
    """Centroid of {M = 1} at full resolution falls inside the dilated swept region of a moving bar."""
    cfg = model.config
    hits = 0
    for i in range(n_scenes):
        spec = ev.SceneSpec(size, size, 9, "bar", 1.0 + 0.5 * (i % 2))
        seq = ev.synthesize_scene(spec, Rng(seed).split(f"bar{i}"))
        sample = network.make_sample(seq, 0.2, cfg.bins, cfg.levels)
        m = network.forward(model, sample).levels[0].mask.mask.value
        if not m.any():
            continue
        region = _dilate(seq.frames.max(axis=0) != seq.frames.min(axis=0), radius)
        ys, xs = np.nonzero(m >= 0.5)
        cy, cx = int(round(ys.mean())), int(round(xs.mean()))
        hits += bool(region[cy, cx])
    rate = hits / n_scenes
    return CheckResult("mask_centroid", rate >= min_rate, rate, min_rate, detail=f"hits={hits}/{n_scenes}")


# ---------------------------------------------------------------- 8. determinism

def _synth_bytes(seed: int) -> bytes:
    seq = ev.synthesize_scene(ev.SceneSpec(24, 24, 9, "texture", 1.0), Rng(seed))
    stream = ev.generate_events(seq, 0.2)
    blurry = ev.accumulate_blur(seq)
    return (fio.encode_ten(seq.frames.astype(np.float32)) + fio.encode_ten(blurry.astype(np.float32))
            + stream.t.tobytes() + stream.x.tobytes() + stream.y.tobytes() + stream.p.tobytes())


@_timed
def determinism_roundtrips(seed: int = 0) -> CheckResult:
    failures = []
    if _synth_bytes(seed) != _synth_bytes(seed):
        failures.append("synth")
    data = network.toy_dataset(n=2, size=16, bins=4, seed=seed)
    cfg = network.ablation_config("full", base_channels=8, bins=4, seed=seed)
    opts = network.TrainOptions(iterations=3, seed=seed)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        runs = []
        for k in range(2):
            model, curve = network.train(network.build(cfg), data, opts)
            network.save(model, tmp / f"m{k}.tck")
            runs.append((curve, (tmp / f"m{k}.tck").read_bytes()))
        if runs[0][0] != runs[1][0]:
            failures.append("loss curve")
        if runs[0][1] != runs[1][1]:
            failures.append("checkpoint bytes")
        loaded = network.load(tmp / "m0.tck", cfg)
        if any(not np.array_equal(loaded.params[k].value, v.value) for k, v in model.params.items()):
            failures.append("checkpoint load")
        network.save(loaded, tmp / "again.tck")
        if (tmp / "again.tck").read_bytes() != runs[0][1]:
            failures.append("checkpoint resave")

        arr = Rng(seed).normal(size=(3, 5, 2)).astype(np.float32)
        fio.write_ten(tmp / "a.ten", arr)
        back = fio.read_ten(tmp / "a.ten")
        if back.dtype != np.float32 or not np.array_equal(back, arr):
            failures.append("ten")
        seq = ev.synthesize_scene(ev.SceneSpec(16, 16, 9, "bar", 1.0), Rng(seed))
        stream = ev.generate_events(seq, 0.2)
        fio.write_evt(tmp / "a.evt", stream)
        got = fio.read_evt(tmp / "a.evt")
        if not all(np.array_equal(getattr(got, f), getattr(stream, f)) for f in "txyp") \
                or got.sensor_size != stream.sensor_size:
            failures.append("evt")
        img = Rng(seed).integers(0, 256, size=(7, 9)).astype(np.uint8)
        fio.write_pgm(tmp / "a.pgm", img)
        if not np.array_equal(fio.read_pgm(tmp / "a.pgm"), img):
            failures.append("pgm")
        for bins in (1, 5, 12):
            if float(ev.voxelize(stream, bins).grid.sum()) != float(stream.p.sum()):
                failures.append(f"voxel bins={bins}")
    return CheckResult("determinism_roundtrips", not failures, len(failures), 0, detail=",".join(failures))


# ---------------------------------------------------------------- 9. metrics

@_timed
def metric_oracles(seed: int = 0) -> CheckResult:
    rng = Rng(seed)
    a = rng.split("a").uniform(size=(24, 20))
    b = np.clip(a + rng.split("b").normal(0, 0.05, size=a.shape), 0, 1)
    errs = {
        "self_ssim_err": abs(metrics.ssim(a, a) - 1.0),
        "psnr_err": abs(metrics.psnr(a, b) - oracles.psnr(a, b)),
        "ssim_err": abs(metrics.ssim(a, b) - oracles.ssim(a, b)),
        "psnr20_err": abs(metrics.psnr(a, a + 0.1) - 20.0),
    }
    limits = {"self_ssim_err": 1e-9, "psnr_err": 1e-10, "ssim_err": 1e-6, "psnr20_err": 0.0}
    bad = [k for k in errs if not errs[k] <= limits[k]]
    return CheckResult("metric_oracles", not bad, max(errs.values()), 1e-6,
                       detail=" ".join(f"{k}={v:.2g}" for k, v in errs.items()))


# ---------------------------------------------------------------- extra oracles

@_timed
def kernel_oracles(seed: int = 0) -> CheckResult:
    rng = Rng(seed)
    x = rng.split("x").normal(size=(7, 6, 3))
    k = rng.split("k").normal(size=(3, 3, 3, 4))
    b = rng.split("b").normal(size=4)
    errs = {}
    for stride in (1, 2):
        got = kernels.conv2d(x, k, b, stride=stride, padding=1)
        errs[f"conv_s{stride}"] = float(np.max(np.abs(got - oracles.conv2d(x, k, b, stride, 1))))
    q, kk, v = (rng.split(n).normal(size=(5, 4)) for n in "qkv")
    errs["attention"] = float(np.max(np.abs(kernels.softmax_attention(q, kk, v) - oracles.attention(q, kk, v))))
    grid = rng.split("g").uniform(size=(5, 6))
    pts = rng.split("p").uniform(-1.5, 7.5, size=(50, 2))
    errs["bilinear"] = max(abs(kernels.bilinear_sample(grid, px, py) - oracles.bilinear(grid, px, py))
                           for px, py in pts)
    worst = max(errs.values())
    return CheckResult("kernel_oracles", worst <= 1e-12, worst, 1e-12,
                       detail=" ".join(f"{k}={v:.2g}" for k, v in errs.items()))


@_timed
def blur_oracle(seed: int = 0) -> CheckResult:
    frames = Rng(seed).uniform(0.1, 1.0, size=(9, 6, 6))
    seq = ev.SharpSequence(frames, np.linspace(0, 1, 9), 4)
    err = float(np.max(np.abs(ev.accumulate_blur(seq) - oracles.trapezoid_dense(frames))))
    const = ev.SharpSequence(np.full((9, 4, 4), 0.37), np.linspace(0, 1, 9), 4)
    exact = np.array_equal(ev.accumulate_blur(const), np.full((4, 4), 0.37))
    return CheckResult("blur_oracle", err <= 1e-9 and exact, err, 1e-9, detail=f"constant_exact={exact}")


@_timed
def configured_neuron_oracle(seed: int = 0, n: int = 200) -> CheckResult:
    rng = Rng(seed)
    v0 = rng.split("v").uniform(-2, 2, size=n)
    cur = rng.split("c").uniform(-0.5, 1.0, size=(6, n))
    cfg = spiking.NCMConfig(ad.const(v0), spiking.threshold_from_potential(ad.const(v0)))
    run = spiking.ncm_lif_run(cfg, list(cur), spiking.LIFParams())
    spikes = np.array([s.value for s in run.spikes])
    worst = 0.0
    for i in range(n):
        s_ref, u_ref = oracles.configured_lif_scalar(v0[i], cur[:, i].tolist(), 2.0)
        worst = max(worst, float(np.max(np.abs(spikes[:, i] - s_ref))), abs(run.u_final.value[i] - u_ref))
    v_star = oracles.first_spike_root()
    ok = worst <= 1e-12 and abs(v_star - 0.4011) < 5e-5
    return CheckResult("configured_neuron_oracle", ok, worst, 1e-12, detail=f"v*={v_star:.6f}")


ACCEPTANCE = {
    1: ("physics", edi_roundtrip),
    2: ("gradients", gradcheck),
    3: ("ncm_firing", ncm_firing_law),
    4: ("lif", lif_equivalence),
    5: ("mask", mask_and_gates),
    6: ("deformable", deformable_degeneracy),
    7: ("training", toy_training),
    8: ("determinism", determinism_roundtrips),
    9: ("metrics", metric_oracles),
}

EXTRA = (kernel_oracles, blur_oracle, configured_neuron_oracle)


def run_all(include_training: bool = True, log=print) -> list[CheckResult]:
    results = []
    for _, fn in ACCEPTANCE.values():
        if fn is toy_training:
            if not include_training:
                continue
            # the ablation run doubles the cost; the acceptance suite covers it
            out = fn(ablation=False)
        else:
            out = fn()
        for r in out if isinstance(out, list) else [out]:
            log(r.line())
            results.append(r)
    for fn in EXTRA:
        r = fn()
        log(r.line())
        results.append(r)
    return results
