"""Multi-scale hybrid deblurring network: image encoder, spiking event branch,
per-level neuron configuration and blurry-region fusion, mirrored decoder.

Parameters live in a flat ``{path: Var}`` dict.  The network predicts a
residual on top of the blurry input at every pyramid level; the decoder heads
start at zero so a fresh model is the identity map.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import events as ev
from . import io as fio
from . import rbam, spiking
from .numerics import autodiff as ad
from .numerics.autodiff import NonFiniteError, Var
from .numerics.rng import Rng

log = logging.getLogger(__name__)

FUSION_MODES = ("add", "cross_attention")
CHECKPOINT_MAGIC = b"TCK1"
CHECKPOINT_VERSION = 1
PSNR_LOSS_EPS = 1e-8


@dataclass
class ModelConfig:
    levels: int = 3
    base_channels: int = 16
    bins: int = 12
    ncm_enabled: bool = True
    mask_enabled: bool = True
    fusion_mode: str = "cross_attention"
    events_enabled: bool = True
    image_channels: int = 1
    heads: int = 4
    window: int = 8
    tau: float = 2.0
    alpha: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1 or self.bins < 1:
            raise ValueError("levels, base_channels and bins must all be >= 1")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.fusion_mode == "cross_attention" and self.base_channels % self.heads:
            raise ValueError("base_channels must be divisible by heads")
        if not self.events_enabled and (self.ncm_enabled or self.mask_enabled):
            raise ValueError("NCM and the blurry mask need the event branch")
        spiking.LIFParams(self.tau, 1.0, self.alpha)

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def lif(self) -> spiking.LIFParams:
        return spiking.LIFParams(tau=self.tau, alpha=self.alpha)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


# ablation ladder, from image-only up to the full model
ABLATION_ROWS = {
    "image_only": dict(events_enabled=False, ncm_enabled=False, mask_enabled=False, fusion_mode="add"),
    "event_add": dict(ncm_enabled=False, mask_enabled=False, fusion_mode="add"),
    "ncm_add": dict(ncm_enabled=True, mask_enabled=False, fusion_mode="add"),
    "ncm_ca": dict(ncm_enabled=True, mask_enabled=False, fusion_mode="cross_attention"),
    "ncm_mask_add": dict(ncm_enabled=True, mask_enabled=True, fusion_mode="add"),
    "full": dict(ncm_enabled=True, mask_enabled=True, fusion_mode="cross_attention"),
}


def ablation_config(row: str, **overrides) -> ModelConfig:
    return ModelConfig(**{**ABLATION_ROWS[row], **overrides})


@dataclass
class ModelParams:
    config: ModelConfig
    params: dict                      # name -> Var (trainable leaf)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0

    def arrays(self) -> dict:
        return {k: v.value for k, v in self.params.items()}

    def count(self) -> int:
        return int(sum(v.value.size for v in self.params.values()))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: ad.param(v.value.astype(dtype)) for k, v in self.params.items()},
                           dict(self.adam_m), dict(self.adam_v), self.step)

    def level(self, l: int, group: str) -> dict:
        prefix = f"l{l}.{group}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}


@dataclass
class TrainSample:
    pyramid: list            # [H, W, C] arrays at scales 1, 1/2, 1/4, ...
    voxel: np.ndarray        # [H, W, b]
    target: np.ndarray       # [H, W, C]
    name: str = ""

    def __post_init__(self):
        for a, b in zip(self.pyramid, self.pyramid[1:]):
            if b.shape[0] * 2 != a.shape[0] or b.shape[1] * 2 != a.shape[1]:
                raise ValueError("pyramid levels must halve exactly")

    def target_pyramid(self) -> list:
        return [t[..., None] if t.ndim == 2 else t
                for t in ev.blur_pyramid(self.target, len(self.pyramid))]


# ---------------------------------------------------------------- build

def _param_shapes(cfg: ModelConfig) -> dict:
    """Ordered ``name -> (shape, init)`` with init in {"fan_in", "zeros", "ones", "mix"}."""
    ic, shapes = cfg.image_channels, {}

    def conv(name, k, cin, cout, init="fan_in"):
        shapes[name + "_w"] = ((k, k, cin, cout), init)
        shapes[name + "_b"] = ((cout,), "zeros")

    for l in range(cfg.levels):
        c = cfg.channels(l)
        p = f"l{l}."
        conv(p + "enc.in", 3, ic, c)
        if l > 0:
            conv(p + "enc.down", 3, cfg.channels(l - 1), c)
        conv(p + "enc.conv1", 3, c, c)
        conv(p + "enc.conv2", 3, c, c)
        if cfg.events_enabled:
            conv(p + "snn.syn1", 3, 1 if l == 0 else cfg.channels(l - 1), c)
            conv(p + "snn.syn2", 3, c, c)
            if cfg.ncm_enabled:
                conv(p + "snn.phi", 1, c, c)
                conv(p + "snn.psi", 3, c, c)
            shapes[p + "rbam.tc_w"] = ((3, c), "fan_in")
            shapes[p + "rbam.tc_b"] = ((c,), "zeros")
            shapes[p + "rbam.tc_mix"] = ((cfg.bins,), "mix")
            if cfg.mask_enabled:
                conv(p + "rbam.off", 3, c, 2 * len(rbam.TAPS), "zeros")
                conv(p + "rbam.thr1", 3, c, c)
                conv(p + "rbam.thr2", 3, c, 1)
            if cfg.fusion_mode == "cross_attention":
                for d in ("ie", "ei"):
                    for m in ("q", "k", "v"):
                        shapes[f"{p}rbam.{d}_{m}"] = ((c, c), "fan_in")
                    shapes[f"{p}rbam.{d}_o"] = ((c, c), "zeros")
                shapes[p + "rbam.mlp1_w"] = ((2 * c, 2 * c), "fan_in")
                shapes[p + "rbam.mlp1_b"] = ((2 * c,), "zeros")
                shapes[p + "rbam.mlp2_w"] = ((2 * c, 2 * c), "fan_in")
                shapes[p + "rbam.mlp2_b"] = ((2 * c,), "zeros")
                conv(p + "rbam.fconv", 3, 2 * c, c)
        if l < cfg.levels - 1:
            conv(p + "dec.up", 3, cfg.channels(l + 1), c)
            conv(p + "dec.merge", 1, 2 * c, c)
        conv(p + "dec.conv1", 3, c, c)
        conv(p + "dec.conv2", 3, c, c)
        conv(p + "dec.head", 3, c, ic, "zeros")
    return shapes


def build(config: ModelConfig, rng: Rng | None = None, dtype=np.float32) -> ModelParams:
    """Deterministic initialisation from ``config.seed`` (or an explicit ``rng``)."""
    rng = rng or Rng(config.seed)
    params = {}
    for name, (shape, init) in _param_shapes(config).items():
        if init == "zeros":
            value = np.zeros(shape)
        elif init == "mix":
            value = np.full(shape, 1.0 / shape[0])
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.split(name).uniform(-bound, bound, size=shape)
        params[name] = ad.param(value.astype(dtype))
    return ModelParams(config, params)


def parameter_count(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s, _ in _param_shapes(config).values()))


# ---------------------------------------------------------------- forward

@dataclass
class LevelTrace:
    image_feat: Var
    spikes: Var | None = None
    snn: spiking.SNNOutput | None = None
    mask: rbam.MaskBundle | None = None
    fusion: rbam.FusionFeatures | None = None


@dataclass
class ForwardResult:
    outputs: list            # per level, [H_l, W_l, C]
    levels: list             # LevelTrace per level

    @property
    def output(self) -> Var:
        return self.outputs[0]


def _group(params: ModelParams, l: int, group: str) -> dict:
    return params.level(l, group)


def _conv(x, g: dict, name: str, stride: int = 1) -> Var:
    return ad.conv2d(x, g[name + "_w"], g[name + "_b"], stride=stride)


class _Stage:
    """Attach the layer path to non-finite errors raised inside the block."""

    def __init__(self, path: str):
        self.path = path

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is NonFiniteError and not exc.path:
            raise NonFiniteError(exc.op, self.path) from exc
        return False


def forward(model: ModelParams, sample: TrainSample, smooth: bool = False) -> ForwardResult:
    """Deblur one sample; ``smooth`` swaps spikes and the mask for sigmoid relaxations."""
    cfg = model.config
    dtype = next(iter(model.params.values())).dtype
    if len(sample.pyramid) < cfg.levels:
        raise ValueError(f"sample has {len(sample.pyramid)} pyramid levels, config needs {cfg.levels}")
    if sample.voxel.shape[-1] != cfg.bins:
        raise ValueError(f"voxel grid has {sample.voxel.shape[-1]} bins, config needs {cfg.bins}")
    blurry = [ad.const(np.asarray(b, dtype=dtype)) for b in sample.pyramid[:cfg.levels]]
    lif = cfg.lif
    fused, traces = [], []
    prev_f, prev_s = None, None
    for l in range(cfg.levels):
        enc = _group(model, l, "enc")
        with _Stage(f"l{l}.enc"):
            x = _conv(blurry[l], enc, "in")
            if l > 0:
                x = x + _conv(prev_f, enc, "down", stride=2)
            h = ad.relu(x)
            img = h + _conv(ad.relu(_conv(h, enc, "conv1")), enc, "conv2")
        trace = LevelTrace(img)
        if not cfg.events_enabled:
            f = img
        else:
            snn_w = _group(model, l, "snn")
            rb = _group(model, l, "rbam")
            with _Stage(f"l{l}.snn"):
                if l == 0:
                    vox = np.asarray(sample.voxel, dtype=dtype)
                    snn_in = ad.const(np.moveaxis(vox, -1, 0)[..., None])
                else:
                    snn_in = prev_s
                out = spiking.snn_block(snn_in, img, snn_w, lif, cfg.ncm_enabled, smooth,
                                        stride=1 if l == 0 else 2)
            trace.snn, trace.spikes = out, out.spikes
            with _Stage(f"l{l}.rbam"):
                e_s = rbam.temporal_conv(out.spikes, rb)
                gate = None
                if cfg.mask_enabled:
                    trace.mask = rbam.blur_mask(out.spikes, img, rb, smooth, cfg.alpha)
                    gate = trace.mask.mask
                if cfg.fusion_mode == "add":
                    if gate is None:
                        f = img + e_s
                    else:
                        f = img + ad.reshape(gate, gate.shape + (1,)) * e_s
                    trace.fusion = rbam.FusionFeatures(e_s, img, e_s, f)
                else:
                    i_p, e_p = rbam.masked_cross_attention(img, e_s, gate, rb, cfg.heads, cfg.window)
                    f = rbam.fuse(i_p, e_p, rb)
                    trace.fusion = rbam.FusionFeatures(e_s, i_p, e_p, f)
            prev_s = out.spikes
        fused.append(f)
        traces.append(trace)
        prev_f = f

    outputs = [None] * cfg.levels
    d = None
    for l in reversed(range(cfg.levels)):
        dec = _group(model, l, "dec")
        with _Stage(f"l{l}.dec"):
            if d is None:
                x = fused[l]
            else:
                up = _conv(ad.upsample_nearest(d, 2), dec, "up")
                x = _conv(ad.concat([up, fused[l]], axis=-1), dec, "merge")
            d = x + _conv(ad.relu(_conv(x, dec, "conv1")), dec, "conv2")
            outputs[l] = blurry[l] + _conv(d, dec, "head")
    return ForwardResult(outputs, traces)


def psnr_loss(pred, target, eps: float = PSNR_LOSS_EPS) -> Var:
    """``-10 log10(1 / (MSE + eps))``; lower is better."""
    pred = pred if isinstance(pred, Var) else ad.const(np.asarray(pred, dtype=np.float64))
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} != target {target.shape}")
    mse = ad.mean(ad.square(pred - target))
    return ad.log(mse + eps) * (10.0 / np.log(10.0))


def sample_loss(model: ModelParams, sample: TrainSample, smooth: bool = False) -> tuple[Var, ForwardResult]:
    """Mean PSNR loss over all output scales."""
    res = forward(model, sample, smooth)
    targets = sample.target_pyramid()
    losses = [psnr_loss(o, t) for o, t in zip(res.outputs, targets)]
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / len(losses)), res


# ---------------------------------------------------------------- data

TOY_MOTIONS = ("bar", "edge", "texture", "bar")


def make_sample(seq: ev.SharpSequence, contrast: float, bins: int, levels: int, name: str = "") -> TrainSample:
    blurry = ev.accumulate_blur(seq)
    stream = ev.generate_events(seq, contrast)
    vox = ev.voxelize(stream, bins).grid
    pyr = [b[..., None] for b in ev.blur_pyramid(blurry, levels)]
    return TrainSample(pyr, vox, seq.latent[..., None], name)


def toy_dataset(n: int = 4, size: int = 32, frames: int = 9, contrast: float = 0.2,
                bins: int = 12, levels: int = 3, seed: int = 0) -> list:
    """Synthetic blurry/sharp pairs cycling through bar, edge and texture motion."""
    rng = Rng(seed)
    out = []
    for i in range(n):
        spec = toy_scene_spec(i, size, size, frames)
        seq = ev.synthesize_scene(spec, rng.split(f"scene{i}"))
        out.append(make_sample(seq, contrast, bins, levels, f"toy{i:02d}_{spec.motion}"))
    return out


def toy_scene_spec(i: int, height: int, width: int, frames: int) -> ev.SceneSpec:
    motion = TOY_MOTIONS[i % len(TOY_MOTIONS)]
    velocity = 0.06 if motion == "edge" else 1.0 + 0.5 * (i % 2)
    return ev.SceneSpec(height, width, frames, motion, velocity)


# ---------------------------------------------------------------- training

@dataclass
class TrainOptions:
    iterations: int = 500
    batch_size: int = 2
    lr: float = 1e-4
    milestones: tuple = (0.6, 0.8)
    gamma: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    metrics_path: str | None = None


def learning_rate(opts: TrainOptions, it: int) -> float:
    lr = opts.lr
    for m in opts.milestones:
        if it >= int(round(m * opts.iterations)):
            lr *= opts.gamma
    return lr


def adam_step(model: ModelParams, grads: dict, lr: float, opts: TrainOptions) -> None:
    model.step += 1
    b1, b2 = opts.beta1, opts.beta2
    corr1 = 1.0 - b1 ** model.step
    corr2 = 1.0 - b2 ** model.step
    for name, p in model.params.items():
        g = grads[name]
        m = model.adam_m.get(name)
        v = model.adam_v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        model.adam_m[name] = m.astype(p.dtype)
        model.adam_v[name] = v.astype(p.dtype)
        update = lr * (m / corr1) / (np.sqrt(v / corr2) + opts.adam_eps)
        p.value = (p.value - update).astype(p.dtype)


def _batches(n: int, opts: TrainOptions):
    rng = Rng(opts.seed).split("shuffle")
    while True:
        order = rng.permutation(n)
        for i in range(0, n, opts.batch_size):
            yield order[i:i + opts.batch_size]


def train(model: ModelParams, dataset: list, opts: TrainOptions | None = None) -> tuple[ModelParams, list]:
    """Adam on the PSNR loss with step decay; returns the model and ``[(iter, loss, psnr)]``.

    Per-sample gradients are summed in batch order, so a run is
    bit-reproducible from (seed, data, config).
    """
    from .metrics import psnr

    opts = opts or TrainOptions()
    if not dataset:
        raise ValueError("empty dataset")
    curve = []
    batches = _batches(len(dataset), opts)
    names = list(model.params)
    for it in range(opts.iterations):
        idx = next(batches)
        grads = {k: np.zeros_like(v.value) for k, v in model.params.items()}
        loss_sum, psnr_sum = 0.0, 0.0
        for j in idx:
            sample = dataset[j]
            loss, res = sample_loss(model, sample)
            if not np.isfinite(loss.value):
                raise FloatingPointError(f"non-finite loss at iteration {it}")
            ad.zero_grad(model.params.values())
            ad.backward(loss, wrt=model.params.values())
            for k in names:
                grads[k] += model.params[k].grad
            loss_sum += float(loss.value)
            psnr_sum += psnr(res.output.value, sample.target)
        scale = 1.0 / len(idx)
        for k in names:
            grads[k] *= scale
        adam_step(model, grads, learning_rate(opts, it), opts)
        curve.append((it, loss_sum * scale, psnr_sum * scale))
        if it % 50 == 0 or it == opts.iterations - 1:
            log.info("iter %d loss %.4f psnr %.3f", it, curve[-1][1], curve[-1][2])
    ad.zero_grad(model.params.values())
    if opts.metrics_path:
        write_metrics_csv(opts.metrics_path, curve)
    return model, curve


def write_metrics_csv(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss", "psnr"])
        for it, loss, p in curve:
            w.writerow([it, repr(float(loss)), repr(float(p))])


def evaluate(model: ModelParams, dataset: list) -> list:
    """Full-resolution predictions (numpy) for each sample."""
    return [forward(model, s).output.value for s in dataset]


# ---------------------------------------------------------------- checkpoints

def save(model: ModelParams, path) -> None:
    """Archive of ``.ten`` blobs behind a JSON manifest (name -> offset, length)."""
    blobs, entries, offset = [], [], 0
    for kind, table in (("param", model.arrays()), ("adam_m", model.adam_m), ("adam_v", model.adam_v)):
        for name, arr in table.items():
            blob = fio.encode_ten(arr)
            entries.append({"name": f"{kind}/{name}", "offset": offset, "length": len(blob)})
            blobs.append(blob)
            offset += len(blob)
    manifest = json.dumps({"config": model.config.to_dict(), "step": model.step,
                           "entries": entries}, sort_keys=True).encode("utf-8")
    head = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(manifest))
    fio._atomic_write(path, head + manifest + b"".join(blobs))


def load(path, config: ModelConfig | None = None) -> ModelParams:
    """Read a checkpoint; with ``config`` given, every parameter must match its shapes."""
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise fio.FormatError("truncated checkpoint header", path, 0)
    if buf[:4] != CHECKPOINT_MAGIC:
        raise fio.FormatError(f"bad checkpoint magic {buf[:4]!r}", path, 0)
    version, mlen = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise fio.FormatError(f"unsupported checkpoint version {version}", path, 4)
    if len(buf) < 12 + mlen:
        raise fio.FormatError("truncated checkpoint manifest", path, 12)
    try:
        manifest = json.loads(buf[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise fio.FormatError(f"corrupt manifest: {exc}", path, 12) from exc
    base = 12 + mlen
    tables = {"param": {}, "adam_m": {}, "adam_v": {}}
    for e in manifest["entries"]:
        start = base + e["offset"]
        if start + e["length"] > len(buf):
            raise fio.FormatError(f"truncated tensor '{e['name']}'", path, start)
        arr, end = fio.decode_ten(buf, start, path)
        if end != start + e["length"]:
            raise fio.FormatError(f"tensor '{e['name']}' length mismatch", path, start)
        kind, name = e["name"].split("/", 1)
        tables[kind][name] = arr
    stored = ModelConfig.from_dict(manifest["config"])
    expected = config or stored
    shapes = _param_shapes(expected)
    for name, (shape, _) in shapes.items():
        if name not in tables["param"]:
            raise ValueError(f"checkpoint lacks parameter '{name}'")
        if tables["param"][name].shape != shape:
            raise ValueError(f"parameter '{name}' has shape {tables['param'][name].shape}, "
                             f"config expects {shape}")
    extra = set(tables["param"]) - set(shapes)
    if extra:
        raise ValueError(f"checkpoint has parameters unknown to the config: {sorted(extra)[:3]}")
    params = {name: ad.param(tables["param"][name]) for name in shapes}
    return ModelParams(expected, params, tables["adam_m"], tables["adam_v"], int(manifest["step"]))


# ---------------------------------------------------------------- config files

def read_config_file(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise fio.FormatError("expected key=value", path, line=n)
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def coerce_config(values: dict, base: ModelConfig | None = None) -> ModelConfig:
    base = base or ModelConfig()
    d = base.to_dict()
    for k, v in values.items():
        if k not in d:
            raise ValueError(f"unknown config key '{k}'")
        cur = d[k]
        if isinstance(cur, bool):
            if str(v).lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"'{k}' expects a boolean, got '{v}'")
            d[k] = str(v).lower() in ("true", "1", "yes")
        elif isinstance(cur, int):
            d[k] = int(v)
        elif isinstance(cur, float):
            d[k] = float(v)
        else:
            d[k] = str(v)
    return ModelConfig(**d)
