"""``bdhnet`` command-line entry point.

Exit codes: 0 success, 2 validation failure (bad flags, bad config, failed
check), 3 I/O error (missing, unwritable or malformed files).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checks, metrics, network, plotting
from . import events as ev
from . import io as fio
from .numerics import Rng

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 2, 3
MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ["name", "motion", "height", "width", "frames", "contrast", "events",
                   "positive", "negative", "blurry_psnr"]
TRAIN_KEYS = {f.name for f in fields(network.TrainOptions)} - {"metrics_path"}

log = logging.getLogger("bdhnet")


class CheckFailed(Exception):
    pass


def _hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:12]


def _header(cmd: str, seed, config_hash: str) -> None:
    versions = ",".join(f"{k}:{v}" for k, v in fio.FORMAT_VERSIONS.items())
    print(f"# bdhnet {cmd} seed={seed} config={config_hash} formats={versions}", flush=True)


def _pmap(fn, items, workers: int):
    """Ordered map; results come back in input order regardless of ``workers``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got '{text}'")
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- configs

def _model_and_train_config(args) -> tuple[network.ModelConfig, network.TrainOptions]:
    values = network.read_config_file(args.config) if getattr(args, "config", None) else {}
    train_vals = {k: values.pop(k) for k in list(values) if k in TRAIN_KEYS}
    base = network.ablation_config(args.row) if getattr(args, "row", None) else network.ModelConfig()
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    cfg = network.coerce_config(values, base)
    opts = network.TrainOptions(seed=cfg.seed)
    for k, v in train_vals.items():
        cur = getattr(opts, k)
        if isinstance(cur, tuple):
            v = tuple(float(x) for x in str(v).split(","))
        else:
            v = type(cur)(v)
        setattr(opts, k, v)
    for k in ("iterations", "lr", "batch_size"):
        if getattr(args, k, None) is not None:
            setattr(opts, k, getattr(args, k))
    if opts.iterations < 1 or opts.batch_size < 1 or opts.lr <= 0:
        raise ValueError("iterations and batch_size must be >= 1 and lr > 0")
    return cfg, opts


def _model_for(args, cfg: network.ModelConfig) -> network.ModelParams:
    if getattr(args, "checkpoint", None):
        return network.load(args.checkpoint)
    return network.build(cfg)


# ---------------------------------------------------------------- sample directories

def _synth_one(job) -> dict:
    i, h, w, frames, contrast, bins, levels, seed, out = job
    spec = network.toy_scene_spec(i, h, w, frames)
    seq = ev.synthesize_scene(spec, Rng(seed).split(f"scene{i}"))
    blurry = ev.accumulate_blur(seq)
    stream = ev.generate_events(seq, contrast)
    name = f"sample_{i:03d}"
    d = Path(out) / name
    d.mkdir(parents=True, exist_ok=True)
    fio.write_pgm(d / "blurry.pgm", blurry)
    fio.write_ten(d / "blurry.ten", blurry)
    fio.write_ten(d / "sharp.ten", seq.latent)
    fio.write_ten(d / "frames.ten", seq.frames)
    fio.write_evt(d / "events.evt", stream)
    fio.write_ten(d / "voxel.ten", ev.voxelize(stream, bins).grid)
    max_levels = 1
    while max_levels < levels and h % 2 ** max_levels == 0 and w % 2 ** max_levels == 0:
        max_levels += 1
    for l, img in enumerate(ev.blur_pyramid(blurry, max_levels)[1:], 1):
        fio.write_ten(d / f"blurry_l{l}.ten", img)
    return {"name": name, "motion": spec.motion, "height": h, "width": w, "frames": frames,
            "contrast": repr(contrast), "events": len(stream), "positive": int((stream.p > 0).sum()),
            "negative": int((stream.p < 0).sum()),
            "blurry_psnr": repr(metrics.psnr(blurry, seq.latent))}


def sample_dirs(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory '{root}' does not exist")
    if (root / "blurry.ten").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "blurry.ten").exists())
    if not dirs:
        raise FileNotFoundError(f"no sample directories under '{root}' (run 'bdhnet synth' first)")
    return dirs


def load_sample(d: Path, cfg: network.ModelConfig) -> network.TrainSample:
    blurry = fio.read_ten(d / "blurry.ten")
    sharp = fio.read_ten(d / "sharp.ten")
    pyr = [blurry]
    for l in range(1, cfg.levels):
        f = d / f"blurry_l{l}.ten"
        pyr.append(fio.read_ten(f) if f.exists() else ev.blur_pyramid(pyr[0], l + 1)[l])
    voxel = fio.read_ten(d / "voxel.ten")
    if voxel.shape[-1] != cfg.bins:
        voxel = ev.voxelize(fio.read_evt(d / "events.evt"), cfg.bins).grid
    return network.TrainSample([p[..., None] for p in pyr], voxel, sharp[..., None], d.name)


def _dataset(args, cfg) -> list:
    if getattr(args, "data", None):
        return [load_sample(d, cfg) for d in sample_dirs(args.data)]
    h, w = args.size
    if h != w:
        raise ValueError("the built-in toy set is square; synthesize HxW data and pass --data")
    return network.toy_dataset(n=args.scenes, size=h, bins=cfg.bins, levels=cfg.levels, seed=cfg.seed)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    h, w = args.size
    if args.scenes < 1 or args.contrast <= 0 or args.bins < 1:
        raise ValueError("scenes and bins must be >= 1 and contrast > 0")
    params = dict(scenes=args.scenes, size=[h, w], frames=args.frames, contrast=args.contrast,
                  bins=args.bins, levels=args.levels)
    _header("synth", args.seed, _hash(params))
    out = _out_dir(args.out)
    jobs = [(i, h, w, args.frames, args.contrast, args.bins, args.levels, args.seed, str(out))
            for i in range(args.scenes)]
    rows = _pmap(_synth_one, jobs, args.workers)
    with open(out / MANIFEST, "w", newline="") as fh:
        wr = csv.DictWriter(fh, MANIFEST_FIELDS)
        wr.writeheader()
        wr.writerows(rows)
    print(f"wrote {len(rows)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, opts = _model_and_train_config(args)
    _header("train", cfg.seed, cfg.hash())
    data = _dataset(args, cfg)
    out = _out_dir(args.out)
    opts.metrics_path = str(out / "metrics.csv")
    model = network.load(args.resume, cfg) if args.resume else network.build(cfg)
    model, curve = network.train(model, data, opts)
    network.save(model, out / "model.tck")
    plotting.loss_curve(curve, out / "loss_curve.png")
    print(f"final loss={curve[-1][1]:.4f} train_psnr={curve[-1][2]:.3f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = network.load(args.checkpoint)
    cfg = model.config
    _header("infer", cfg.seed, cfg.hash())
    out = _out_dir(args.out)
    for d in sample_dirs(args.data):
        pred = network.forward(model, load_sample(d, cfg)).output.value
        target = out / d.name
        target.mkdir(exist_ok=True)
        fio.write_ten(target / "deblurred.ten", pred[..., 0])
        fio.write_pgm(target / "deblurred.pgm", pred)
        print(f"{d.name}: wrote {target / 'deblurred.pgm'}")
    return EXIT_OK


def _eval_one(job) -> list:
    d, cfg_dict, ckpt = job
    cfg = network.ModelConfig.from_dict(cfg_dict)
    model = network.load(ckpt) if ckpt else network.build(cfg)
    s = load_sample(Path(d), cfg)
    blurry, sharp = s.pyramid[0], s.target
    pred = network.forward(model, s).output.value
    edi = ev.edi_reconstruct(blurry[..., 0].astype(np.float64), fio.read_evt(Path(d) / "events.evt"),
                             samples=_frame_count(Path(d)))
    rows = []
    for method, img in (("blurry", blurry), ("model", pred), ("edi", edi)):
        rows.append({"name": s.name, "method": method, "psnr": metrics.psnr(img, sharp),
                     "ssim": metrics.ssim(img, sharp) if min(sharp.shape[:2]) >= metrics.SSIM_WINDOW
                     else float("nan")})
    return rows


def _frame_count(d: Path) -> int:
    f = d / "frames.ten"
    return fio.read_ten(f).shape[0] if f.exists() else 9


def cmd_eval(args) -> int:
    cfg = network.load(args.checkpoint).config if args.checkpoint else _model_and_train_config(args)[0]
    _header("eval", cfg.seed, cfg.hash())
    out = _out_dir(args.out)
    dirs = sample_dirs(args.data)
    jobs = [(str(d), cfg.to_dict(), args.checkpoint) for d in dirs]
    rows = [r for chunk in _pmap(_eval_one, jobs, args.workers) for r in chunk]
    with open(out / "eval.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, ["name", "method", "psnr", "ssim"])
        wr.writeheader()
        for r in rows:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    for method in ("blurry", "model", "edi"):
        sel = [r for r in rows if r["method"] == method]
        rep = metrics.MetricReport(float(np.mean([r["psnr"] for r in sel])),
                                   float(np.mean([r["ssim"] for r in sel])), sel)
        print(f"{method}-vs-sharp psnr={rep.psnr:.4f} ssim={rep.ssim:.4f}")
    plotting.eval_summary(rows, out / "eval.png")
    return EXIT_OK


def _edi_one(job) -> dict:
    d, out, samples = job
    d = Path(d)
    blurry = fio.read_ten(d / "blurry.ten").astype(np.float64)
    stream = fio.read_evt(d / "events.evt")
    rec = ev.edi_reconstruct(blurry, stream, samples=samples or _frame_count(d))
    target = Path(out) / d.name
    target.mkdir(exist_ok=True)
    fio.write_ten(target / "edi.ten", rec)
    fio.write_pgm(target / "edi.pgm", rec)
    return {"name": d.name, "events": len(stream), "psnr": metrics.psnr(rec, fio.read_ten(d / "sharp.ten"))}


def cmd_edi(args) -> int:
    _header("edi", "-", _hash({"samples": args.samples}))
    out = _out_dir(args.out)
    rows = _pmap(_edi_one, [(str(d), str(out), args.samples) for d in sample_dirs(args.data)], args.workers)
    with open(out / "edi.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, ["name", "events", "psnr"])
        wr.writeheader()
        for r in rows:
            wr.writerow({**r, "psnr": repr(r["psnr"])})
            print(f"{r['name']}: edi psnr={r['psnr']:.2f} dB")
    print(f"mean edi psnr={np.mean([r['psnr'] for r in rows]):.4f}")
    return EXIT_OK


MASK_PANELS = ("s_sum", "s_local", "s_map", "t_map", "mask")


def cmd_maskdump(args) -> int:
    cfg = network.load(args.checkpoint).config if args.checkpoint else _model_and_train_config(args)[0]
    _header("maskdump", cfg.seed, cfg.hash())
    if not cfg.mask_enabled:
        raise ValueError("this configuration has no blurry mask (mask_enabled=false)")
    if not 0 <= args.level < cfg.levels:
        raise ValueError(f"level must be in [0, {cfg.levels})")
    model = _model_for(args, cfg)
    dirs = sample_dirs(args.data)
    if not 0 <= args.sample < len(dirs):
        raise ValueError(f"sample index {args.sample} out of range (have {len(dirs)})")
    s = load_sample(dirs[args.sample], cfg)
    trace = network.forward(model, s).levels[args.level]
    out = _out_dir(args.out)
    bundle = trace.mask
    images = {}
    for name in MASK_PANELS:
        a = getattr(bundle, name).value.astype(np.float64)
        if name == "mask":
            img = np.where(a >= 0.5, 255, 0).astype(np.uint8)
        else:
            lo, hi = float(a.min()), float(a.max())
            img = fio.to_uint8(a, lo, hi if hi > lo else lo + 1.0)
        fio.write_pgm(out / f"{name}.pgm", img)
        images[name] = a
    fio.write_ten(out / "spikes.ten", trace.spikes.value)
    plotting.panels({"blurry": s.pyramid[args.level], **images}, out / "maskdump.png")
    print(f"{s.name} level {args.level}: mask covers {float(images['mask'].mean()):.3f} of pixels")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _header("gradcheck", args.seed, _hash({"coords": args.coords, "eps": args.eps}))
    results = checks.gradcheck(n_coords=args.coords, eps=args.eps, seed=args.seed)
    for r in results:
        print(r.line())
    worst = max(r.value for r in results)
    print(f"max relative error={worst:.3e} (limit 1e-4)")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CheckFailed(", ".join(failed))
    return EXIT_OK


def cmd_selftest(args) -> int:
    _header("selftest", 0, _hash({"quick": args.quick}))
    results = checks.run_all(include_training=not args.quick)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        raise CheckFailed(", ".join(failed))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bdhnet", description="Event-guided motion deblurring toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def model_flags(sp, data_required=False):
        sp.add_argument("--config", help="flat key=value file (model and training keys)")
        sp.add_argument("--row", choices=sorted(network.ABLATION_ROWS), help="ablation preset")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--data", required=data_required, help="directory written by 'synth'")

    sp = sub.add_parser("synth", help="write synthetic blurry/sharp/event samples")
    sp.add_argument("--scenes", type=int, default=4)
    sp.add_argument("--size", type=_parse_size, default=(32, 32))
    sp.add_argument("--frames", type=int, default=9)
    sp.add_argument("--contrast", type=float, default=0.2)
    sp.add_argument("--bins", type=int, default=12)
    sp.add_argument("--levels", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="train on synthesized samples (or the built-in toy set)")
    model_flags(sp)
    sp.add_argument("--scenes", type=int, default=4, help="toy set size when --data is omitted")
    sp.add_argument("--size", type=_parse_size, default=(32, 32))
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("infer", help="deblur samples with a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_infer)

    sp = sub.add_parser("eval", help="PSNR/SSIM of blurry, model and EDI against sharp")
    model_flags(sp, data_required=True)
    sp.add_argument("--checkpoint", help="omit to evaluate a freshly initialised model")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("edi", help="closed-form event double-integral baseline")
    sp.add_argument("--data", required=True)
    sp.add_argument("--samples", type=int, help="integration grid size (default: frame count)")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_edi)

    sp = sub.add_parser("maskdump", help="write the blurry-mask pipeline panels")
    model_flags(sp, data_required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--sample", type=int, default=0)
    sp.add_argument("--level", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_maskdump)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the smoothed network")
    sp.add_argument("--coords", type=int, default=30)
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("selftest", help="run every oracle check")
    sp.add_argument("--quick", action="store_true", help="skip the toy training run")
    sp.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except CheckFailed as exc:
        print(f"error: check failed: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except fio.FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
