"""Synthetic event-camera physics.

Sharp scene rendering, blur accumulation over the exposure, log-intensity
threshold-crossing events, voxel binning, and the closed-form double-integral
(EDI) reconstruction that inverts blur given events.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics.rng import Rng

MOTIONS = ("static", "bar", "edge", "texture")
_CROSS_TOL = 1e-9
_BIN_TOL = 1e-6


@dataclass
class SceneSpec:
    """What to render.

    ``velocity`` is pixels per frame for ``bar``/``texture`` and radians per
    frame for ``edge``.  With ``log_quantum`` set, every rendered intensity is
    ``exp(-k * log_quantum)`` for an integer ``k``, so that contrast
    thresholds dividing the quantum see exact log steps.
    """

    height: int = 32
    width: int = 32
    frames: int = 9
    motion: str = "bar"
    velocity: float = 1.0
    exposure: float = 1.0
    log_quantum: float | None = 0.2
    object_size: int | None = None


@dataclass
class SharpSequence:
    frames: np.ndarray          # [N, H, W], linear intensity in (0, 1]
    timestamps: np.ndarray      # [N], seconds
    latent_index: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.frames.ndim != 3 or len(self.frames) != len(self.timestamps):
            raise ValueError("frames must be [N, H, W] with one timestamp per frame")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if np.any(self.frames <= 0):
            raise ValueError("intensities must be strictly positive")

    @property
    def exposure(self) -> float:
        return float(self.timestamps[-1] - self.timestamps[0])

    @property
    def latent_time(self) -> float:
        return float(self.timestamps[self.latent_index])

    @property
    def latent(self) -> np.ndarray:
        return self.frames[self.latent_index]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1:]


@dataclass
class EventStream:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    sensor_size: tuple[int, int]
    exposure: float
    contrast: float

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        self.p = np.asarray(self.p, dtype=np.int64).reshape(-1)
        self.sensor_size = (int(self.sensor_size[0]), int(self.sensor_size[1]))
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event field arrays differ in length")
        if self.contrast <= 0:
            raise ValueError("contrast threshold must be positive")
        h, w = self.sensor_size
        if n:
            if np.any(np.diff(self.t) < 0):
                raise ValueError("event timestamps must be non-decreasing")
            if self.x.min() < 0 or self.x.max() >= w or self.y.min() < 0 or self.y.max() >= h:
                raise ValueError("event coordinates outside the sensor")
            if not np.all(np.abs(self.p) == 1):
                raise ValueError("polarity must be +1 or -1")
            if self.t[0] < 0 or self.t[-1] > self.exposure + _BIN_TOL * max(self.exposure, 1.0):
                raise ValueError("event timestamps outside the exposure window")

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def empty(cls, sensor_size, exposure: float, contrast: float) -> "EventStream":
        z = np.zeros(0)
        return cls(z, z, z, z, sensor_size, exposure, contrast)


@dataclass
class VoxelGrid:
    grid: np.ndarray            # [H, W, b] signed counts
    bins: int = field(init=False)

    def __post_init__(self):
        self.bins = int(self.grid.shape[-1])


# ---------------------------------------------------------------- rendering

def _levels(spec: SceneSpec, rng: Rng, n: int) -> np.ndarray:
    """``n`` distinct intensities in [0.05, 1]; at least 3 quanta apart when quantized."""
    if spec.log_quantum:
        kmax = int(np.floor(np.log(20.0) / spec.log_quantum))
        ks = rng.choice(np.arange(0, kmax + 1, 3), size=n, replace=False)
        return np.exp(-ks * spec.log_quantum)
    return rng.uniform(0.05, 1.0, size=n)


def _quantize(values: np.ndarray, q: float | None) -> np.ndarray:
    if not q:
        return values
    return np.exp(-np.round(-np.log(values) / q) * q)


def synthesize_scene(spec: SceneSpec, rng: Rng) -> SharpSequence:
    """Render a deterministic moving scene sampled at pixel centres."""
    if spec.motion not in MOTIONS:
        raise ValueError(f"unknown motion '{spec.motion}'; expected one of {MOTIONS}")
    if spec.height < 1 or spec.width < 1:
        raise ValueError("zero-area sensor")
    if spec.frames < 1 or (spec.frames > 1 and spec.frames % 2 == 0):
        raise ValueError("frame count must be odd so the latent frame sits at mid-exposure")
    h, w, n = spec.height, spec.width, spec.frames
    size = spec.object_size if spec.object_size is not None else max(2, min(h, w) // 4)
    if size <= 0:
        raise ValueError("zero-area object")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    bg, fg = _levels(spec, rng, 2)
    frames = np.empty((n, h, w))
    if spec.motion == "texture":
        cells = rng.split("texture")
        tex = _quantize(cells.uniform(0.05, 1.0, size=(size, size)), spec.log_quantum)
    x0 = float(rng.integers(0, max(1, w // 4)))
    y0 = float(rng.integers(0, max(1, h - size)))
    theta0 = float(rng.uniform(0, np.pi))
    for i in range(n):
        step = i - (n // 2) if spec.motion == "edge" else i
        if spec.motion == "static":
            img = np.full((h, w), bg)
            img[(xx >= x0) & (xx < x0 + size)] = fg
        elif spec.motion == "bar":
            left = x0 + spec.velocity * step
            img = np.where((xx >= left) & (xx < left + size), fg, bg)
        elif spec.motion == "edge":
            th = theta0 + spec.velocity * step
            img = np.where((xx - w / 2) * np.cos(th) + (yy - h / 2) * np.sin(th) > 0, fg, bg)
        else:
            left = x0 + spec.velocity * step
            u = np.floor(xx - left).astype(np.int64)
            v = np.floor(yy - y0).astype(np.int64)
            inside = (u >= 0) & (u < size) & (v >= 0) & (v < size)
            img = np.full((h, w), bg)
            img[inside] = tex[v[inside], u[inside]]
        frames[i] = img
    stamps = np.linspace(0.0, spec.exposure, n) if n > 1 else np.zeros(1)
    return SharpSequence(frames, stamps, n // 2)


# ---------------------------------------------------------------- blur

def _running_trapezoid(samples) -> np.ndarray:
    """Trapezoidal mean of equally spaced samples, as a running mean of interval averages.

    The running form returns a constant integrand bit-exactly.
    """
    samples = list(samples)
    if len(samples) == 1:
        return np.array(samples[0], dtype=np.float64, copy=True)
    acc = None
    for k in range(len(samples) - 1):
        mid = (samples[k] + samples[k + 1]) / 2.0
        acc = np.array(mid, copy=True) if acc is None else acc + (mid - acc) / (k + 1)
    return acc


def accumulate_blur(seq: SharpSequence) -> np.ndarray:
    """Mean intensity over the exposure (trapezoid rule across frames)."""
    return _running_trapezoid(seq.frames)


def blur_pyramid(blurry: np.ndarray, levels: int = 3) -> list[np.ndarray]:
    """Scales 1, 1/2, 1/4, ... by 2x2 averaging."""
    out = [np.asarray(blurry)]
    for _ in range(levels - 1):
        b = out[-1]
        h, w = b.shape[:2]
        if h % 2 or w % 2:
            raise ValueError(f"cannot halve an image of size {h}x{w}")
        out.append(b.reshape(h // 2, 2, w // 2, 2, *b.shape[2:]).mean(axis=(1, 3)))
    return out


# ---------------------------------------------------------------- events

def _round9(t: np.ndarray) -> np.ndarray:
    # canonical 9-decimal values, so .evt text round-trips bit-exactly
    return np.array([float(f"{v:.9f}") for v in t], dtype=np.float64)


def generate_events(seq: SharpSequence, c: float) -> EventStream:
    """Emit an event each time a pixel's log intensity moves ``c`` from its reference level.

    Log intensity is linear in time between frames; event times are the
    interpolated crossing instants.
    """
    if c <= 0:
        raise ValueError("contrast threshold must be positive")
    if np.any(seq.frames <= 0):
        raise ValueError("non-positive intensity")
    logs = np.log(seq.frames)
    h, w = seq.shape
    ref = logs[0].copy()
    ts, xs, ys, ps = [], [], [], []
    for k in range(len(logs) - 1):
        la, lb = logs[k], logs[k + 1]
        t0, dt = seq.timestamps[k], seq.timestamps[k + 1] - seq.timestamps[k]
        while True:
            up = lb - ref >= c * (1.0 - _CROSS_TOL)
            down = ref - lb >= c * (1.0 - _CROSS_TOL)
            fire = up | down
            if not fire.any():
                break
            pol = np.where(up, 1, -1)
            level = ref + pol * c
            delta = lb - la
            frac = np.divide(level - la, delta, out=np.ones_like(la), where=delta != 0)
            frac = np.clip(frac, 0.0, 1.0)
            yy, xx = np.nonzero(fire)
            ts.append(t0 + frac[fire] * dt)
            xs.append(xx)
            ys.append(yy)
            ps.append(pol[fire])
            ref = np.where(fire, level, ref)
    if not ts:
        return EventStream.empty((h, w), seq.exposure, c)
    t = _round9(np.concatenate(ts))
    x, y, p = np.concatenate(xs), np.concatenate(ys), np.concatenate(ps)
    order = np.lexsort((x, y, t))
    return EventStream(t[order], x[order], y[order], p[order], (h, w), seq.exposure, c)


def replay_log_frames(events: EventStream, latent: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Log intensity at ``times`` implied by ``latent`` and the signed event counts since mid-exposure."""
    out = []
    f = events.exposure / 2.0
    for t in times:
        lo, hi = (f, t) if t >= f else (t, f)
        sel = (events.t > lo) & (events.t <= hi)
        count = np.zeros(latent.shape)
        np.add.at(count, (events.y[sel], events.x[sel]), events.p[sel])
        out.append(np.log(latent) + (1 if t >= f else -1) * events.contrast * count)
    return np.array(out)


def _interval_counts(events: EventStream, samples: int) -> np.ndarray:
    """Signed counts per pixel for each interval ``(s_k, s_{k+1}]`` of the sample grid."""
    h, w = events.sensor_size
    counts = np.zeros((samples - 1, h, w), dtype=np.int64)
    if len(events) == 0:
        return counts
    dt = events.exposure / (samples - 1)
    k = np.ceil(events.t / dt - _BIN_TOL).astype(np.int64) - 1
    k = np.clip(k, 0, samples - 2)
    np.add.at(counts, (k, events.y, events.x), events.p)
    return counts


def edi_reconstruct(blurry: np.ndarray, events: EventStream, f: float | None = None,
                    samples: int = 9, contrast: float | None = None) -> np.ndarray:
    """Latent sharp image at time ``f`` from the blurry image and its events.

    The inner integral is the signed event count between ``f`` and each of
    ``samples`` equally spaced instants; the outer integral is the trapezoid
    over those instants (the same grid the blur was accumulated on).
    ``contrast`` overrides the stream's threshold.
    """
    blurry = np.asarray(blurry, dtype=np.float64)
    if blurry.shape != events.sensor_size:
        raise ValueError(f"blurry image {blurry.shape} does not match sensor {events.sensor_size}")
    c = events.contrast if contrast is None else contrast
    if samples < 2 or events.exposure <= 0:
        return blurry.copy()
    dt = events.exposure / (samples - 1)
    f = events.exposure / 2.0 if f is None else f
    m = int(round(f / dt))
    if abs(m * dt - f) > _BIN_TOL * max(events.exposure, 1.0) or not 0 <= m < samples:
        raise ValueError(f"latent time {f} is not on the {samples}-sample grid")
    counts = _interval_counts(events, samples)
    level = np.zeros((samples,) + blurry.shape, dtype=np.int64)
    for i in range(m + 1, samples):
        level[i] = level[i - 1] + counts[i - 1]
    for i in range(m - 1, -1, -1):
        level[i] = level[i + 1] - counts[i]
    denom = _running_trapezoid(np.exp(c * level[i]) for i in range(samples))
    if np.any(denom <= 0) or not np.all(np.isfinite(denom)):
        raise ValueError("EDI denominator is not positive; event stream is corrupt")
    return blurry / denom


# ---------------------------------------------------------------- voxels

def voxelize(events: EventStream, bins: int, dtype=np.float32) -> VoxelGrid:
    """Signed event counts in ``bins`` equal slices of the exposure, shape [H, W, bins]."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    h, w = events.sensor_size
    counts = np.zeros((h, w, bins), dtype=np.int64)
    if len(events):
        if events.exposure > 0:
            b = np.floor(events.t / events.exposure * bins).astype(np.int64)
        else:
            b = np.zeros(len(events), dtype=np.int64)
        b = np.clip(b, 0, bins - 1)
        np.add.at(counts, (events.y, events.x, b), events.p)
    return VoxelGrid(counts.astype(dtype))
