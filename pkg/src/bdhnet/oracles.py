"""Slow, loop-based reference implementations.

Each function here is written independently of the vectorised code it is
used to check (plain Python loops, ``math`` scalars) and is only suitable for
small inputs.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0) -> np.ndarray:
    h, w, cin = x.shape
    k, _, _, cout = kernel.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((ho, wo, cout))
    for oy in range(ho):
        for ox in range(wo):
            for co in range(cout):
                acc = float(bias[co])
                for ky in range(k):
                    for kx in range(k):
                        iy = oy * stride + ky - padding
                        ix = ox * stride + kx - padding
                        if 0 <= iy < h and 0 <= ix < w:
                            for ci in range(cin):
                                acc += float(x[iy, ix, ci]) * float(kernel[ky, kx, ci, co])
                out[oy, ox, co] = acc
    return out


def bilinear(grid, x: float, y: float) -> float:
    h, w = len(grid), len(grid[0])
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    xi, yi = int(math.floor(x)), int(math.floor(y))
    total = 0.0
    for ny in (yi, yi + 1):
        for nx in (xi, xi + 1):
            wgt = max(0.0, 1.0 - abs(x - nx)) * max(0.0, 1.0 - abs(y - ny))
            if wgt > 0.0:
                total += wgt * float(grid[min(ny, h - 1)][min(nx, w - 1)])
    return total


def attention(q, k, v) -> np.ndarray:
    n, d = len(q), len(q[0])
    out = np.zeros((n, len(v[0])))
    for i in range(n):
        logits = [sum(q[i][a] * k[j][a] for a in range(d)) / math.sqrt(d) for j in range(len(k))]
        top = max(logits)
        weights = [math.exp(z - top) for z in logits]
        z = sum(weights)
        for j, wgt in enumerate(weights):
            for a in range(len(v[0])):
                out[i, a] += wgt / z * v[j][a]
    return out


def deform_sum(s_sum, offsets) -> np.ndarray:
    """offsets[y, x, 2k] = dx, offsets[y, x, 2k+1] = dy for tap k in row-major 3x3 order."""
    h, w = s_sum.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            k = 0
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    out[y, x] += bilinear(s_sum, x + dx + offsets[y, x, 2 * k], y + dy + offsets[y, x, 2 * k + 1])
                    k += 1
    return out


def box_sum_replicate(s) -> np.ndarray:
    h, w = s.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    out[y, x] += s[min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)]
    return out


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = np.ravel(a), np.ravel(b)
    mse = sum((float(p) - float(q)) ** 2 for p, q in zip(a, b)) / len(a)
    return 99.0 if mse == 0 else 10.0 * math.log10(peak * peak / mse)


def ssim(a, b, peak: float = 1.0, size: int = 11, sigma: float = 1.5) -> float:
    half = (size - 1) / 2.0
    g = [[math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma ** 2)) for j in range(size)]
         for i in range(size)]
    total = sum(map(sum, g))
    g = [[v / total for v in row] for row in g]
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    h, w = a.shape
    vals = []
    for y in range(h - size + 1):
        for x in range(w - size + 1):
            ma = mb = saa = sbb = sab = 0.0
            for i in range(size):
                for j in range(size):
                    p, q, wgt = float(a[y + i, x + j]), float(b[y + i, x + j]), g[i][j]
                    ma += wgt * p
                    mb += wgt * q
            for i in range(size):
                for j in range(size):
                    p, q, wgt = float(a[y + i, x + j]) - ma, float(b[y + i, x + j]) - mb, g[i][j]
                    saa += wgt * p * p
                    sbb += wgt * q * q
                    sab += wgt * p * q
            vals.append(((2 * ma * mb + c1) * (2 * sab + c2)) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2)))
    return sum(vals) / len(vals)


def lif_scalar(u0: float, currents, tau: float, v_th: float):
    """Vanilla LIF on one neuron; returns (spikes, post-reset potentials)."""
    u, spikes, pots = u0, [], []
    for c in currents:
        u = (1.0 - 1.0 / tau) * u + c
        s = 1.0 if u >= v_th else 0.0
        u -= v_th * s
        spikes.append(s)
        pots.append(u)
    return spikes, pots


def configured_lif_scalar(v_init: float, currents, tau: float):
    """Configured neuron: potential set to v_init at t = 0, threshold 1 - sigmoid(v_init)."""
    th = 1.0 - 1.0 / (1.0 + math.exp(-v_init))
    u, spikes = v_init, []
    for t, c in enumerate(currents):
        if t > 0:
            u = (1.0 - 1.0 / tau) * u + c
        s = 1.0 if u >= th else 0.0
        u -= th * s
        spikes.append(s)
    return spikes, u


def first_spike_root(lo: float = -10.0, hi: float = 10.0, iters: int = 200) -> float:
    """Root of v + sigmoid(v) - 1 by bisection (the function is strictly increasing)."""
    f = lambda v: v + 1.0 / (1.0 + math.exp(-v)) - 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) >= 0:
            hi = mid
        else:
            lo = mid
    return hi


def trapezoid_dense(frames, n: int = 4001) -> np.ndarray:
    """Mean over time of the piecewise-linear interpolation of frames, by dense sampling."""
    frames = np.asarray(frames, dtype=np.float64)
    k = len(frames) - 1
    s = np.linspace(0.0, k, n)
    lo = np.minimum(np.floor(s).astype(int), k - 1)
    frac = (s - lo)[:, None, None]
    vals = (1 - frac) * frames[lo] + frac * frames[lo + 1]
    # dense trapezoid of the interpolant
    return (vals[:-1] + vals[1:]).sum(axis=0) / (2.0 * (n - 1))
