"""Plain numpy kernels: convolution, bilinear sampling, softmax attention.

Feature maps are channels-last, ``[H, W, C]`` or batched ``[N, H, W, C]``.
Kernels are ``[K, K, Cin, Cout]``.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Incompatible operand shapes; ``dim`` names the offending dimension."""

    def __init__(self, op: str, dim: str, got, expected):
        self.op, self.dim, self.got, self.expected = op, dim, got, expected
        super().__init__(f"{op}: dimension '{dim}' is {got}, expected {expected}")


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError("conv2d", "rank", x.ndim, "3 or 4")


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, padding: int | None = None) -> np.ndarray:
    """Cross-correlation, zero padded.  ``padding=None`` means ``(K - 1) // 2``."""
    xb, squeeze = _batched(x)
    k = kernel.shape[0]
    if kernel.ndim != 4 or kernel.shape[1] != k:
        raise ShapeError("conv2d", "kernel", kernel.shape, "[K, K, Cin, Cout]")
    if k % 2 == 0:
        raise ShapeError("conv2d", "K", k, "odd")
    if xb.shape[-1] != kernel.shape[2]:
        raise ShapeError("conv2d", "Cin", xb.shape[-1], kernel.shape[2])
    cout = kernel.shape[3]
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("conv2d", "Cout", bias.shape, (cout,))
    pad = (k - 1) // 2 if padding is None else padding
    n, h, w, cin = xb.shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", "H/W", (h, w), f">= {k - 2 * pad}")
    xp = np.pad(xb, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xb
    out = np.zeros((n, ho, wo, cout), dtype=np.result_type(x, kernel))
    for ky in range(k):
        for kx in range(k):
            patch = xp[:, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride, :]
            out += patch @ kernel[ky, kx]
    if bias is not None:
        out += bias
    return out[0] if squeeze else out


def conv2d_backward(g: np.ndarray, x: np.ndarray, kernel: np.ndarray,
                    stride: int = 1, padding: int | None = None):
    """Adjoints of :func:`conv2d` with respect to (input, kernel, bias)."""
    xb, squeeze = _batched(x)
    gb = g[None] if squeeze else g
    k = kernel.shape[0]
    pad = (k - 1) // 2 if padding is None else padding
    n, h, w, cin = xb.shape
    _, ho, wo, cout = gb.shape
    xp = np.pad(xb, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xb
    gx = np.zeros_like(xp)
    gk = np.zeros_like(kernel)
    g2 = gb.reshape(-1, cout)
    for ky in range(k):
        for kx in range(k):
            sl = (slice(None), slice(ky, ky + stride * (ho - 1) + 1, stride),
                  slice(kx, kx + stride * (wo - 1) + 1, stride), slice(None))
            gk[ky, kx] = xp[sl].reshape(-1, cin).T @ g2
            gx[sl] += gb @ kernel[ky, kx].T
    if pad:
        gx = gx[:, pad:pad + h, pad:pad + w, :]
    gbias = g2.sum(axis=0)
    return (gx[0] if squeeze else gx), gk, gbias


def _bilinear_setup(h: int, w: int, px: np.ndarray, py: np.ndarray):
    xc = np.clip(px, 0.0, w - 1.0)
    yc = np.clip(py, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    # int64 corners would promote float32 weights to float64
    wx = (xc - x0).astype(np.result_type(px, np.float32), copy=False)
    wy = (yc - y0).astype(np.result_type(py, np.float32), copy=False)
    return x0, x1, y0, y1, wx, wy


def bilinear_gather(grid: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Sample ``grid[H, W]`` at columns ``px`` and rows ``py``; border clamped."""
    h, w = grid.shape
    x0, x1, y0, y1, wx, wy = _bilinear_setup(h, w, px, py)
    top = (1.0 - wx) * grid[y0, x0] + wx * grid[y0, x1]
    bot = (1.0 - wx) * grid[y1, x0] + wx * grid[y1, x1]
    return (1.0 - wy) * top + wy * bot


def bilinear_gather_backward(g: np.ndarray, grid: np.ndarray, px: np.ndarray, py: np.ndarray):
    """Adjoints of :func:`bilinear_gather` with respect to (grid, px, py)."""
    h, w = grid.shape
    x0, x1, y0, y1, wx, wy = _bilinear_setup(h, w, px, py)
    v00, v01, v10, v11 = grid[y0, x0], grid[y0, x1], grid[y1, x0], grid[y1, x1]
    ggrid = np.zeros(h * w, dtype=grid.dtype)
    for yi, xi, wgt in ((y0, x0, (1 - wy) * (1 - wx)), (y0, x1, (1 - wy) * wx),
                        (y1, x0, wy * (1 - wx)), (y1, x1, wy * wx)):
        ggrid += np.bincount((yi * w + xi).ravel(), weights=(g * wgt).ravel(), minlength=h * w)
    inside_x = (px > 0.0) & (px < w - 1.0)
    inside_y = (py > 0.0) & (py < h - 1.0)
    gpx = g * ((1 - wy) * (v01 - v00) + wy * (v11 - v10)) * inside_x
    gpy = g * ((1 - wx) * (v10 - v00) + wx * (v11 - v01)) * inside_y
    return ggrid.reshape(h, w).astype(grid.dtype), gpx, gpy


def bilinear_sample(grid: np.ndarray, x: float, y: float) -> float:
    """Single bilinear sample at column ``x``, row ``y`` (clamp-to-edge)."""
    return float(bilinear_gather(np.asarray(grid, dtype=np.float64),
                                 np.array([x], dtype=np.float64),
                                 np.array([y], dtype=np.float64))[0])


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes (leading axes batch)."""
    d = q.shape[-1]
    if d == 0:
        raise ShapeError("softmax_attention", "d", 0, "> 0")
    if k.shape[-1] != d:
        raise ShapeError("softmax_attention", "d", k.shape[-1], d)
    if v.shape[-2] != k.shape[-2]:
        raise ShapeError("softmax_attention", "M", v.shape[-2], k.shape[-2])
    logits = q @ np.swapaxes(k, -1, -2) / np.sqrt(d)
    return softmax(logits, axis=-1) @ v
