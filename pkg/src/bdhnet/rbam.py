"""Blurry-region attention: spike-driven mask and mask-gated cross-modal fusion.

Spatial maps are ``[H, W]``; feature maps ``[H, W, C]``; spike trains
``[T, H, W, C]``.  All functions take and return tape :class:`Var` values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import autodiff as ad
from .numerics.autodiff import Var

KERNEL = 3
TAPS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


@dataclass
class MaskBundle:
    s_sum: Var
    s_local: Var
    s_map: Var
    t_map: Var
    mask: Var


@dataclass
class FusionFeatures:
    e_s: Var
    i_prime: Var
    e_s_prime: Var
    fused: Var


def _var(x) -> Var:
    return x if isinstance(x, Var) else ad.const(np.asarray(x))


def temporal_sum(spikes) -> Var:
    """Sum over time, then mean over channels: ``[T, H, W, C] -> [H, W]``."""
    spikes = _var(spikes)
    return ad.mean(ad.sum_(spikes, axis=0), axis=-1)


def offset_head(image_feat, params: dict) -> Var:
    """Per-pixel (dx, dy) for each of the 9 taps, ``[H, W, 18]``; tap-major, x first."""
    return ad.conv2d(_var(image_feat), params["off_w"], params["off_b"])


def deform_sum_offsets(s_sum, offsets) -> Var:
    """Sum of 9 bilinear samples of ``s_sum`` at the rigid 3x3 taps displaced by ``offsets``."""
    s_sum, offsets = _var(s_sum), _var(offsets)
    h, w = s_sum.shape
    if offsets.shape != (h, w, 2 * len(TAPS)):
        raise ValueError(f"offsets must be [{h}, {w}, {2 * len(TAPS)}], got {offsets.shape}")
    yy, xx = np.mgrid[0:h, 0:w]
    base_x = np.stack([xx + dx for _, dx in TAPS], axis=-1).astype(s_sum.dtype)
    base_y = np.stack([yy + dy for dy, _ in TAPS], axis=-1).astype(s_sum.dtype)
    px = offsets[:, :, 0::2] + base_x
    py = offsets[:, :, 1::2] + base_y
    return ad.sum_(ad.bilinear_gather(s_sum, px, py), axis=-1)


def deform_sum(s_sum, image_feat, offset_params: dict) -> Var:
    """Deformable 3x3 sum filter whose offsets come from a convolution of the image features."""
    return deform_sum_offsets(s_sum, offset_head(image_feat, offset_params))


def minmax_norm(x) -> Var:
    """Rescale to [0, 1]; a constant input maps to zeros."""
    x = _var(x)
    lo, hi = ad.amin(x), ad.amax(x)
    span = hi.value - lo.value
    if span == 0:
        return ad.mul(x, 0.0)
    return (x - lo) / (hi - lo)


def threshold_map(image_feat, params: dict) -> Var:
    """Per-pixel threshold in [0, 1] from Conv-ReLU-Conv on the image features."""
    h = ad.relu(ad.conv2d(_var(image_feat), params["thr1_w"], params["thr1_b"]))
    out = ad.conv2d(h, params["thr2_w"], params["thr2_b"])
    return minmax_norm(out[:, :, 0])


def make_mask(s_map, t_map, smooth: bool = False, alpha: float = 0.25) -> Var:
    """1 where the spike map reaches the threshold map, else 0.

    Backward is straight-through inside ``|s_map - t_map| <= 0.5``; the
    smoothed relaxation is ``sigmoid((s_map - t_map) / alpha)``.
    """
    s_map, t_map = _var(s_map), _var(t_map)
    if s_map.shape != t_map.shape:
        raise ValueError(f"spike map {s_map.shape} != threshold map {t_map.shape}")
    diff = s_map - t_map
    if smooth:
        return ad.sigmoid(diff * (1.0 / alpha))
    return ad.straight_through_step(diff)


def blur_mask(spikes, image_feat, params: dict, smooth: bool = False, alpha: float = 0.25) -> MaskBundle:
    s_sum = temporal_sum(spikes)
    s_local = deform_sum(s_sum, image_feat, params)
    s_map = minmax_norm(s_local)
    t_map = threshold_map(image_feat, params)
    return MaskBundle(s_sum, s_local, s_map, t_map, make_mask(s_map, t_map, smooth, alpha))


def temporal_conv(spikes, params: dict) -> Var:
    """Kernel-3 convolution along time (per channel), then a learned weighted sum over time."""
    spikes = _var(spikes)
    t = spikes.shape[0]
    zero = ad.const(np.zeros((1,) + spikes.shape[1:], dtype=spikes.dtype))
    padded = ad.concat([zero, spikes, zero], axis=0)
    w = params["tc_w"]
    out = padded[0:t] * w[0] + padded[1:t + 1] * w[1] + padded[2:t + 2] * w[2] + params["tc_b"]
    mix = ad.reshape(params["tc_mix"], (t, 1, 1, 1))
    return ad.sum_(out * mix, axis=0)


# ---------------------------------------------------------------- attention

def _window_size(h: int, w: int, window: int) -> int:
    return max(1, min(window, h, w))


def _partition(x: Var, win: int) -> tuple[Var, tuple]:
    h, w, c = x.shape
    ph, pw = (-h) % win, (-w) % win
    if ph or pw:
        x = ad.pad_reflect(x, ((0, ph), (0, pw), (0, 0)))
    hp, wp = h + ph, w + pw
    x = ad.reshape(x, (hp // win, win, wp // win, win, c))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, ((hp // win) * (wp // win), win * win, c)), (h, w, hp, wp)


def _unpartition(x: Var, win: int, dims: tuple) -> Var:
    h, w, hp, wp = dims
    c = x.shape[-1]
    x = ad.reshape(x, (hp // win, wp // win, win, win, c))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    x = ad.reshape(x, (hp, wp, c))
    if hp != h or wp != w:
        x = x[:h, :w, :]
    return x


def _split_heads(x: Var, heads: int) -> Var:
    n, t, c = x.shape
    return ad.transpose(ad.reshape(x, (n, t, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x: Var) -> Var:
    n, h, t, d = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (n, t, h * d))


def window_cross_attention(query_feat: Var, context_feat: Var, wq: Var, wk: Var, wv: Var, wo: Var,
                           heads: int, window: int) -> Var:
    """Multi-head attention from ``query_feat`` tokens to ``context_feat`` tokens in w x w windows."""
    h, w, c = query_feat.shape
    if c % heads:
        raise ValueError(f"{c} channels do not split into {heads} heads")
    win = _window_size(h, w, window)
    q_tok, dims = _partition(query_feat, win)
    k_tok, _ = _partition(context_feat, win)
    q = _split_heads(q_tok @ wq, heads)
    k = _split_heads(k_tok @ wk, heads)
    v = _split_heads(k_tok @ wv, heads)
    att = _merge_heads(ad.softmax_attention(q, k, v)) @ wo
    return _unpartition(att, win, dims)


def masked_cross_attention(i, e_s, mask, attn_params: dict, heads: int = 4, window: int = 8):
    """Image queries events where the mask is 1; events query the image where it is 0.

    ``mask=None`` leaves both directions ungated.  Returns ``(i_prime, e_s_prime)``.
    """
    i, e_s = _var(i), _var(e_s)
    if i.shape != e_s.shape:
        raise ValueError(f"image features {i.shape} != event features {e_s.shape}")
    p = attn_params
    a_ie = window_cross_attention(i, e_s, p["ie_q"], p["ie_k"], p["ie_v"], p["ie_o"], heads, window)
    a_ei = window_cross_attention(e_s, i, p["ei_q"], p["ei_k"], p["ei_v"], p["ei_o"], heads, window)
    if mask is None:
        return i + a_ie, e_s + a_ei
    mask = _var(mask)
    m = ad.reshape(mask, mask.shape + (1,))
    return i + m * a_ie, e_s + (1.0 - m) * a_ei


def fuse(i_prime, e_s_prime, params: dict) -> Var:
    """Concat -> per-pixel residual MLP (2C -> 2C) -> 3x3 conv (2C -> C)."""
    i_prime, e_s_prime = _var(i_prime), _var(e_s_prime)
    if i_prime.shape != e_s_prime.shape:
        raise ValueError(f"{i_prime.shape} != {e_s_prime.shape}")
    x = ad.concat([i_prime, e_s_prime], axis=-1)
    hidden = ad.relu(x @ params["mlp1_w"] + params["mlp1_b"])
    x = x + (hidden @ params["mlp2_w"] + params["mlp2_b"])
    return ad.conv2d(x, params["fconv_w"], params["fconv_b"])
