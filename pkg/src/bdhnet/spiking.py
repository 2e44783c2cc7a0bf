"""Leaky integrate-and-fire layers with image-configured neurons.

In spiking mode the forward emits exact {0, 1} spikes and backpropagation
uses the derivative of ``sigmoid((u - threshold) / alpha)`` in place of the
step.  ``smooth=True`` uses that sigmoid in the forward too, which makes the
whole stack differentiable for finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import autodiff as ad
from .numerics.autodiff import TraceError, Var


@dataclass(frozen=True)
class LIFParams:
    tau: float = 2.0
    v_th: float = 1.0
    alpha: float = 0.25

    def __post_init__(self):
        if self.tau <= 1:
            raise ValueError(f"membrane time constant must exceed 1, got {self.tau}")
        if self.v_th <= 0:
            raise ValueError("threshold must be positive")
        if self.alpha <= 0:
            raise ValueError("surrogate width must be positive")

    @property
    def leak(self) -> float:
        return 1.0 - 1.0 / self.tau


@dataclass
class NeuronState:
    u: Var
    s: Var
    t: int = 0

    @classmethod
    def zeros(cls, shape, dtype=np.float64) -> "NeuronState":
        z = np.zeros(shape, dtype=dtype)
        return cls(ad.const(z), ad.const(z.copy()), 0)


@dataclass
class NCMConfig:
    v_init: Var
    v_th_map: Var


@dataclass
class LIFRun:
    spikes: list          # one Var per timestep
    u_final: Var          # post-reset membrane potential after the last step
    membrane: list        # pre-spike membrane potential per timestep


@dataclass
class SNNOutput:
    spikes: Var           # [T, H, W, C], residual fusion of both layers
    s1: Var
    s2: Var
    u1_final: Var
    config1: NCMConfig
    config2: NCMConfig


def spike_fn(x: Var, alpha: float, smooth: bool = False) -> Var:
    if smooth:
        return ad.sigmoid(x * (1.0 / alpha))
    return ad.heaviside_surrogate(x, alpha)


def _var(x, dtype=None) -> Var:
    return x if isinstance(x, Var) else ad.const(np.asarray(x, dtype=dtype))


def lif_step(state: NeuronState, current, params: LIFParams, smooth: bool = False) -> NeuronState:
    """Leak and integrate, fire at the scalar threshold, soft reset by subtraction."""
    current = _var(current)
    if current.shape != state.u.shape:
        raise ValueError(f"current shape {current.shape} != state shape {state.u.shape}")
    u = state.u * params.leak + current
    s = spike_fn(u - params.v_th, params.alpha, smooth)
    return NeuronState(u - s * params.v_th, s, state.t + 1)


def threshold_from_potential(v_init: Var) -> Var:
    """``1 - sigmoid(v_init)``, kept strictly inside (0, 1) in the working precision."""
    eps = float(np.finfo(v_init.dtype).eps)
    tiny = float(np.finfo(v_init.dtype).tiny)
    return ad.clip(ad.sigmoid(-v_init), tiny, 1.0 - eps)


def ncm_configure(image_feat, event_feat, enc_params: dict) -> NCMConfig:
    """Initial potential from both modalities; per-neuron threshold from that potential.

    ``enc_params`` holds ``phi_w``/``phi_b`` (projection of image features)
    and ``psi_w``/``psi_b`` (shallow convolution on event features).
    """
    image_feat, event_feat = _var(image_feat), _var(event_feat)
    if image_feat.shape != event_feat.shape:
        raise ValueError(f"image features {image_feat.shape} != event features {event_feat.shape}")
    v_init = (ad.conv2d(image_feat, enc_params["phi_w"], enc_params["phi_b"])
              + ad.conv2d(event_feat, enc_params["psi_w"], enc_params["psi_b"]))
    return NCMConfig(v_init, threshold_from_potential(v_init))


def fixed_config(shape, dtype, v_th: float = 0.5) -> NCMConfig:
    """Unconfigured neurons: zero initial potential, uniform threshold."""
    return NCMConfig(ad.const(np.zeros(shape, dtype=dtype)),
                     ad.const(np.full(shape, v_th, dtype=dtype)))


def ncm_lif_run(config: NCMConfig, currents, params: LIFParams, smooth: bool = False) -> LIFRun:
    """Run configured neurons over ``currents`` (sequence or ``[T, ...]`` Var).

    The membrane at t = 0 is *set* to ``v_init``; the t = 0 current is not
    integrated.  Neurons fire when ``u >= v_th_map`` and reset by subtracting
    their own threshold.
    """
    if isinstance(currents, Var):
        steps = [currents[t] for t in range(currents.shape[0])]
    else:
        steps = [_var(c) for c in currents]
    if not steps:
        raise ValueError("need at least one timestep")
    th = config.v_th_map
    if config.v_init.shape != th.shape or steps[0].shape != th.shape:
        raise ValueError(f"configuration {th.shape} does not match currents {steps[0].shape}")
    spikes, membrane = [], []
    u = config.v_init
    for t, c in enumerate(steps):
        if t > 0:
            u = u * params.leak + c
        membrane.append(u)
        s = spike_fn(u - th, params.alpha, smooth)
        u = u - th * s
        spikes.append(s)
    return LIFRun(spikes, u, membrane)


def snn_block(inputs: Var, image_feat, weights: dict, params: LIFParams,
              ncm_enabled: bool = True, smooth: bool = False, stride: int = 1) -> SNNOutput:
    """Two LIF layers with a residual spike fusion.

    Layer 1 is configured from image and event features; layer 2 is
    configured from layer 1's final membrane potential.  The output is the
    saturating union ``s1 + s2 - s1 * s2`` (equal to ``clip(s1 + s2, 0, 1)``
    on binary spikes, smooth in relaxed mode).
    """
    inputs = _var(inputs)
    cur1 = ad.conv2d(inputs, weights["syn1_w"], weights["syn1_b"], stride=stride)
    feat_shape = cur1.shape[1:]
    if ncm_enabled:
        image_feat = _var(image_feat)
        if image_feat.shape != feat_shape:
            raise ValueError(f"image features {image_feat.shape} != spike features {feat_shape}")
        cfg1 = ncm_configure(image_feat, ad.mean(cur1, axis=0), weights)
    else:
        cfg1 = fixed_config(feat_shape, cur1.dtype)
    run1 = ncm_lif_run(cfg1, cur1, params, smooth)
    s1 = ad.stack(run1.spikes, axis=0)
    cur2 = ad.conv2d(s1, weights["syn2_w"], weights["syn2_b"])
    if ncm_enabled:
        cfg2 = NCMConfig(run1.u_final, threshold_from_potential(run1.u_final))
    else:
        cfg2 = fixed_config(feat_shape, cur1.dtype)
    run2 = ncm_lif_run(cfg2, cur2, params, smooth)
    s2 = ad.stack(run2.spikes, axis=0)
    out = s1 + s2 - s1 * s2
    return SNNOutput(out, s1, s2, run1.u_final, cfg1, cfg2)


def surrogate_backward(output: Var, upstream, parameters: dict) -> dict:
    """Backpropagate ``upstream`` through a recorded spiking forward.

    Returns ``{name: gradient}`` for every entry of ``parameters``.
    """
    if not isinstance(output, Var) or not output.requires_grad:
        raise TraceError("no recorded forward trace: run the forward on parameter Vars first")
    ad.zero_grad(parameters.values())
    ad.backward(output, upstream, wrt=parameters.values())
    return {k: v.grad for k, v in parameters.items()}
