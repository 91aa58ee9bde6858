"""Generator and discriminator objectives."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .color import hue_sat_channels
from .tensor import Tensor


class TrainingDivergence(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite {component} loss: {value}")
        self.component = component


@dataclass
class LossWeights:
    lambda_recon: float = 100.0
    lambda_perceptual: float = 1.0
    lambda_hsv: float = 10.0

    def __post_init__(self):
        for name in ("lambda_recon", "lambda_perceptual", "lambda_hsv"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    adversarial: float
    recon: float
    perceptual: float
    hsv: float
    total: float


def hsv_loss(pred: Tensor, target: Tensor, circular: bool = False) -> Tensor:
    """Mean squared hue difference plus mean squared saturation difference.

    With ``circular`` the hue difference is wrapped, min(|d|, 1 - |d|).
    """
    if pred.shape != target.shape:
        raise T.ShapeError(f"hsv_loss: shape mismatch {pred.shape} vs {target.shape}")
    h_p, s_p = hue_sat_channels(pred)
    with T.no_grad():
        h_t, s_t = hue_sat_channels(target.detach())
    if circular:
        d = T.absolute(h_p - h_t)
        d = T.minimum(d, 1.0 - d)
        l_hue = T.mean_all(d * d)
    else:
        l_hue = T.mean_sq(h_p, h_t)
    return l_hue + T.mean_sq(s_p, s_t)


def recon_loss(pred: Tensor, target: Tensor) -> Tensor:
    return T.mean_abs(pred, target)


class FeatureExtractor:
    """Frozen random conv pyramid used as the perceptual feature space.

    Three stride-2 3x3 conv stages (3 -> 16 -> 32 -> 64 channels) with
    leaky-ReLU; weights are N(0, 0.1) from ``seed`` and never updated.
    """

    channels = (3, 16, 32, 64)

    def __init__(self, seed: int = 1234, negative_slope: float = 0.2):
        rng = np.random.default_rng(seed)
        self.negative_slope = negative_slope
        self._weights = []
        for c_in, c_out in zip(self.channels[:-1], self.channels[1:]):
            w = rng.normal(0.0, 0.1, size=(c_out, c_in, 3, 3))
            self._weights.append((w, np.zeros(c_out)))

    def features(self, x: Tensor) -> list:
        out = []
        h = x
        for w, b in self._weights:
            # frozen: plain tensors, never requires_grad
            wt, bt = Tensor(w, dtype=x.dtype), Tensor(b, dtype=x.dtype)
            h = T.leaky_relu(T.conv2d(h, wt, bt, stride=2, padding=1), self.negative_slope)
            out.append(h)
        return out


def perceptual_loss(pred: Tensor, target: Tensor, fx: FeatureExtractor) -> Tensor:
    """Mean over stages of the per-element mean squared feature difference."""
    if pred.shape != target.shape:
        raise T.ShapeError(f"perceptual_loss: shape mismatch {pred.shape} vs {target.shape}")
    fp = fx.features(pred)
    with T.no_grad():
        ft = fx.features(target.detach())
    total = None
    for a, b in zip(fp, ft):
        term = T.mean_sq(a, b)
        total = term if total is None else total + term
    return total * (1.0 / len(fp))


def adversarial_g_loss(fake_logits: Tensor) -> Tensor:
    """Non-saturating generator loss: fakes should be scored as real."""
    return T.bce_with_logits(fake_logits, 1.0)


def adversarial_d_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    return (T.bce_with_logits(real_logits, 1.0) + T.bce_with_logits(fake_logits, 0.0)) * 0.5


def generator_total_loss(adv: Tensor, recon: Tensor, perceptual: Tensor, hsv: Tensor,
                         w: LossWeights) -> tuple[Tensor, LossBreakdown]:
    parts = {"adversarial": adv, "recon": recon, "perceptual": perceptual, "hsv": hsv}
    for name, t in parts.items():
        v = t.item()
        if not math.isfinite(v):
            raise TrainingDivergence(name, v)
    total = adv + recon * w.lambda_recon + perceptual * w.lambda_perceptual + hsv * w.lambda_hsv
    if not math.isfinite(total.item()):
        raise TrainingDivergence("total", total.item())
    breakdown = LossBreakdown(adv.item(), recon.item(), perceptual.item(), hsv.item(),
                              total.item())
    return total, breakdown
