"""RGB <-> HSV conversion on NCHW tensors.

Hue is a fraction of a full turn in [0, 1). The forward RGB->HSV map is a
single tape operation with a hand-written backward rule; at achromatic
pixels (max == min) hue and its gradient are 0, and at V == 0 saturation and
its gradient are 0.
"""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, make_op

RANGE_TOL = 1e-6


class ColorDomainError(ValueError):
    pass


def _check_rgb(x: np.ndarray, what: str = "RGB") -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"{what} image must have shape (N, 3, H, W), got {x.shape}")
    lo, hi = float(x.min()), float(x.max())
    if lo < -RANGE_TOL or hi > 1 + RANGE_TOL:
        raise ColorDomainError(f"{what} values must lie in [0, 1], found range [{lo:.6g}, {hi:.6g}]")


# offsets of the sector formula, indexed by the argmax channel
_SECTOR_OFFSET = np.array([0.0, 2.0, 4.0])
# numerator channels (a, b) of the sector formula: hue ~ (c_a - c_b) / delta
_NUM_A = np.array([1, 2, 0])
_NUM_B = np.array([2, 0, 1])


def _hsv_forward(x: np.ndarray):
    imax = np.argmax(x, axis=1)[:, None]          # ties resolve to R, then G
    imin = np.argmin(x, axis=1)[:, None]
    v = np.take_along_axis(x, imax, axis=1)
    mn = np.take_along_axis(x, imin, axis=1)
    delta = v - mn
    chroma = delta > 0
    safe_delta = np.where(chroma, delta, 1.0)
    safe_v = np.where(v > 0, v, 1.0)
    s = np.where(v > 0, delta / safe_v, 0.0)

    a = np.take_along_axis(x, _NUM_A[imax], axis=1)
    b = np.take_along_axis(x, _NUM_B[imax], axis=1)
    num = a - b
    h = (num / safe_delta + _SECTOR_OFFSET[imax]) / 6.0
    h = np.where(h < 0, h + 1.0, h)
    h = np.where(chroma, h, 0.0)
    h = np.where(h >= 1.0, 0.0, h)   # rounding can land exactly on 1
    saved = dict(imax=imax, imin=imin, v=v, delta=safe_delta, chroma=chroma, num=num)
    return np.concatenate([h, s, v], axis=1).astype(x.dtype), saved


def _hsv_backward(g: np.ndarray, x: np.ndarray, saved) -> np.ndarray:
    imax, imin, v = saved["imax"], saved["imin"], saved["v"]
    delta, chroma, num = saved["delta"], saved["chroma"], saved["num"]
    gh, gs, gv = g[:, 0:1], g[:, 1:2], g[:, 2:3]
    out = np.zeros_like(x)

    def scatter(idx, val):
        # idx values are per-pixel channel indices; add val at those channels
        for c in range(3):
            out[:, c:c + 1] += np.where(idx == c, val, 0.0)

    # V = x[imax]
    scatter(imax, gv)
    # S = delta / V = 1 - min / V, only where chroma (implies V > 0)
    safe_v = np.where(v > 0, v, 1.0)
    mn = v - np.where(chroma, delta, 0.0)
    gs_c = np.where(chroma, gs, 0.0)
    scatter(imax, gs_c * mn / (safe_v * safe_v))
    scatter(imin, -gs_c / safe_v)
    # H = (num / delta + offset) / 6; num = x[a] - x[b]; delta = x[imax] - x[imin]
    gh_c = np.where(chroma, gh, 0.0)
    g_num = gh_c / (6.0 * delta)
    g_delta = -gh_c * num / (6.0 * delta * delta)
    scatter(_NUM_A[imax], g_num)
    scatter(_NUM_B[imax], -g_num)
    scatter(imax, g_delta)
    scatter(imin, -g_delta)
    return out


def rgb_to_hsv(img: Tensor) -> Tensor:
    """Hexcone RGB -> HSV. Differentiable almost everywhere."""
    x = img.data
    _check_rgb(x)
    x = np.clip(x, 0.0, 1.0)
    out, saved = _hsv_forward(x)
    return make_op(out, (img,), lambda g: (_hsv_backward(g, x, saved).astype(x.dtype),), "rgb_to_hsv")


def hsv_to_rgb(img: Tensor) -> Tensor:
    """Inverse conversion. Not differentiable (used by the style filters only)."""
    x = img.data
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"HSV image must have shape (N, 3, H, W), got {x.shape}")
    h, s, v = x[:, 0], x[:, 1], x[:, 2]
    if h.min() < -RANGE_TOL or h.max() >= 1 + RANGE_TOL:
        raise ColorDomainError("hue must lie in [0, 1)")
    if min(s.min(), v.min()) < -RANGE_TOL or max(s.max(), v.max()) > 1 + RANGE_TOL:
        raise ColorDomainError("saturation and value must lie in [0, 1]")
    return Tensor(hsv_to_rgb_array(x), dtype=x.dtype)


def hsv_to_rgb_array(x: np.ndarray) -> np.ndarray:
    h = np.mod(x[:, 0], 1.0)
    s = np.clip(x[:, 1], 0.0, 1.0)
    v = np.clip(x[:, 2], 0.0, 1.0)
    h6 = h * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=1).astype(x.dtype)


def rgb_to_hsv_array(x: np.ndarray) -> np.ndarray:
    return _hsv_forward(np.clip(x, 0.0, 1.0))[0]


def hue_sat_channels(img: Tensor) -> tuple[Tensor, Tensor]:
    """(hue, saturation) channels, each (N, 1, H, W), with gradients to RGB."""
    hsv = rgb_to_hsv(img)
    return hsv[:, 0:1], hsv[:, 1:2]


def luminance(x: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma of an (N, 3, H, W) or (3, H, W) array."""
    w = np.array([0.299, 0.587, 0.114])
    if x.ndim == 4:
        return np.tensordot(w, x, axes=([0], [1]))
    return np.tensordot(w, x, axes=([0], [0]))
