"""Full-reference image quality metrics: MSE, PSNR, SSIM and pixel-domain VIF.

All metrics accumulate in float64. Inputs are RGB arrays in [0, 1] shaped
(3, H, W) or (1, 3, H, W); SSIM and VIF also accept (H, W) grayscale and
work on BT.601 luma for colour input.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .color import luminance

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
VIF_SIGMA_NSQ = 2.0
VIF_EPS = 1e-10
METRIC_NAMES = ("mse", "psnr_db", "ssim", "vif")


class MetricShapeError(ValueError):
    pass


class MetricDomainError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise MetricShapeError(f"expected a single image, got batch of {x.shape[0]}")
        x = x[0]
    return x


def _pair(a, b):
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise MetricShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _gray(x: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return x
    if x.ndim == 3 and x.shape[0] == 3:
        return luminance(x)
    if x.ndim == 3 and x.shape[0] == 1:
        return x[0]
    raise MetricShapeError(f"cannot interpret shape {x.shape} as an image")


def gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 2-d correlation with kernel outer(g, g), valid region only."""
    n = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=0) @ g


def mse(a, b) -> float:
    a, b = _pair(a, b)
    d = a - b
    return float(np.mean(d * d))


def psnr(a, b, peak: float = 1.0) -> float:
    m = mse(a, b)
    if m == 0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / m))


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    a, b = _pair(a, b)
    x, y = _gray(a), _gray(b)
    if min(x.shape) < SSIM_WINDOW:
        raise MetricDomainError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_kernel1d(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = filter_valid(x, g), filter_valid(y, g)
    sxx = filter_valid(x * x, g) - mu_x * mu_x
    syy = filter_valid(y * y, g) - mu_y * mu_y
    sxy = filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def ssim(a, b) -> float:
    return float(ssim_map(a, b).mean())


def vif(reference, distorted) -> float:
    """Multi-scale pixel-domain visual information fidelity.

    Four scales with Gaussian windows of size 17, 9, 5, 3 (sigma = size / 5);
    between scales the image is low-passed with the current window and
    subsampled by 2. Images are analysed on the 0-255 scale.
    """
    ref, dist = _pair(reference, distorted)
    ref, dist = _gray(ref) * 255.0, _gray(dist) * 255.0
    num = den = 0.0
    for scale in range(1, 5):
        n = 2 ** (4 - scale + 1) + 1
        g = gaussian_kernel1d(n, n / 5.0)
        if scale > 1:
            if min(ref.shape) < n:
                raise MetricDomainError("image too small for 4-scale VIF")
            ref = filter_valid(ref, g)[::2, ::2]
            dist = filter_valid(dist, g)[::2, ::2]
        if min(ref.shape) < n:
            raise MetricDomainError("image too small for 4-scale VIF")
        mu1, mu2 = filter_valid(ref, g), filter_valid(dist, g)
        s1 = np.maximum(filter_valid(ref * ref, g) - mu1 * mu1, 0.0)
        s2 = np.maximum(filter_valid(dist * dist, g) - mu2 * mu2, 0.0)
        s12 = filter_valid(ref * dist, g) - mu1 * mu2

        gain = s12 / (s1 + VIF_EPS)
        sv = s2 - gain * s12
        flat_ref = s1 < VIF_EPS
        gain[flat_ref] = 0.0
        sv[flat_ref] = s2[flat_ref]
        s1 = np.where(flat_ref, 0.0, s1)
        flat_dist = s2 < VIF_EPS
        gain[flat_dist] = 0.0
        sv[flat_dist] = 0.0
        neg = gain < 0
        sv[neg] = s2[neg]
        gain[neg] = 0.0
        sv = np.maximum(sv, VIF_EPS)

        num += np.sum(np.log2(1.0 + gain * gain * s1 / (sv + VIF_SIGMA_NSQ)))
        den += np.sum(np.log2(1.0 + s1 / VIF_SIGMA_NSQ))
    if den < VIF_EPS:
        return 1.0 if np.array_equal(ref, dist) else float(num / (den + VIF_EPS))
    return float(num / den)


def compute_all(a, b) -> dict:
    """The four metrics for (candidate, reference); VIF uses ``b`` as reference."""
    return {"mse": mse(a, b), "psnr_db": psnr(a, b), "ssim": ssim(a, b), "vif": vif(b, a)}


@dataclass
class MetricsReport:
    records: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"records": [{k: _fmt(v) for k, v in r.items()} for r in self.records],
                "aggregates": {m: {k: _fmt(v) for k, v in agg.items()} for m, agg in self.aggregates.items()}}

    def write(self, out_dir, stem: str = "report") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        lines = ["\t".join(("id",) + METRIC_NAMES)]
        for r in self.records:
            lines.append("\t".join([str(r["id"])] + [_fmt_str(r[m]) for m in METRIC_NAMES]))
        (out_dir / f"{stem}.tsv").write_text("\n".join(lines) + "\n")

    def mean(self, metric: str) -> float:
        return self.aggregates[metric]["mean"]


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return float(f"{v:.6g}")
    return v


def _fmt_str(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) and v > 0 else f"{v:.6g}"
    return str(v)


class EvaluationError(RuntimeError):
    def __init__(self, errors: dict):
        super().__init__("evaluation failed for: " + "; ".join(f"{k}: {v}" for k, v in errors.items()))
        self.errors = errors


def aggregate(records: list) -> dict:
    agg = {}
    for m in METRIC_NAMES:
        vals = np.array([r[m] for r in records], dtype=np.float64)
        if m == "psnr_db":
            finite = vals[np.isfinite(vals)]
            inf_count = int(np.sum(np.isinf(vals)))
            if finite.size:
                agg[m] = {"mean": float(finite.mean()), "std": float(finite.std()), "inf_count": inf_count}
            else:
                agg[m] = {"mean": math.inf, "std": 0.0, "inf_count": inf_count}
        else:
            agg[m] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return agg


def evaluate_set(pairs, ids=None) -> MetricsReport:
    """Per-image metrics for (generated, ground_truth) pairs plus mean/std.

    Infinite PSNR values are left out of the PSNR mean and counted instead.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate_set needs at least one pair")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(pairs))]
    records, errors = [], {}
    for pid, (gen, gt) in zip(ids, pairs):
        try:
            rec = {"id": pid}
            rec.update(compute_all(gen, gt))
            records.append(rec)
        except (MetricShapeError, MetricDomainError) as exc:
            errors[pid] = str(exc)
    if errors:
        raise EvaluationError(errors)
    return MetricsReport(records, aggregate(records))
