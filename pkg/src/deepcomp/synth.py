"""Composite/ground-truth pair synthesis by stylize, cut and paste.

A real image is restyled with a parametric colour filter, the foreground is
cut out of the restyled copy with the segmentation mask and pasted back onto
the untouched original. The original is the ground truth; the paste is the
network input.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .color import hsv_to_rgb_array, rgb_to_hsv_array

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
FILTER_KINDS = ("hue_shift", "sat_scale", "val_scale", "contrast", "color_transfer", "compose")
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class FilterConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


@dataclass
class StyleFilter:
    kind: str
    params: dict = field(default_factory=dict)
    children: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        p = self.params
        if self.kind not in FILTER_KINDS:
            raise FilterConfigError(f"unknown filter kind {self.kind!r}")
        if self.kind == "hue_shift":
            if not 0.0 <= p.get("delta", -1) < 1.0:
                raise FilterConfigError(f"hue_shift delta must be in [0, 1), got {p.get('delta')}")
        elif self.kind in ("sat_scale", "val_scale", "contrast"):
            if not p.get("factor", 0) > 0:
                raise FilterConfigError(f"{self.kind} factor must be > 0, got {p.get('factor')}")
        elif self.kind == "color_transfer":
            mean, std = p.get("mean"), p.get("std")
            if mean is None or std is None or len(mean) != 3 or len(std) != 3:
                raise FilterConfigError("color_transfer needs 3-element 'mean' and 'std'")
            if min(std) < 0:
                raise FilterConfigError("color_transfer std must be >= 0")
        elif self.kind == "compose":
            if not self.children:
                raise FilterConfigError("compose filter needs at least one child")

    def describe(self) -> str:
        if self.kind == "compose":
            return "compose(" + ",".join(c.describe() for c in self.children) + ")"
        args = ",".join(f"{k}={_short(v)}" for k, v in sorted(self.params.items()))
        return f"{self.kind}({args})"

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "params": self.params}
        if self.children:
            d["children"] = [c.to_dict() for c in self.children]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StyleFilter":
        return cls(d["kind"], dict(d.get("params", {})), [cls.from_dict(c) for c in d.get("children", [])])


def _short(v):
    if isinstance(v, (list, tuple)):
        return "[" + ",".join(f"{x:.4g}" for x in v) + "]"
    return f"{v:.4g}" if isinstance(v, float) else str(v)


def apply_style_filter(img: np.ndarray, f: StyleFilter) -> np.ndarray:
    """Apply ``f`` to an (N, 3, H, W) or (3, H, W) image in [0, 1]."""
    single = img.ndim == 3
    x = img[None] if single else img
    out = _apply(np.asarray(x, dtype=np.float64), f).astype(img.dtype)
    return out[0] if single else out


def _apply(x: np.ndarray, f: StyleFilter) -> np.ndarray:
    p = f.params
    if f.kind == "compose":
        for child in f.children:
            x = _apply(x, child)
        return x
    if f.kind == "contrast":
        return np.clip(0.5 + p["factor"] * (x - 0.5), 0.0, 1.0)
    if f.kind == "color_transfer":
        mu = x.mean(axis=(2, 3), keepdims=True)
        sd = x.std(axis=(2, 3), keepdims=True)
        ref_mu = np.asarray(p["mean"], dtype=np.float64)[None, :, None, None]
        ref_sd = np.asarray(p["std"], dtype=np.float64)[None, :, None, None]
        scale = np.where(sd > 1e-12, ref_sd / np.where(sd > 1e-12, sd, 1.0), 1.0)
        return np.clip((x - mu) * scale + ref_mu, 0.0, 1.0)
    hsv = rgb_to_hsv_array(x)
    if f.kind == "hue_shift":
        hsv[:, 0] = np.mod(hsv[:, 0] + p["delta"], 1.0)
    elif f.kind == "sat_scale":
        hsv[:, 1] = np.clip(hsv[:, 1] * p["factor"], 0.0, 1.0)
    elif f.kind == "val_scale":
        hsv[:, 2] = np.clip(hsv[:, 2] * p["factor"], 0.0, 1.0)
    return np.clip(hsv_to_rgb_array(hsv), 0.0, 1.0)


def composite(fg_styled: np.ndarray, bg: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Hard paste: fg where mask == 1, bg elsewhere (bit-exact selection)."""
    if fg_styled.shape != bg.shape:
        raise ValueError(f"foreground {fg_styled.shape} and background {bg.shape} differ")
    m = np.asarray(mask)
    if m.ndim == bg.ndim and m.shape[-3] == 1:
        m = np.broadcast_to(m, bg.shape)
    elif m.ndim == bg.ndim - 1:
        m = np.broadcast_to(np.expand_dims(m, -3), bg.shape)
    if m.shape != bg.shape:
        raise ValueError(f"mask {np.shape(mask)} does not match image {bg.shape}")
    return np.where(m > 0.5, fg_styled, bg)


# ------------------------------------------------------------------ filter pools

def random_filter(rng: np.random.Generator, kinds: Sequence[str] = ("hue_shift", "sat_scale"),
                  reference_stats: Sequence[tuple] = ()) -> StyleFilter:
    """One filter with a strong enough effect to make the pair non-trivial."""
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind == "hue_shift":
        return StyleFilter("hue_shift", {"delta": float(rng.uniform(0.1, 0.9))})
    if kind == "sat_scale":
        factor = rng.uniform(0.1, 0.5) if rng.random() < 0.5 else rng.uniform(2.0, 3.5)
        return StyleFilter("sat_scale", {"factor": float(factor)})
    if kind == "val_scale":
        factor = rng.uniform(0.4, 0.7) if rng.random() < 0.5 else rng.uniform(1.4, 1.8)
        return StyleFilter("val_scale", {"factor": float(factor)})
    if kind == "contrast":
        factor = rng.uniform(0.3, 0.6) if rng.random() < 0.5 else rng.uniform(1.5, 2.2)
        return StyleFilter("contrast", {"factor": float(factor)})
    if kind == "color_transfer":
        if reference_stats:
            mean, std = reference_stats[int(rng.integers(len(reference_stats)))]
        else:
            mean, std = rng.uniform(0.2, 0.8, 3), rng.uniform(0.05, 0.25, 3)
        return StyleFilter("color_transfer", {"mean": [float(v) for v in mean], "std": [float(v) for v in std]})
    if kind == "compose":
        simple = [k for k in kinds if k != "compose"] or ["hue_shift", "sat_scale"]
        return StyleFilter("compose", children=[random_filter(rng, simple), random_filter(rng, simple)])
    raise FilterConfigError(f"unknown filter kind {kind!r}")


def filter_pool(size: int, seed: int, kinds: Sequence[str] = ("hue_shift", "sat_scale")) -> list:
    rng = np.random.default_rng(seed)
    return [random_filter(rng, kinds) for _ in range(size)]


# ------------------------------------------------------------------ image I/O

def _center_square(im: Image.Image) -> Image.Image:
    w, h = im.size
    s = min(w, h)
    left, top = (w - s) // 2, (h - s) // 2
    return im.crop((left, top, left + s, top + s))


def load_image_u8(path, size: int | None = None) -> np.ndarray:
    """(3, H, W) uint8. With ``size`` the image is center-cropped square and resized."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None:
            im = _center_square(im).resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).transpose(2, 0, 1).copy()


def load_mask_u8(path, size: int | None = None) -> np.ndarray:
    """(1, H, W) uint8 in {0, 1}, thresholded at half intensity."""
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None:
            im = _center_square(im).resize((size, size), Image.NEAREST)
        return (np.asarray(im, dtype=np.uint8) >= 128).astype(np.uint8)[None]


def load_image(path, size: int | None = None) -> np.ndarray:
    return load_image_u8(path, size).astype(np.float32) / 255.0


def to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    """Write a (3, H, W) image (float in [0, 1] or uint8) as 8-bit PNG.

    A (1, H, W) array is treated as a binary mask and written as 0/255.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if img.shape[0] == 1:
        Image.fromarray(np.where(np.asarray(img)[0] > 0, 255, 0).astype(np.uint8), mode="L").save(path)
    else:
        arr = img if img.dtype == np.uint8 else to_u8(img)
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


# ------------------------------------------------------------------ dataset

@dataclass
class SamplePair:
    composite: np.ndarray
    ground_truth: np.ndarray
    mask: np.ndarray
    filter_desc: str
    source_id: str
    sample_id: str = ""


@dataclass
class DatasetManifest:
    split: str
    seed: int
    entries: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    size: int = 64
    version: int = MANIFEST_VERSION

    def to_dict(self) -> dict:
        return {"version": self.version, "split": self.split, "seed": self.seed, "size": self.size,
                "entries": self.entries, "errors": self.errors}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from None
        if d.get("version") != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {d.get('version')}")
        return cls(d["split"], d["seed"], d["entries"], d.get("errors", []), d.get("size", 64), d["version"])


def discover_corpus(corpus_dir) -> list:
    """(image, mask) path pairs from ``corpus_dir/images`` and ``corpus_dir/masks`` matched by stem."""
    root = Path(corpus_dir)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"corpus {root} must contain images/ and masks/ directories")
    masks = {p.stem: p for p in mask_dir.iterdir() if p.suffix.lower() in IMAGE_EXTS}
    pairs = []
    for p in sorted(img_dir.iterdir()):
        if p.suffix.lower() in IMAGE_EXTS and p.stem in masks:
            pairs.append((p, masks[p.stem]))
    if not pairs:
        raise DataError(f"no image/mask pairs found in {root}")
    return pairs


def _split_sources(n: int, train_count: int, test_count: int, rng) -> tuple:
    if n < 2:
        raise DataError("need at least two corpus images so train and test sources can be disjoint")
    order = rng.permutation(n)
    n_test = int(round(n * test_count / (train_count + test_count)))
    n_test = min(max(n_test, 1), n - 1)
    return sorted(order[n_test:].tolist()), sorted(order[:n_test].tolist())


def make_pair(gt_u8: np.ndarray, mask_u8: np.ndarray, f: StyleFilter) -> np.ndarray:
    """Composite uint8 image for one source; exact outside and inside the mask."""
    styled = to_u8(apply_style_filter(gt_u8.astype(np.float64) / 255.0, f))
    return composite(styled, gt_u8, mask_u8)


def build_dataset(corpus: Sequence[tuple], filters: Sequence[StyleFilter], train_count: int, test_count: int,
                  out_dir, seed: int, size: int = 64) -> dict:
    """Write train/ and test/ splits of synthesized pairs and return their manifests.

    Sources are partitioned so no source image contributes to both splits;
    within a split, each sample draws a source and a filter from the seeded
    generator, so sources are reused with different filters when the corpus
    is smaller than the requested counts.
    """
    if not corpus:
        raise DataError("empty corpus")
    if train_count < 1 or test_count < 1:
        raise DataError("train and test counts must be >= 1")
    if not filters:
        raise DataError("empty filter pool")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)

    loaded, errors = [], []
    for img_path, mask_path in corpus:
        try:
            img = load_image_u8(img_path, size)
            mask = load_mask_u8(mask_path, size)
        except (OSError, ValueError) as exc:
            errors.append({"source": str(img_path), "error": str(exc)})
            logger.warning("skipping %s: %s", img_path, exc)
            continue
        loaded.append((Path(img_path).stem, img, mask))

    train_idx, test_idx = _split_sources(len(loaded), train_count, test_count, rng)
    manifests = {}
    for split, idx, count in (("train", train_idx, train_count), ("test", test_idx, test_count)):
        man = DatasetManifest(split, seed, size=size, errors=list(errors))
        split_dir = out_dir / split
        for k in range(count):
            src_id, gt, mask = loaded[idx[int(rng.integers(len(idx)))]]
            f = filters[int(rng.integers(len(filters)))]
            comp = make_pair(gt, mask, f)
            sid = f"{k:05d}"
            rel = {kind: f"{split}/{kind}/{sid}.png" for kind in ("composite", "real", "mask")}
            save_png(comp, out_dir / rel["composite"])
            save_png(gt, out_dir / rel["real"])
            save_png(mask, out_dir / rel["mask"])
            man.entries.append({"id": sid, "source_id": src_id, "composite": rel["composite"],
                                "ground_truth": rel["real"], "mask": rel["mask"], "filter_desc": f.describe()})
        split_dir.mkdir(parents=True, exist_ok=True)
        man.write(split_dir / "manifest.json")
        manifests[split] = man
    return manifests


def load_split(split_dir, limit: int | None = None) -> list:
    """SamplePairs of a written split, in manifest order."""
    split_dir = Path(split_dir)
    man = DatasetManifest.read(split_dir / "manifest.json")
    root = split_dir.parent
    pairs = []
    for e in man.entries[:limit]:
        try:
            comp = load_image(root / e["composite"])
            gt = load_image(root / e["ground_truth"])
            mask = load_mask_u8(root / e["mask"]).astype(np.float32)
        except OSError as exc:
            raise DataError(f"sample {e['id']}: {exc}") from None
        pairs.append(SamplePair(comp, gt, mask, e["filter_desc"], e["source_id"], e["id"]))
    return pairs


# ------------------------------------------------------------------ procedural corpus

def _smooth_field(rng, size: int, alpha: float) -> np.ndarray:
    """Random field with a 1/f^alpha amplitude spectrum, scaled to [0, 1]."""
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    f = np.sqrt(fx * fx + fy * fy)
    f[0, 0] = 1.0
    spectrum = (rng.normal(size=f.shape) + 1j * rng.normal(size=f.shape)) / f ** alpha
    spectrum[0, 0] = 0.0
    field_ = np.fft.irfft2(spectrum, s=(size, size))
    field_ -= field_.min()
    return field_ / max(field_.max(), 1e-12)


def natural_image(rng, size: int = 64, alpha: float = 1.0) -> np.ndarray:
    """(3, H, W) colour image with natural-image-like 1/f spectrum."""
    hue = np.mod(rng.uniform() + 0.15 * (_smooth_field(rng, size, 2.0) - 0.5), 1.0)
    sat = 0.2 + 0.6 * _smooth_field(rng, size, 1.5)
    val = 0.1 + 0.85 * _smooth_field(rng, size, alpha)
    return hsv_to_rgb_array(np.stack([hue, sat, val])[None])[0]


def scene(rng, size: int = 64, hue_band: tuple = (0.0, 1.0)) -> tuple:
    """A background and one blob-shaped foreground object under a shared illuminant.

    Returns (image (3, H, W) float in [0, 1], mask (1, H, W) uint8). The
    foreground hue stays within a few hundredths of the scene hue, as in real
    photographs where one light source tints every surface.
    """
    scene_hue = rng.uniform(*hue_band)
    yy, xx = np.mgrid[0:size, 0:size] / size
    cy, cx = rng.uniform(0.3, 0.7, 2)
    ry, rx = rng.uniform(0.15, 0.3, 2)
    wobble = 0.25 * (_smooth_field(rng, size, 2.5) - 0.5)
    blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 + wobble
    mask = (blob < 1.0).astype(np.uint8)

    bg_h = scene_hue + 0.04 * (_smooth_field(rng, size, 2.0) - 0.5)
    bg_s = 0.25 + 0.3 * _smooth_field(rng, size, 2.0)
    bg_v = 0.35 + 0.5 * _smooth_field(rng, size, 1.8)
    fg_hue = scene_hue + rng.uniform(-0.03, 0.03)
    fg_h = fg_hue + 0.02 * (_smooth_field(rng, size, 2.0) - 0.5)
    fg_s = rng.uniform(0.5, 0.8) + 0.15 * (_smooth_field(rng, size, 2.0) - 0.5)
    fg_v = rng.uniform(0.5, 0.9) + 0.2 * (_smooth_field(rng, size, 1.8) - 0.5)

    m = mask.astype(bool)
    hsv = np.stack([np.where(m, fg_h, bg_h), np.where(m, fg_s, bg_s), np.where(m, fg_v, bg_v)])
    hsv[0] = np.mod(hsv[0], 1.0)
    hsv[1:] = np.clip(hsv[1:], 0.0, 1.0)
    return hsv_to_rgb_array(hsv[None])[0], mask[None]


def synthetic_corpus(out_dir, count: int, size: int = 64, seed: int = 0, hue_band: tuple = (0.0, 1.0)) -> list:
    """Write ``count`` procedural scenes as out_dir/images + out_dir/masks PNGs."""
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    pairs = []
    for i in range(count):
        img, mask = scene(rng, size, hue_band)
        ip, mp = out_dir / "images" / f"scene_{i:05d}.png", out_dir / "masks" / f"scene_{i:05d}.png"
        save_png(img, ip)
        save_png(mask, mp)
        pairs.append((ip, mp))
    return pairs
