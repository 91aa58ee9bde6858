"""Training, evaluation and single-image harmonization."""
from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .losses import (FeatureExtractor, LossWeights, TrainingDivergence, adversarial_d_loss, adversarial_g_loss,
                     generator_total_loss, hsv_loss, perceptual_loss, recon_loss)
from .metrics import MetricsReport, evaluate_set
from .nets import (ConfigError, DiscriminatorConfig, GeneratorConfig, NetworkParams, build_discriminator,
                   build_generator, discriminator_forward, generator_forward)
from .synth import DataError, DatasetManifest, load_split, save_png, to_u8

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "adv", "recon", "perceptual", "hsv", "total", "d_loss")


@dataclass
class TrainConfig:
    data_dir: str = "data"
    out_dir: str = "runs/default"
    image_size: int = 64
    batch_size: int = 8
    epochs: int = 1
    seed: int = 0
    lambda_recon: float = 100.0
    lambda_perceptual: float = 1.0
    lambda_hsv: float = 10.0
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    disc_kind: str = "patch"
    hue_circular: bool = False
    checkpoint_interval: int = 0      # in steps; 0 writes only the final checkpoint
    max_steps: int | None = None      # stop early after this many optimizer steps
    train_limit: int | None = None    # use only the first N training pairs
    eval_slice: int = 4               # held-out pairs scored after each epoch (0 disables)
    eval_interval: int = 1            # epochs between held-out evaluations
    gen_base_channels: int = 64
    gen_blocks: int = 4
    disc_base_channels: int = 64
    perceptual_seed: int = 1234

    def validate(self) -> None:
        if self.image_size % (2 ** self.gen_blocks):
            raise ConfigError(f"image_size {self.image_size} must be divisible by {2 ** self.gen_blocks}")
        for name in ("image_size", "batch_size", "epochs", "gen_base_channels", "gen_blocks",
                     "disc_base_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("lr_g", "lr_d"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in (0, 1)")
        if self.disc_kind not in ("patch", "resnet"):
            raise ConfigError(f"disc_kind must be 'patch' or 'resnet', got {self.disc_kind!r}")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")
        try:
            self.weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_recon, self.lambda_perceptual, self.lambda_hsv)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg = cls(**d)
        try:
            cfg.validate()
        except TypeError as exc:
            raise ConfigError(f"bad config value type: {exc}") from None
        return cfg

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(d)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def last(self, key: str) -> float:
        return self.steps[-1][key]


def _batches(n: int, batch_size: int, rng) -> list:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _generator_config(cfg: TrainConfig) -> GeneratorConfig:
    return GeneratorConfig(num_blocks=cfg.gen_blocks, base_channels=cfg.gen_base_channels)


def _stack(pairs) -> tuple:
    comp = np.stack([p.composite for p in pairs]).astype(np.float32)
    gt = np.stack([p.ground_truth for p in pairs]).astype(np.float32)
    return comp, gt


def harmonize_array(gen: NetworkParams, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Run the generator in inference mode over an (N, 3, H, W) array."""
    outs = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(generator_forward(gen, T.Tensor(x[i:i + batch_size]), training=False).data)
    return np.concatenate(outs)


def hsv_distance(images: np.ndarray, ground_truth: np.ndarray, circular: bool = False) -> np.ndarray:
    """Per-image hsv_loss value of each image against its ground truth."""
    out = []
    with T.no_grad():
        for a, b in zip(images, ground_truth):
            out.append(hsv_loss(T.Tensor(a[None], dtype=np.float64), T.Tensor(b[None], dtype=np.float64),
                                circular=circular).item())
    return np.array(out)


def _held_out_summary(gen, comp, gt) -> dict:
    pred = to_u8(harmonize_array(gen, comp)).astype(np.float32) / 255.0
    report = evaluate_set(list(zip(pred, gt)))
    return {m: report.mean(m) for m in ("mse", "ssim", "vif")}


def train(cfg: TrainConfig) -> tuple[Checkpoint, TrainLog]:
    """Alternating one-discriminator, one-generator update per batch.

    Writes ``train_log.tsv`` (one line per step), ``epochs.jsonl`` and
    checkpoints under ``cfg.out_dir``. The same config, seed and dataset
    bytes always produce byte-identical checkpoints.
    """
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_dir = Path(cfg.data_dir)
    pairs = load_split(data_dir / "train", cfg.train_limit)
    if not pairs:
        raise DataError(f"no training pairs in {data_dir / 'train'}")
    comp_all, gt_all = _stack(pairs)
    if comp_all.shape[2:] != (cfg.image_size, cfg.image_size):
        raise DataError(f"dataset images are {comp_all.shape[2:]}, config expects {cfg.image_size}")
    held = None
    if cfg.eval_slice > 0 and (data_dir / "test" / "manifest.json").exists():
        held = _stack(load_split(data_dir / "test", cfg.eval_slice))

    rng = np.random.default_rng(cfg.seed)
    gen = build_generator(_generator_config(cfg), seed=cfg.seed)
    disc = build_discriminator(DiscriminatorConfig(kind=cfg.disc_kind, base_channels=cfg.disc_base_channels),
                               seed=cfg.seed + 1)
    fx = FeatureExtractor(seed=cfg.perceptual_seed)
    # where the run is written is not part of its provenance; keeping it out
    # lets two runs in different directories produce identical bytes
    snapshot = {k: v for k, v in cfg.to_dict().items() if k != "out_dir"}
    ckpt = Checkpoint(gen, disc, T.OptimizerState(lr=cfg.lr_g), T.OptimizerState(lr=cfg.lr_d),
                      config=snapshot)
    weights = cfg.weights()
    log = TrainLog()
    step = 0
    last_good = None

    tsv = open(out_dir / "train_log.tsv", "w")
    tsv.write("\t".join(LOG_COLUMNS) + "\n")
    epochs_fh = open(out_dir / "epochs.jsonl", "w")
    try:
        for epoch in range(cfg.epochs):
            t0 = time.time()
            for idx in _batches(len(pairs), cfg.batch_size, rng):
                comp = T.Tensor(comp_all[idx])
                gt = T.Tensor(gt_all[idx])
                fake = generator_forward(gen, comp, training=True)

                disc.zero_grad()
                d_loss = adversarial_d_loss(discriminator_forward(disc, gt, comp),
                                            discriminator_forward(disc, fake.detach(), comp))
                if not math.isfinite(d_loss.item()):
                    raise TrainingDivergence("discriminator", d_loss.item())
                T.backward(d_loss)
                T.adam_step(disc.params, ckpt.opt_d)

                gen.zero_grad()
                adv = adversarial_g_loss(discriminator_forward(disc, fake, comp))
                total, parts = generator_total_loss(
                    adv, recon_loss(fake, gt), perceptual_loss(fake, gt, fx),
                    hsv_loss(fake, gt, circular=cfg.hue_circular), weights)
                T.backward(total)
                T.adam_step(gen.params, ckpt.opt_g)
                step += 1

                rec = {"step": step, "adv": parts.adversarial, "recon": parts.recon,
                       "perceptual": parts.perceptual, "hsv": parts.hsv, "total": parts.total,
                       "d_loss": d_loss.item()}
                log.steps.append(rec)
                tsv.write("\t".join(str(step) if k == "step" else f"{rec[k]:.9g}" for k in LOG_COLUMNS) + "\n")

                if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                    ckpt.step = step
                    ckpt.rng_state = rng.bit_generator.state
                    last_good = out_dir / "last.dicc"
                    save_checkpoint(ckpt, last_good)
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
            summary = {"epoch": epoch, "step": step, "seconds": round(time.time() - t0, 3),
                       "timestamp": time.time()}
            if held is not None and (epoch + 1) % cfg.eval_interval == 0:
                summary["held_out"] = _held_out_summary(gen, *held)
            log.epochs.append(summary)
            epochs_fh.write(json.dumps(summary, sort_keys=True) + "\n")
            epochs_fh.flush()
            logger.info("epoch %d step %d total %.4f d %.4f", epoch, step, log.last("total"), log.last("d_loss"))
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    except TrainingDivergence:
        logger.error("training diverged at step %d; last good checkpoint: %s", step + 1, last_good)
        raise
    finally:
        tsv.close()
        epochs_fh.close()

    ckpt.step = step
    ckpt.rng_state = rng.bit_generator.state
    save_checkpoint(ckpt, out_dir / "final.dicc")
    return ckpt, log


def evaluate(ckpt_path, split_dir, out_dir=None) -> tuple[MetricsReport, MetricsReport]:
    """Score the generator and the raw composites against ground truth.

    Returns (model report, composite baseline report). With ``out_dir`` the
    harmonized images and both reports are written there.
    """
    ckpt = load_checkpoint(ckpt_path)
    pairs = load_split(split_dir)
    if not pairs:
        raise DataError(f"empty split {split_dir}")
    comp, gt = _stack(pairs)
    pred = to_u8(harmonize_array(ckpt.generator, comp))
    ids = [p.sample_id for p in pairs]
    model = evaluate_set(list(zip(pred.astype(np.float64) / 255.0, gt)), ids)
    baseline = evaluate_set(list(zip(comp, gt)), ids)
    if out_dir is not None:
        out_dir = Path(out_dir)
        for sid, img in zip(ids, pred):
            save_png(img, out_dir / "harmonized" / f"{sid}.png")
        model.write(out_dir, "report")
        baseline.write(out_dir, "baseline")
    return model, baseline


def harmonize(ckpt_path, in_path, out_path, multiple: int | None = None) -> np.ndarray:
    """Harmonize one image file. Sizes not divisible by the generator stride are resized and restored."""
    ckpt = load_checkpoint(ckpt_path)
    multiple = multiple or 2 ** ckpt.generator.config.num_blocks
    try:
        with Image.open(in_path) as im:
            im = im.convert("RGB")
            w, h = im.size
            if w % multiple or h % multiple:
                nw = max(multiple, int(round(w / multiple)) * multiple)
                nh = max(multiple, int(round(h / multiple)) * multiple)
                logger.warning("resizing %dx%d to %dx%d for the generator", w, h, nw, nh)
                work = im.resize((nw, nh), Image.BILINEAR)
            else:
                work = im
            x = np.asarray(work, dtype=np.float32).transpose(2, 0, 1)[None] / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode {in_path}: {exc}") from None
    out = to_u8(harmonize_array(ckpt.generator, x)[0])
    if out.shape[1:] != (h, w):
        out = np.asarray(Image.fromarray(out.transpose(1, 2, 0)).resize((w, h), Image.BILINEAR)).transpose(2, 0, 1)
    save_png(out, out_path)
    return out


def compare_discriminators(cfg: TrainConfig, out_dir) -> dict:
    """Train once per discriminator kind with everything else identical; report both side by side."""
    out_dir = Path(out_dir)
    rows = {}
    for kind in ("patch", "resnet"):
        run_cfg = dataclasses.replace(cfg, disc_kind=kind, out_dir=str(out_dir / kind))
        train(run_cfg)
        model, baseline = evaluate(Path(run_cfg.out_dir) / "final.dicc", Path(cfg.data_dir) / "test",
                                   Path(run_cfg.out_dir) / "eval")
        rows[kind] = model.to_dict()["aggregates"]
        rows["composite_baseline"] = baseline.to_dict()["aggregates"]
    _write_comparison(rows, out_dir)
    return rows


def _write_comparison(rows: dict, out_dir: Path) -> None:
    (out_dir / "comparison.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    metrics = ("mse", "psnr_db", "ssim", "vif")
    lines = ["variant\t" + "\t".join(metrics)]
    for name in ("patch", "resnet", "composite_baseline"):
        lines.append(name + "\t" + "\t".join(str(rows[name][m]["mean"]) for m in metrics))
    (out_dir / "comparison.tsv").write_text("\n".join(lines) + "\n")


GRID_KEYS = ("lambda_recon", "lambda_perceptual", "lambda_hsv", "lr_g", "lr_d")


def gridsearch(data_dir, out_dir, grid: dict) -> list:
    """Factorial search over loss weights and learning rates, ranked by held-out SSIM.

    ``grid`` maps any of ``GRID_KEYS`` to a list of values; an optional
    ``base`` entry holds the remaining TrainConfig fields.
    """
    out_dir = Path(out_dir)
    base = dict(grid.get("base", {}))
    unknown = set(grid) - set(GRID_KEYS) - {"base"}
    if unknown:
        raise ConfigError(f"unknown grid keys: {', '.join(sorted(unknown))}")
    axes = [(k, list(grid[k])) for k in GRID_KEYS if k in grid]
    results = []
    for i, combo in enumerate(itertools.product(*[v for _, v in axes])):
        overrides = dict(zip([k for k, _ in axes], combo))
        run_dir = out_dir / f"run_{i:03d}"
        cfg = TrainConfig.from_dict({**base, **overrides, "data_dir": str(data_dir), "out_dir": str(run_dir)})
        train(cfg)
        model, _ = evaluate(run_dir / "final.dicc", Path(data_dir) / "test", run_dir / "eval")
        results.append({"run": run_dir.name, **overrides,
                        **{m: model.mean(m) for m in ("mse", "psnr_db", "ssim", "vif")}})
    results.sort(key=lambda r: (-r["ssim"], r["run"]))
    cols = ["rank", "run"] + [k for k, _ in axes] + ["ssim", "psnr_db", "mse", "vif"]
    lines = ["\t".join(cols)]
    for rank, r in enumerate(results, 1):
        lines.append("\t".join([str(rank)] + [f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c])
                                              for c in cols[1:]]))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ranking.tsv").write_text("\n".join(lines) + "\n")
    return results


def read_manifest(split_dir) -> DatasetManifest:
    return DatasetManifest.read(Path(split_dir) / "manifest.json")
