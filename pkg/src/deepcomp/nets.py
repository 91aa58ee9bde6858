"""Skip-link autoencoder generator and the two discriminator variants.

Networks are plain parameter dictionaries plus pure forward functions; there
is no module object hierarchy. Parameter names are dot-separated paths such
as ``enc.0.conv.weight``. Batch-norm running statistics live in
``NetworkParams.buffers`` as bare arrays since they never receive gradients.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class ParamMismatchError(KeyError):
    def __init__(self, missing, unexpected=(), wrong_shape=()):
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        self.wrong_shape = sorted(wrong_shape)
        parts = []
        if self.missing:
            parts.append("missing: " + ", ".join(self.missing))
        if self.unexpected:
            parts.append("unexpected: " + ", ".join(self.unexpected))
        if self.wrong_shape:
            parts.append("wrong shape: " + ", ".join(self.wrong_shape))
        super().__init__("parameter mismatch; " + "; ".join(parts))


@dataclass
class GeneratorConfig:
    num_blocks: int = 4
    base_channels: int = 64
    kernel_size: int = 3
    negative_slope: float = 0.2
    skip_links: bool = True

    def validate(self) -> None:
        if self.num_blocks < 1 or self.base_channels < 1 or self.kernel_size < 1:
            raise ConfigError(f"invalid generator config {self}")
        if not 0 < self.negative_slope < 1:
            raise ConfigError("negative_slope must be in (0, 1)")


@dataclass
class DiscriminatorConfig:
    kind: Literal["patch", "resnet"] = "patch"
    base_channels: int = 64
    num_layers: int = 4
    num_res_blocks: int = 2
    conditional: bool = True
    negative_slope: float = 0.2

    def validate(self) -> None:
        if self.kind not in ("patch", "resnet"):
            raise ConfigError(f"unknown discriminator kind {self.kind!r}")
        if self.base_channels < 1 or self.num_layers < 1 or self.num_res_blocks < 1:
            raise ConfigError(f"invalid discriminator config {self}")

    @property
    def in_channels(self) -> int:
        return 6 if self.conditional else 3


@dataclass
class NetworkParams:
    config: GeneratorConfig | DiscriminatorConfig
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def trainable(self) -> list:
        return list(self.params.values())

    def zero_grad(self) -> None:
        T.zero_grads(self.params.values())

    def config_dict(self) -> dict:
        d = asdict(self.config)
        d["type"] = "generator" if isinstance(self.config, GeneratorConfig) else "discriminator"
        return d


class _Builder:
    """Seeded parameter factory; records shapes in creation order."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.net_params: dict = {}
        self.buffers: dict = {}

    def _t(self, data) -> Tensor:
        return Tensor(data, requires_grad=True, dtype=T.default_dtype())

    def conv(self, name: str, shape: tuple) -> None:
        self.net_params[f"{name}.weight"] = self._t(self.rng.normal(0.0, 0.02, size=shape))
        out_ch = shape[1] if name.endswith("deconv") else shape[0]
        self.net_params[f"{name}.bias"] = self._t(np.zeros(out_ch))

    def linear(self, name: str, n_in: int, n_out: int) -> None:
        self.net_params[f"{name}.weight"] = self._t(self.rng.normal(0.0, 0.02, size=(n_in, n_out)))
        self.net_params[f"{name}.bias"] = self._t(np.zeros(n_out))

    def bn(self, name: str, c: int) -> None:
        self.net_params[f"{name}.weight"] = self._t(np.ones(c))
        self.net_params[f"{name}.bias"] = self._t(np.zeros(c))
        self.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=np.float32)
        self.buffers[f"{name}.running_var"] = np.ones(c, dtype=np.float32)


def _encoder_channels(cfg: GeneratorConfig) -> list:
    return [cfg.base_channels * 2 ** i for i in range(cfg.num_blocks)]


def decoder_channels(cfg: GeneratorConfig) -> list:
    """(in, out) channel pairs of each decoder block, deepest first."""
    enc = _encoder_channels(cfg)
    n = cfg.num_blocks
    pairs = []
    for j in range(n):
        level = n - 1 - j
        c_out = enc[level - 1] if level > 0 else 3
        if j == 0:
            c_in = enc[n - 1]
        else:
            c_in = enc[level] * (2 if cfg.skip_links else 1)
        pairs.append((c_in, c_out))
    return pairs


def build_generator(cfg: GeneratorConfig | None = None, seed: int = 0) -> NetworkParams:
    cfg = cfg or GeneratorConfig()
    cfg.validate()
    b = _Builder(seed)
    k = cfg.kernel_size
    c_prev = 3
    for i, c in enumerate(_encoder_channels(cfg)):
        b.conv(f"enc.{i}.conv", (c, c_prev, k, k))
        b.bn(f"enc.{i}.bn", c)
        c_prev = c
    for j, (c_in, c_out) in enumerate(decoder_channels(cfg)):
        b.conv(f"dec.{j}.deconv", (c_in, c_out, 4, 4))
        if j < cfg.num_blocks - 1:
            b.bn(f"dec.{j}.bn", c_out)
    return NetworkParams(cfg, b.net_params, b.buffers)


def _bn(net: NetworkParams, name: str, x: Tensor, training: bool) -> Tensor:
    p, buf = net.params, net.buffers
    return T.batch_norm(x, p[f"{name}.weight"], p[f"{name}.bias"],
                        buf[f"{name}.running_mean"], buf[f"{name}.running_var"],
                        training=training)


def generator_forward(net: NetworkParams, x: Tensor, training: bool = True) -> Tensor:
    """Composite RGB image in, harmonized RGB image out (same size, values in (0, 1)).

    The input must have exactly three channels; there is no way to feed a
    foreground mask to the generator.
    """
    cfg: GeneratorConfig = net.config
    if x.ndim != 4 or x.shape[1] != 3:
        raise T.ShapeError(f"generator input must be (N, 3, H, W) RGB, got {x.shape}")
    factor = 2 ** cfg.num_blocks
    if x.shape[2] % factor or x.shape[3] % factor:
        raise ConfigError(f"input size {x.shape[2]}x{x.shape[3]} not divisible by {factor}")
    p = net.params
    slope = cfg.negative_slope
    pad = cfg.kernel_size // 2
    skips = []
    h = x
    for i in range(cfg.num_blocks):
        h = T.conv2d(h, p[f"enc.{i}.conv.weight"], p[f"enc.{i}.conv.bias"], stride=2, padding=pad)
        h = T.leaky_relu(h, slope)
        h = _bn(net, f"enc.{i}.bn", h, training)
        skips.append(h)
    # no bottleneck: the deepest encoder output feeds the first decoder directly
    for j in range(cfg.num_blocks):
        level = cfg.num_blocks - 1 - j
        if j > 0 and cfg.skip_links:
            h = T.concat_channels(h, skips[level])
        h = T.conv_transpose2d(h, p[f"dec.{j}.deconv.weight"], p[f"dec.{j}.deconv.bias"], stride=2, padding=1)
        if j < cfg.num_blocks - 1:
            h = T.leaky_relu(h, slope)
            h = _bn(net, f"dec.{j}.bn", h, training)
    return T.sigmoid(h)


def patch_output_size(size: int, num_layers: int = 4) -> int:
    for i in range(num_layers):
        size = T.conv_output_size(size, 4, 2 if i < num_layers - 1 else 1, 1)
    return T.conv_output_size(size, 4, 1, 1)


def build_discriminator(cfg: DiscriminatorConfig | None = None, seed: int = 0) -> NetworkParams:
    cfg = cfg or DiscriminatorConfig()
    cfg.validate()
    b = _Builder(seed)
    base = cfg.base_channels
    if cfg.kind == "patch":
        c_prev = cfg.in_channels
        for i in range(cfg.num_layers):
            c = base * 2 ** min(i, 3)
            b.conv(f"layers.{i}.conv", (c, c_prev, 4, 4))
            if i > 0:
                b.bn(f"layers.{i}.bn", c)
            c_prev = c
        b.conv("head.conv", (1, c_prev, 4, 4))
    else:
        b.conv("stem.0.conv", (base, cfg.in_channels, 4, 4))
        b.conv("stem.1.conv", (2 * base, base, 4, 4))
        b.bn("stem.1.bn", 2 * base)
        c = 2 * base
        for r in range(cfg.num_res_blocks):
            for k in (0, 1):
                b.conv(f"res.{r}.conv{k}", (c, c, 3, 3))
                b.bn(f"res.{r}.bn{k}", c)
        b.linear("head.linear", c, 1)
    return NetworkParams(cfg, b.net_params, b.buffers)


def discriminator_forward(net: NetworkParams, candidate: Tensor, condition: Tensor | None = None,
                          training: bool = True) -> Tensor:
    """Raw real/fake logits: (N, 1, h, w) for the patch kind, (N, 1) for resnet."""
    cfg: DiscriminatorConfig = net.config
    if cfg.conditional:
        if condition is None:
            raise T.ShapeError("conditional discriminator needs a condition image")
        if candidate.shape != condition.shape:
            raise T.ShapeError(f"candidate {candidate.shape} and condition {condition.shape} differ")
        x = T.concat_channels(candidate, condition)
    else:
        x = candidate
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise T.ShapeError(f"discriminator expects {cfg.in_channels} input channels, got {x.shape}")
    p = net.params
    slope = cfg.negative_slope
    if cfg.kind == "patch":
        h = x
        for i in range(cfg.num_layers):
            stride = 2 if i < cfg.num_layers - 1 else 1
            h = T.conv2d(h, p[f"layers.{i}.conv.weight"], p[f"layers.{i}.conv.bias"], stride=stride, padding=1)
            if i > 0:
                h = _bn(net, f"layers.{i}.bn", h, training)
            h = T.leaky_relu(h, slope)
        return T.conv2d(h, p["head.conv.weight"], p["head.conv.bias"], stride=1, padding=1)

    h = T.leaky_relu(T.conv2d(x, p["stem.0.conv.weight"], p["stem.0.conv.bias"], stride=2, padding=1), slope)
    h = T.conv2d(h, p["stem.1.conv.weight"], p["stem.1.conv.bias"], stride=2, padding=1)
    h = T.leaky_relu(_bn(net, "stem.1.bn", h, training), slope)
    for r in range(cfg.num_res_blocks):
        y = T.conv2d(h, p[f"res.{r}.conv0.weight"], p[f"res.{r}.conv0.bias"], stride=1, padding=1)
        y = T.leaky_relu(_bn(net, f"res.{r}.bn0", y, training), slope)
        y = T.conv2d(y, p[f"res.{r}.conv1.weight"], p[f"res.{r}.conv1.bias"], stride=1, padding=1)
        y = _bn(net, f"res.{r}.bn1", y, training)
        h = T.leaky_relu(h + y, slope)
    pooled = T.mean_axes(h, (2, 3))
    return T.add(T.matmul(pooled, p["head.linear.weight"]), p["head.linear.bias"])


def load_state(net: NetworkParams, params: dict, buffers: dict) -> None:
    """Copy named arrays into ``net``; names and shapes must match exactly."""
    missing = (set(net.params) - set(params)) | (set(net.buffers) - set(buffers))
    unexpected = (set(params) - set(net.params)) | (set(buffers) - set(net.buffers))
    wrong = [n for n in set(net.params) & set(params) if net.params[n].shape != tuple(params[n].shape)]
    wrong += [n for n in set(net.buffers) & set(buffers) if net.buffers[n].shape != tuple(buffers[n].shape)]
    if missing or unexpected or wrong:
        raise ParamMismatchError(missing, unexpected, wrong)
    for n, arr in params.items():
        net.params[n].data = np.array(arr, dtype=net.params[n].dtype)
    for n, arr in buffers.items():
        net.buffers[n] = np.array(arr, dtype=np.float32)


def config_from_dict(d: dict) -> GeneratorConfig | DiscriminatorConfig:
    d = dict(d)
    kind = d.pop("type")
    return GeneratorConfig(**d) if kind == "generator" else DiscriminatorConfig(**d)
