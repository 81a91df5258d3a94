"""Encoder/decoder segmentation networks built on the autodiff engine.

Four encoder kinds (VGG-style, ResNet-style bottleneck, U-Net, residual
U-Net) pair with two decoders: an FCN-8s style weighted sum of upsampled
score maps (``skip_add``) or U-Net style channel concatenation (``concat``).
Layers are plain objects that register named parameters on construction and
read them back from a :class:`Context` at forward time, so several replicas
of one network can run on private parameter tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import (
    BatchNormState,
    BilinearSpec,
    Tensor,
    batch_norm,
    bilinear_kernel,
    concat_channels,
    conv2d,
    crop2d,
    maxpool2d,
    relu,
    scale,
    transposed_conv2d,
)

ENCODER_KINDS = ("vgg_style", "resnet_style", "unet_style", "residual_unet")
DECODER_KINDS = ("skip_add", "concat")

# CLI vocabulary
ARCH_ALIASES = {
    "fcn8s-vgg": ("vgg_style", "skip_add"),
    "fcn8s-resnet": ("resnet_style", "skip_add"),
    "unet": ("unet_style", "concat"),
    "res-unet": ("residual_unet", "concat"),
}


@dataclass
class NetConfig:
    encoder_kind: str = "residual_unet"
    decoder_kind: str = "concat"
    depth: int = 3
    base_width: int = 8
    in_channels: int = 4
    num_classes: int = 5
    input_size: int = 64
    # skip_add branch weights, deepest stage first
    skip_weights: tuple[float, float, float] = (1.0, 2.0, 4.0)
    units_per_stage: int = 1
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.9

    @classmethod
    def from_alias(cls, arch: str, **kw) -> "NetConfig":
        if arch not in ARCH_ALIASES:
            raise ValueError(f"unknown architecture {arch!r}; expected one of {', '.join(ARCH_ALIASES)}")
        enc, dec = ARCH_ALIASES[arch]
        return cls(encoder_kind=enc, decoder_kind=dec, **kw)

    def validate(self) -> None:
        if self.encoder_kind not in ENCODER_KINDS:
            raise ValueError(f"encoder_kind must be one of {ENCODER_KINDS}")
        if self.decoder_kind not in DECODER_KINDS:
            raise ValueError(f"decoder_kind must be one of {DECODER_KINDS}")
        if self.num_classes != 5:
            raise ValueError("num_classes must be 5")
        if self.depth < 1 or self.base_width < 1 or self.in_channels < 1:
            raise ValueError("depth, base_width and in_channels must be positive")
        if self.decoder_kind == "skip_add" and self.depth < 3:
            raise ValueError("skip_add decoder fuses three stages and needs depth >= 3")
        if self.input_size % (2 ** self.depth):
            raise ValueError(f"input_size {self.input_size} not divisible by 2**depth = {2 ** self.depth}")


class Context:
    """Parameter tensors, batch-norm statistics and the train/eval flag for one forward pass."""

    def __init__(self, params: Mapping[str, Tensor], stats: Mapping[str, BatchNormState], train: bool):
        self.params = params
        self.stats = stats
        self.train = train

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


class Registry:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, np.ndarray] = {}
        self.stats: dict[str, BatchNormState] = {}

    def add(self, name: str, value: np.ndarray) -> str:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = value
        return name


def he_normal(rng: np.random.Generator, shape, gain: float = 2.0) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(gain / fan_in), size=shape)


class Conv:
    def __init__(self, reg: Registry, name: str, cin: int, cout: int, k: int, bias: bool = False, gain: float = 2.0):
        # gain 2 suits a following ReLU; linear outputs (projections, heads) use 1
        self.k, self.pad = k, k // 2
        self.weight = reg.add(f"{name}.weight", he_normal(reg.rng, (cout, cin, k, k), gain))
        self.bias = reg.add(f"{name}.bias", np.zeros(cout)) if bias else None
        self.n_convs = 1

    def __call__(self, ctx: Context, x: Tensor) -> Tensor:
        b = ctx[self.bias] if self.bias else None
        return conv2d(x, ctx[self.weight], 1, self.pad, bias=b)


class BatchNorm:
    def __init__(self, reg: Registry, name: str, ch: int, eps: float = 1e-5, momentum: float = 0.9):
        self.gamma = reg.add(f"{name}.gamma", np.ones(ch))
        self.beta = reg.add(f"{name}.beta", np.zeros(ch))
        self.name, self.eps = name, eps
        reg.stats[name] = BatchNormState.fresh(ch, momentum)

    def __call__(self, ctx: Context, x: Tensor) -> Tensor:
        return batch_norm(x, ctx[self.gamma], ctx[self.beta], self.eps, ctx.train, ctx.stats[self.name])


class ConvBN:
    """k x k same-padded convolution followed by batch norm and optionally ReLU."""

    def __init__(self, reg: Registry, name: str, cin: int, cout: int, k: int = 3, act: bool = True, cfg: NetConfig | None = None):
        cfg = cfg or NetConfig()
        self.conv = Conv(reg, f"{name}.conv", cin, cout, k)
        self.bn = BatchNorm(reg, f"{name}.bn", cout, cfg.bn_epsilon, cfg.bn_momentum)
        self.act = act

    def __call__(self, ctx: Context, x: Tensor) -> Tensor:
        y = self.bn(ctx, self.conv(ctx, x))
        return relu(y) if self.act else y


class PlainBlock:
    """Two conv-BN-ReLU layers (VGG and U-Net stages)."""

    def __init__(self, reg: Registry, name: str, cin: int, cout: int, cfg: NetConfig):
        self.layers = [ConvBN(reg, f"{name}.0", cin, cout, cfg=cfg), ConvBN(reg, f"{name}.1", cout, cout, cfg=cfg)]

    def __call__(self, ctx: Context, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(ctx, x)
        return x


class ResidualUnit:
    """output = branch(x) + shortcut(x).

    The bottleneck branch is 1x1 -> 3x3 -> 1x1, the plain branch two 3x3
    convolutions; every conv is followed by batch norm, and all but the last
    by ReLU.  The shortcut is the identity when channel counts agree and a
    learned 1x1 projection otherwise.
    """

    def __init__(self, reg: Registry, name: str, cin: int, cout: int, bottleneck: bool, cfg: NetConfig | None = None):
        cfg = cfg or NetConfig()
        if cin < 1 or cout < 1:
            raise ValueError("channel counts must be positive")
        if bottleneck:
            mid = max(1, cout // 4)
            self.branch = [
                ConvBN(reg, f"{name}.a", cin, mid, k=1, cfg=cfg),
                ConvBN(reg, f"{name}.b", mid, mid, k=3, cfg=cfg),
                ConvBN(reg, f"{name}.c", mid, cout, k=1, act=False, cfg=cfg),
            ]
        else:
            self.branch = [
                ConvBN(reg, f"{name}.a", cin, cout, k=3, cfg=cfg),
                ConvBN(reg, f"{name}.b", cout, cout, k=3, act=False, cfg=cfg),
            ]
        self.project = Conv(reg, f"{name}.proj", cin, cout, 1, gain=1.0) if cin != cout else None

    @property
    def n_convs(self) -> int:
        return len(self.branch)

    def __call__(self, ctx: Context, x: Tensor) -> Tensor:
        y = x
        for layer in self.branch:
            y = layer(ctx, y)
        shortcut = self.project(ctx, x) if self.project else x
        return y + shortcut


def build_residual_unit(in_ch: int, out_ch: int, bottleneck: bool, seed: int = 0, name: str = "unit"):
    """Standalone residual unit with its own parameter registry; returns (unit, registry)."""
    reg = Registry(np.random.default_rng(seed))
    return ResidualUnit(reg, name, in_ch, out_ch, bottleneck), reg


class Upsample:
    """Transposed convolution with a bilinear-initialised kernel, cropped to exactly ``factor`` x the input."""

    def __init__(self, reg: Registry, name: str, cin: int, cout: int, factor: int):
        k = 2 * factor
        plane = bilinear_kernel(BilinearSpec(k, factor), 1)[0, 0]
        kernel = np.zeros((cin, cout, k, k))
        # input channel j feeds output j % cout; folded channels are averaged
        fold = max(1, cin // cout)
        for j in range(cin):
            kernel[j, j % cout] = plane / fold
        self.weight = reg.add(f"{name}.weight", kernel)
        self.factor = factor

    def __call__(self, ctx: Context, x: Tensor) -> Tensor:
        y = transposed_conv2d(x, ctx[self.weight], self.factor)
        f = self.factor
        h, w = x.shape[2] * f, x.shape[3] * f
        return crop2d(y, f // 2, f // 2, h, w)


@dataclass
class NetworkSpec:
    """A compiled network: layer objects plus the master parameter arrays."""

    config: NetConfig
    params: dict[str, np.ndarray]
    stats: dict[str, BatchNormState]
    encoder: list
    decoder: list
    head: list
    skip_stages: tuple[int, ...] = ()

    def tensors(self, requires_grad: bool = True, dtype=np.float32) -> dict[str, Tensor]:
        return {k: Tensor(v.astype(dtype, copy=False), requires_grad=requires_grad) for k, v in self.params.items()}

    def copy_stats(self) -> dict[str, BatchNormState]:
        return {k: s.copy() for k, s in self.stats.items()}

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def _stage_block(reg: Registry, cfg: NetConfig, name: str, cin: int, cout: int):
    kind = cfg.encoder_kind
    if kind in ("vgg_style", "unet_style"):
        return PlainBlock(reg, name, cin, cout, cfg)
    bottleneck = kind == "resnet_style"
    units = [ResidualUnit(reg, f"{name}.u0", cin, cout, bottleneck, cfg)]
    for i in range(1, cfg.units_per_stage):
        units.append(ResidualUnit(reg, f"{name}.u{i}", cout, cout, bottleneck, cfg))
    return _Seq(units)


class _Seq:
    def __init__(self, layers):
        self.layers = layers

    def __call__(self, ctx, x):
        for layer in self.layers:
            x = layer(ctx, x)
        return x


def build_network(cfg: NetConfig, seed: int = 0) -> NetworkSpec:
    cfg.validate()
    reg = Registry(np.random.default_rng(seed))
    widths = [cfg.base_width * 2 ** i for i in range(cfg.depth + 1)]
    encoder = []
    cin = cfg.in_channels
    for i in range(cfg.depth):
        encoder.append(_stage_block(reg, cfg, f"enc{i}", cin, widths[i]))
        cin = widths[i]
    decoder: list = []
    head: list = []
    skip_stages: tuple[int, ...] = ()
    if cfg.decoder_kind == "concat":
        bottom = _stage_block(reg, cfg, "bottom", cin, widths[cfg.depth])
        encoder.append(bottom)
        for i in reversed(range(cfg.depth)):
            up = Upsample(reg, f"dec{i}.up", widths[i + 1], widths[i], 2)
            block = _stage_block(reg, cfg, f"dec{i}.block", 2 * widths[i], widths[i])
            decoder.append((up, block))
        head.append(Conv(reg, "head", widths[0], cfg.num_classes, 1, bias=True, gain=1.0))
    else:
        skip_stages = tuple(range(cfg.depth - 3, cfg.depth))
        for i in skip_stages:
            factor = 2 ** (i + 1)
            score = Conv(reg, f"score{i}", widths[i], cfg.num_classes, 1, bias=True, gain=1.0)
            up = Upsample(reg, f"up{i}", cfg.num_classes, cfg.num_classes, factor)
            decoder.append((i, score, up))
    return NetworkSpec(cfg, reg.params, reg.stats, encoder, decoder, head, skip_stages)


def forward(
    spec: NetworkSpec,
    batch: Tensor,
    params: Mapping[str, Tensor] | None = None,
    stats: Mapping[str, BatchNormState] | None = None,
    train: bool = False,
) -> Tensor:
    """Logits (N, 5, H, W) for an (N, 4, H, W) batch."""
    cfg = spec.config
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    if batch.data.ndim != 4 or batch.shape[1] != cfg.in_channels:
        raise ValueError(f"expected (N, {cfg.in_channels}, H, W) input, got {batch.shape}")
    if batch.shape[2] % 2 ** cfg.depth or batch.shape[3] % 2 ** cfg.depth:
        raise ValueError(f"spatial extent {batch.shape[2:]} not divisible by {2 ** cfg.depth}")
    if params is None:
        params = spec.tensors(requires_grad=False, dtype=batch.dtype)
    ctx = Context(params, spec.stats if stats is None else stats, train)
    x = batch
    if cfg.decoder_kind == "concat":
        skips = []
        for block in spec.encoder[:-1]:
            x = block(ctx, x)
            skips.append(x)
            x = maxpool2d(x, 2, 2)
        x = spec.encoder[-1](ctx, x)
        for (up, block), skip in zip(spec.decoder, reversed(skips)):
            x = block(ctx, concat_channels(skip, up(ctx, x)))
        return spec.head[0](ctx, x)

    pooled = []
    for block in spec.encoder:
        x = maxpool2d(block(ctx, x), 2, 2)
        pooled.append(x)
    # branch weights listed deepest stage first
    weights = dict(zip(reversed(spec.skip_stages), cfg.skip_weights))
    out = None
    for i, score, up in spec.decoder:
        branch = scale(up(ctx, score(ctx, pooled[i])), weights[i])
        out = branch if out is None else out + branch
    return out
