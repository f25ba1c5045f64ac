"""Four-block convolutional feature extractor and FPN projection.

Each block is ``conv(k, stride 1) -> ReLU -> conv(k, stride s)``, with
"same" padding ``k // 2`` on both convolutions. The FPN projects every block
to ``fpn_size`` channels with a 1x1 map and then runs the usual top-down
pass: the coarser projected map is nearest-upsampled and added to the finer
one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .rng import stream
from .tensor import Tensor

NUM_BLOCKS = 4


@dataclass(frozen=True)
class BackboneConfig:
    input_resolution: int = 64
    block_channels: tuple[int, ...] = (16, 32, 64, 128)
    block_strides: tuple[int, ...] = (2, 2, 2, 2)
    conv_kernel: int = 3
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        object.__setattr__(self, "block_strides", tuple(int(s) for s in self.block_strides))
        self.validate()

    def validate(self) -> None:
        if len(self.block_channels) != NUM_BLOCKS or len(self.block_strides) != NUM_BLOCKS:
            raise ConfigError("backbone needs exactly 4 blocks of channels and strides")
        if any(c <= 0 for c in self.block_channels) or any(s <= 0 for s in self.block_strides):
            raise ConfigError("block channels and strides must be positive")
        if self.conv_kernel <= 0 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be a positive odd int, got {self.conv_kernel}")
        if self.input_resolution <= 0:
            raise ConfigError("input_resolution must be positive")
        total = int(np.prod(self.block_strides))
        if self.input_resolution % total:
            raise ConfigError(
                f"input_resolution {self.input_resolution} not divisible by stride product {total}")

    def output_shapes(self) -> list[tuple[int, int, int]]:
        """(C, H, W) per block from the stride/padding arithmetic."""
        k, p = self.conv_kernel, self.conv_kernel // 2
        h = self.input_resolution
        shapes = []
        for c, s in zip(self.block_channels, self.block_strides):
            h = (h + 2 * p - k) // 1 + 1
            h = (h + 2 * p - k) // s + 1
            shapes.append((c, h, h))
        return shapes


@dataclass(frozen=True)
class FpnConfig:
    fpn_size: int = 1536

    def __post_init__(self):
        if int(self.fpn_size) <= 0:
            raise ConfigError("fpn_size must be positive")


@dataclass
class FeatureMapSet:
    """Per-block maps, each ``N x C_b x H_b x W_b``, finest first."""

    maps: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if len(self.maps) != NUM_BLOCKS:
            raise ValueError(f"expected {NUM_BLOCKS} feature maps, got {len(self.maps)}")
        sizes = [m.shape[-2:] for m in self.maps]
        for (h0, w0), (h1, w1) in zip(sizes, sizes[1:]):
            if h1 > h0 or w1 > w0:
                raise ValueError(f"spatial sizes must not increase across blocks: {sizes}")

    def __iter__(self):
        return iter(self.maps)

    def __getitem__(self, b: int) -> Tensor:
        return self.maps[b]

    def __len__(self) -> int:
        return len(self.maps)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [m.shape for m in self.maps]


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_backbone(config: BackboneConfig, seed: int) -> dict[str, Tensor]:
    rng = stream(seed, "init/backbone")
    k = config.conv_kernel
    params: dict[str, Tensor] = {}
    c_in = config.in_channels
    for b, c in enumerate(config.block_channels):
        params[f"backbone.{b}.conv1.weight"] = Tensor(_he(rng, (c, c_in, k, k), c_in * k * k), True)
        params[f"backbone.{b}.conv1.bias"] = Tensor(np.zeros(c), True)
        params[f"backbone.{b}.conv2.weight"] = Tensor(_he(rng, (c, c, k, k), c * k * k), True)
        params[f"backbone.{b}.conv2.bias"] = Tensor(np.zeros(c), True)
        c_in = c
    return params


def init_fpn(backbone: BackboneConfig, config: FpnConfig, seed: int) -> dict[str, Tensor]:
    rng = stream(seed, "init/fpn")
    params = {}
    for b, c in enumerate(backbone.block_channels):
        params[f"fpn.{b}.weight"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / c), size=(config.fpn_size, c)), True)
        params[f"fpn.{b}.bias"] = Tensor(np.zeros(config.fpn_size), True)
    return params


def channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias to an ``N x C x H x W`` tensor."""
    b = T.reshape(bias, (1, bias.shape[0], 1, 1))
    return T.add(x, T.broadcast_to(b, x.shape))


def pointwise(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 linear map over channels: ``out[:, o] = sum_c weight[o, c] * x[:, c] + bias[o]``."""
    if weight.shape[1] != x.shape[1]:
        raise ValueError(f"pointwise: weight expects {weight.shape[1]} channels, input has {x.shape[1]}")
    out = T.conv2d(x, T.reshape(weight, (weight.shape[0], weight.shape[1], 1, 1)))
    return channel_bias(out, bias) if bias is not None else out


def backbone_forward(batch: Tensor, params: dict[str, Tensor], config: BackboneConfig) -> FeatureMapSet:
    if batch.ndim != 4 or batch.shape[1] != config.in_channels:
        raise ValueError(f"expected N x {config.in_channels} x R x R input, got {batch.shape}")
    r = config.input_resolution
    if batch.shape[2:] != (r, r):
        raise ValueError(f"expected spatial size {r}x{r}, got {batch.shape[2]}x{batch.shape[3]}")
    pad = config.conv_kernel // 2
    x = batch
    maps = []
    for b, s in enumerate(config.block_strides):
        x = T.conv2d(x, params[f"backbone.{b}.conv1.weight"], 1, pad)
        x = T.relu(channel_bias(x, params[f"backbone.{b}.conv1.bias"]))
        x = T.conv2d(x, params[f"backbone.{b}.conv2.weight"], s, pad)
        x = channel_bias(x, params[f"backbone.{b}.conv2.bias"])
        maps.append(x)
    return FeatureMapSet(maps)


def fpn_project(fmaps: FeatureMapSet, params: dict[str, Tensor]) -> FeatureMapSet:
    lateral = [pointwise(m, params[f"fpn.{b}.weight"], params[f"fpn.{b}.bias"])
               for b, m in enumerate(fmaps)]
    out = [None] * len(lateral)
    out[-1] = lateral[-1]
    for b in range(len(lateral) - 2, -1, -1):
        coarse = out[b + 1]
        fh, ch = lateral[b].shape[-2], coarse.shape[-2]
        if fh % ch or lateral[b].shape[-1] % coarse.shape[-1]:
            raise ValueError(f"block {b}: {fh} is not an integer multiple of {ch}")
        out[b] = T.add(lateral[b], T.upsample_nearest(coarse, fh // ch))
    return FeatureMapSet(out)
