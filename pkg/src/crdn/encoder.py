"""U-Net-like backbone and per-stage squeeze convolutions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import ops
from .errors import ShapeError
from .ops import BatchNormState
from .tensor import Tensor

STAGE_CHANNELS = (16, 32, 64, 128, 256)
SQUEEZE_KERNEL = 5


def _uniform_kernel(rng: np.random.Generator, shape: tuple, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class ConvBlock:
    """3x3 conv (padding 1) -> batch norm -> ReLU."""

    weight: Tensor
    bias: Tensor
    gamma: Tensor
    beta: Tensor
    bn: BatchNormState

    @classmethod
    def create(cls, in_ch: int, out_ch: int, rng: np.random.Generator, prefix: str, dtype=np.float32) -> "ConvBlock":
        return cls(
            Tensor(_uniform_kernel(rng, (out_ch, in_ch, 3, 3), dtype), True, name=f"{prefix}.weight"),
            Tensor(np.zeros(out_ch, dtype=dtype), True, name=f"{prefix}.bias"),
            Tensor(np.ones(out_ch, dtype=dtype), True, name=f"{prefix}.gamma"),
            Tensor(np.zeros(out_ch, dtype=dtype), True, name=f"{prefix}.beta"),
            BatchNormState.create(out_ch, dtype),
        )

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = ops.conv2d(x, self.weight, self.bias, stride=1, padding=1)
        return ops.relu(ops.batchnorm2d(y, self.gamma, self.beta, self.bn, training))

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias, self.gamma, self.beta]


@dataclass
class EncoderParams:
    """Backbone stages (shallow to deep) and squeeze kernels (deepest first).

    ``squeeze_weights[i]`` maps ``F_{i+1}`` to ``X_{i+1}``, so index 0 is the
    lowest-resolution map, matching the decoding order.
    """

    stages: list = field(default_factory=list)  # list[list[ConvBlock]]
    squeeze_weights: list = field(default_factory=list)
    squeeze_biases: list = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.stages)

    def named_backbone(self) -> Iterator[tuple[str, Tensor]]:
        for block_list in self.stages:
            for block in block_list:
                for p in block.parameters():
                    yield p.name, p

    def named_squeeze(self) -> Iterator[tuple[str, Tensor]]:
        for w, b in zip(self.squeeze_weights, self.squeeze_biases):
            yield w.name, w
            yield b.name, b

    def batchnorm_states(self) -> Iterator[tuple[str, BatchNormState]]:
        for si, block_list in enumerate(self.stages):
            for bi, block in enumerate(block_list):
                yield f"encoder.stage{si + 1}.block{bi + 1}.bn", block.bn


def init_encoder(
    modalities: int,
    classes: int,
    rng: np.random.Generator,
    depth: int = 5,
    channels: tuple = STAGE_CHANNELS,
    dtype=np.float32,
) -> EncoderParams:
    if not 2 <= depth <= len(channels):
        raise ValueError(f"encoder depth must be in [2, {len(channels)}], got {depth}")
    params = EncoderParams()
    in_ch = modalities
    for s in range(depth):
        out_ch = channels[s]
        prefix = f"encoder.stage{s + 1}"
        params.stages.append([
            ConvBlock.create(in_ch, out_ch, rng, f"{prefix}.block1", dtype),
            ConvBlock.create(out_ch, out_ch, rng, f"{prefix}.block2", dtype),
        ])
        in_ch = out_ch
    for i, ch in enumerate(reversed(channels[:depth])):
        shape = (classes, ch, SQUEEZE_KERNEL, SQUEEZE_KERNEL)
        params.squeeze_weights.append(Tensor(_uniform_kernel(rng, shape, dtype), True, name=f"squeeze{i + 1}.weight"))
        params.squeeze_biases.append(Tensor(np.zeros(classes, dtype=dtype), True, name=f"squeeze{i + 1}.bias"))
    return params


def encode(image: Tensor, params: EncoderParams, training: bool = False) -> list[Tensor]:
    """Feature pyramid ``[F_1, ..., F_L]`` with ``F_1`` at the lowest resolution."""
    if image.ndim != 4:
        raise ShapeError(f"image must be [n, modalities, h, w], got {image.shape}")
    expected_in = params.stages[0][0].weight.shape[1]
    if image.shape[1] != expected_in:
        raise ShapeError(f"encoder expects {expected_in} modalities, image has {image.shape[1]}")
    factor = 2 ** (params.depth - 1)
    h, w = image.shape[2:]
    if h % factor or w % factor:
        ph, pw = -h % factor, -w % factor
        raise ShapeError(
            f"spatial dims {h}x{w} must be divisible by {factor}; pad by {ph} rows and {pw} columns"
        )
    feats = []
    x = image
    for s, block_list in enumerate(params.stages):
        if s > 0:
            x = ops.maxpool2d(x)
        for block in block_list:
            x = block(x, training)
        feats.append(x)
    return feats[::-1]


def squeeze(feature: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``X = ReLU(F (x) psi)`` with a 5x5 kernel and padding 2."""
    if weight.shape[1] != feature.shape[1]:
        raise ShapeError(f"squeeze kernel expects {weight.shape[1]} channels, feature map has {feature.shape[1]}")
    return ops.relu(ops.conv2d(feature, weight, bias, stride=1, padding=SQUEEZE_KERNEL // 2))
