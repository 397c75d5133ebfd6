"""VGG-like and ResNet-like 1-D encoder stacks (four stages each).

Every stage is described by a :class:`BlockSpec`; the defaults hold the
per-stage (kernel size, filter count, stride) layout of both encoders.
Stage input channel counts are supplied by the caller because AttX
concatenation upstream changes them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError
from .numerics import RunningStats, Tensor

VGG = "vgg"
RESNET = "resnet"
KINDS = (VGG, RESNET)
N_STAGES = 4

# stage -> ((kernel, filters, stride), (kernel, filters, stride))
VGG_TABLE = {
    1: ((64, 32, 1), (64, 32, 3)),
    2: ((32, 64, 1), (32, 64, 3)),
    3: ((17, 128, 1), (17, 128, 3)),
    4: ((7, 256, 1), (7, 256, 3)),
}
# stage -> (((kernel, filters) x 3 per residual unit), per-unit strides)
RESNET_TABLE = {
    1: (((1, 32), (64, 32), (1, 64)), (7, 1)),
    2: (((1, 64), (32, 64), (1, 128)), (3, 1)),
    3: (((1, 128), (17, 128), (1, 256)), (3, 1)),
    4: (((1, 256), (7, 256), (1, 512)), (3, 1)),
}
VGG_POOL = (2, 2)


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    filters: int
    stride: int = 1


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    stage: int
    convs: tuple[ConvSpec, ...]
    repeat: int = 1
    unit_strides: tuple[int, ...] = ()
    pool: tuple[int, int] | None = None
    padding: str = "same"

    @property
    def out_channels(self) -> int:
        return self.convs[-1].filters

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "stage": self.stage,
            "convs": [[c.kernel, c.filters, c.stride] for c in self.convs],
            "repeat": self.repeat,
            "unit_strides": list(self.unit_strides),
            "pool": list(self.pool) if self.pool else None,
            "padding": self.padding,
        }


def _scale(filters: int, width: float) -> int:
    return max(1, int(round(filters * width)))


def block_specs(kind: str, width: float = 1.0, padding: str | None = None) -> list[BlockSpec]:
    """The four stage specs for ``kind``; ``width`` scales every filter count."""
    if kind == VGG:
        pad = padding or "same"
        return [
            BlockSpec(
                VGG,
                stage,
                tuple(ConvSpec(k, _scale(f, width), s) for k, f, s in VGG_TABLE[stage]),
                pool=VGG_POOL,
                padding=pad,
            )
            for stage in range(1, N_STAGES + 1)
        ]
    if kind == RESNET:
        if padding not in (None, "same"):
            raise ConfigurationError("ResNet blocks always use length-preserving padding")
        specs = []
        for stage in range(1, N_STAGES + 1):
            convs, strides = RESNET_TABLE[stage]
            specs.append(
                BlockSpec(
                    RESNET,
                    stage,
                    tuple(ConvSpec(k, _scale(f, width)) for k, f in convs),
                    repeat=2,
                    unit_strides=strides,
                    padding="same",
                )
            )
        return specs
    raise ConfigurationError(f"unknown encoder kind {kind!r}; expected one of {KINDS}")


def _padding(kernel: int, mode: str) -> tuple[int, int]:
    if mode == "valid":
        return (0, 0)
    if mode == "same":
        total = kernel - 1
        return (total // 2, total - total // 2)
    raise ConfigurationError(f"unknown padding mode {mode!r}")


# --------------------------------------------------------------------------
# symbolic length propagation


def block_output_length(spec: BlockSpec, length: int) -> int:
    """Output length of one block, or 0 when any layer underflows."""
    L = length
    if spec.kind == VGG:
        for c in spec.convs:
            L = nx.conv_output_length(L, c.kernel, c.stride, _padding(c.kernel, spec.padding))
            if L < 1:
                return 0
        return nx.pool_output_length(L, *spec.pool)
    for stride in spec.unit_strides:
        for j, c in enumerate(spec.convs):
            L = nx.conv_output_length(L, c.kernel, stride if j == 0 else 1, _padding(c.kernel, "same"))
            if L < 1:
                return 0
    return L


def stage_lengths(specs: Sequence[BlockSpec], length: int) -> list[int]:
    """Per-stage output lengths; 0 marks the first underflowing stage."""
    out = []
    L = length
    for spec in specs:
        L = block_output_length(spec, L) if L >= 1 else 0
        out.append(L)
    return out


def min_input_length(kind: str | Sequence[BlockSpec], width: float = 1.0, padding: str | None = None) -> int:
    """Smallest input length for which all four stages produce output (binary search)."""
    specs = block_specs(kind, width, padding) if isinstance(kind, str) else list(kind)

    def ok(L):
        return stage_lengths(specs, L)[-1] >= 1

    hi = 1
    while not ok(hi):
        hi *= 2
        if hi > 1 << 30:
            raise ConfigurationError("no input length satisfies these block specs")
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


# --------------------------------------------------------------------------
# parameterized blocks


class Conv:
    def __init__(self, in_ch: int, spec: ConvSpec, rng, name: str, stride: int | None = None, padding="same"):
        self.spec = spec
        self.stride = spec.stride if stride is None else stride
        self.pad = _padding(spec.kernel, padding)
        fan_in, fan_out = in_ch * spec.kernel, spec.filters * spec.kernel
        self.kernel = nx.glorot_uniform(rng, (spec.filters, in_ch, spec.kernel), fan_in, fan_out, name=f"{name}.kernel")
        self.bias = nx.zeros(spec.filters, requires_grad=True, name=f"{name}.bias")

    def parameters(self):
        return [self.kernel, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return nx.conv1d(x, self.kernel, self.bias, self.stride, self.pad)


class BatchNorm:
    def __init__(self, channels: int, name: str, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = nx.ones(channels, requires_grad=True, name=f"{name}.gamma")
        self.beta = nx.zeros(channels, requires_grad=True, name=f"{name}.beta")
        self.stats = RunningStats()
        self.name = name
        self.momentum, self.eps = momentum, eps

    def parameters(self):
        return [self.gamma, self.beta]

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return nx.batchnorm1d(x, self.gamma, self.beta, self.stats, mode, self.momentum, self.eps)


class VGGBlock:
    """conv+ReLU, conv+ReLU, max-pool."""

    def __init__(self, spec: BlockSpec, in_channels: int, rng, name: str):
        self.spec = spec
        self.convs = []
        ch = in_channels
        for j, c in enumerate(spec.convs):
            self.convs.append(Conv(ch, c, rng, f"{name}.conv{j + 1}", padding=spec.padding))
            ch = c.filters

    def parameters(self):
        return [p for c in self.convs for p in c.parameters()]

    def batchnorms(self):
        return []

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        for conv in self.convs:
            x = nx.relu(conv(x))
        return nx.maxpool1d(x, *self.spec.pool)


class ResidualUnit:
    """Three conv+BN+ReLU layers plus a skip path; output ``relu(main + skip)``."""

    def __init__(self, convs: Sequence[ConvSpec], in_channels: int, stride: int, rng, name: str):
        self.layers = []
        ch = in_channels
        for j, c in enumerate(convs):
            conv = Conv(ch, c, rng, f"{name}.conv{j + 1}", stride=stride if j == 0 else 1)
            self.layers.append((conv, BatchNorm(c.filters, f"{name}.bn{j + 1}")))
            ch = c.filters
        self.projection = None
        if in_channels != ch or stride != 1:
            self.projection = Conv(in_channels, ConvSpec(1, ch), rng, f"{name}.skip", stride=stride)

    def parameters(self):
        ps = [p for conv, bn in self.layers for p in conv.parameters() + bn.parameters()]
        if self.projection is not None:
            ps += self.projection.parameters()
        return ps

    def batchnorms(self):
        return [bn for _, bn in self.layers]

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        h = x
        for conv, bn in self.layers:
            h = nx.relu(bn(conv(h), mode))
        skip = x if self.projection is None else self.projection(x)
        return nx.relu(nx.add(h, skip))


class ResNetBlock:
    def __init__(self, spec: BlockSpec, in_channels: int, rng, name: str):
        self.spec = spec
        self.units = []
        ch = in_channels
        for u, stride in enumerate(spec.unit_strides):
            self.units.append(ResidualUnit(spec.convs, ch, stride, rng, f"{name}.unit{u + 1}"))
            ch = spec.out_channels

    def parameters(self):
        return [p for u in self.units for p in u.parameters()]

    def batchnorms(self):
        return [bn for u in self.units for bn in u.batchnorms()]

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        for unit in self.units:
            x = unit(x, mode)
        return x


def build_block(spec: BlockSpec, in_channels: int, rng: np.random.Generator, name: str = "block"):
    if in_channels < 1:
        raise ConfigurationError(f"in_channels must be >= 1, got {in_channels}")
    if spec.kind == VGG:
        return VGGBlock(spec, in_channels, rng, name)
    if spec.kind == RESNET:
        return ResNetBlock(spec, in_channels, rng, name)
    raise ConfigurationError(f"unknown block kind {spec.kind!r}")


class EncoderStack:
    """Four blocks for one modality branch.

    ``in_channels[j]`` is the input channel count of stage ``j + 1``.
    """

    def __init__(
        self,
        specs: Sequence[BlockSpec],
        in_channels: Sequence[int],
        rng: np.random.Generator,
        name: str = "enc",
    ):
        if len(specs) != N_STAGES or len(in_channels) != N_STAGES:
            raise ConfigurationError(f"an encoder stack has exactly {N_STAGES} stages")
        self.specs = list(specs)
        self.in_channels = list(in_channels)
        self.name = name
        self.blocks = [
            build_block(spec, ch, rng, f"{name}.stage{spec.stage}") for spec, ch in zip(self.specs, self.in_channels)
        ]

    def out_channels(self, stage: int) -> int:
        return self.specs[stage - 1].out_channels

    def parameters(self) -> list[Tensor]:
        return [p for b in self.blocks for p in b.parameters()]

    def batchnorms(self) -> list[BatchNorm]:
        return [bn for b in self.blocks for bn in b.batchnorms()]

    def min_input_length(self) -> int:
        return min_input_length(self.specs)

    def forward_stage(self, stage: int, x: Tensor, mode: str = "train") -> Tensor:
        if not 1 <= stage <= N_STAGES:
            raise ConfigurationError(f"stage must be in 1..{N_STAGES}, got {stage}")
        expected = self.in_channels[stage - 1]
        if x.shape[-2] != expected:
            raise ConfigurationError(f"stage {stage} expects {expected} input channels, got {x.shape[-2]}")
        spec = self.specs[stage - 1]
        if block_output_length(spec, x.shape[-1]) < 1:
            raise ConfigurationError(
                f"input length {x.shape[-1]} too short for stage {stage}; "
                f"minimum input length for this encoder is {self.min_input_length()}"
            )
        return self.blocks[stage - 1](x, mode)
