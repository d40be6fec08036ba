"""Channel/spatial attention, the two dual-attention blocks, and residual grouping."""

from __future__ import annotations

import enum

import numpy as np

from .core import Conv2d, Module, Tensor, ops
from .core.tensor import DEFAULT_DTYPE
from .errors import ConfigError, ShapeError

SPATIAL_KERNEL = 7


class BlockKind(str, enum.Enum):
    PDAB = "PDAB"  # parallel channel + spatial attention, fused by a 1x1 conv
    SDAB = "SDAB"  # channel attention followed by spatial attention


def _check_channels(x: Tensor, channels: int, who: str) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"{who}: expected (N,{channels},H,W), got {x.shape}")


class ChannelAttention(Module):
    """Gate (N,C,1,1) = sigmoid(mlp(avgpool) + mlp(maxpool)), one shared MLP."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigError(f"channels ({channels}) must be divisible by reduction ({reduction})")
        self.channels = channels
        hidden = channels // reduction
        self.fc1 = self.register("fc1", Conv2d(channels, hidden, 1, rng, dtype))
        self.fc2 = self.register("fc2", Conv2d(hidden, channels, 1, rng, dtype))

    def mlp(self, v: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(v)))

    def __call__(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "channel_attention")
        logits = ops.add(self.mlp(ops.global_avg_pool(x)), self.mlp(ops.global_max_pool(x)))
        return ops.sigmoid(logits)

    @staticmethod
    def count(channels: int, reduction: int) -> int:
        hidden = channels // reduction
        return Conv2d.count(channels, hidden, 1) + Conv2d.count(hidden, channels, 1)


class SpatialAttention(Module):
    """Gate (N,1,H,W) = sigmoid(conv7x7([mean_c(x); max_c(x)]))."""

    def __init__(self, rng: np.random.Generator, dtype=DEFAULT_DTYPE, kernel: int = SPATIAL_KERNEL):
        super().__init__()
        self.conv = self.register("conv", Conv2d(2, 1, kernel, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        stacked = ops.concat_channels([ops.channel_avg_pool(x), ops.channel_max_pool(x)])
        return ops.sigmoid(self.conv(stacked))

    @staticmethod
    def count(kernel: int = SPATIAL_KERNEL) -> int:
        return Conv2d.count(2, 1, kernel)


class _AttentionBlock(Module):
    def __init__(self, channels: int, reduction: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.channels = channels
        self.conv1 = self.register("conv1", Conv2d(channels, channels, 3, rng, dtype))
        self.conv2 = self.register("conv2", Conv2d(channels, channels, 3, rng, dtype))
        self.ca = self.register("ca", ChannelAttention(channels, reduction, rng, dtype))
        self.sa = self.register("sa", SpatialAttention(rng, dtype))

    def body(self, x: Tensor) -> Tensor:
        return self.conv2(ops.relu(self.conv1(x)))


class ParallelDualAttentionBlock(_AttentionBlock):
    """x + fuse1x1([CA(b)*b ; SA(b)*b]) with b = conv-relu-conv(x)."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__(channels, reduction, rng, dtype)
        self.fuse = self.register("fuse", Conv2d(2 * channels, channels, 1, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "PDAB")
        b = self.body(x)
        by_channel = ops.broadcast_mul(b, self.ca(b))
        by_space = ops.broadcast_mul(b, self.sa(b))
        return ops.add(x, self.fuse(ops.concat_channels([by_channel, by_space])))


class SequentialDualAttentionBlock(_AttentionBlock):
    """x + SA(u)*u with u = CA(b)*b and b = conv-relu-conv(x)."""

    def __call__(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "SDAB")
        b = self.body(x)
        u = ops.broadcast_mul(b, self.ca(b))
        return ops.add(x, ops.broadcast_mul(u, self.sa(u)))


BLOCKS = {BlockKind.PDAB: ParallelDualAttentionBlock, BlockKind.SDAB: SequentialDualAttentionBlock}


def block_param_count(kind: BlockKind | str, channels: int, reduction: int) -> int:
    kind = BlockKind(kind)
    n = 2 * Conv2d.count(channels, channels, 3)
    n += ChannelAttention.count(channels, reduction) + SpatialAttention.count()
    if kind is BlockKind.PDAB:
        n += Conv2d.count(2 * channels, channels, 1)
    return n


class ResidualGroup(Module):
    """x + conv3x3(block_B(...block_1(x)))."""

    def __init__(
        self,
        kind: BlockKind | str,
        channels: int,
        n_blocks: int,
        reduction: int,
        rng: np.random.Generator,
        dtype=DEFAULT_DTYPE,
    ):
        super().__init__()
        if n_blocks < 1:
            raise ConfigError("a residual group needs at least one block")
        self.kind = BlockKind(kind)
        self.channels = channels
        block_cls = BLOCKS[self.kind]
        self.blocks = [
            self.register(f"block{i}", block_cls(channels, reduction, rng, dtype)) for i in range(n_blocks)
        ]
        self.conv = self.register("conv", Conv2d(channels, channels, 3, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "residual group")
        h = x
        for blk in self.blocks:
            h = blk(h)
        return ops.add(x, self.conv(h))

    @staticmethod
    def count(kind, channels: int, n_blocks: int, reduction: int) -> int:
        return n_blocks * block_param_count(kind, channels, reduction) + Conv2d.count(channels, channels, 3)


class ResidualInResidualGroup(Module):
    """x + conv3x3(RG_G(...RG_1(x))): the long skip around all groups."""

    def __init__(
        self,
        kind: BlockKind | str,
        channels: int,
        n_groups: int,
        n_blocks: int,
        reduction: int,
        rng: np.random.Generator,
        dtype=DEFAULT_DTYPE,
    ):
        super().__init__()
        if n_groups < 1:
            raise ConfigError("a residual-in-residual group needs at least one group")
        self.channels = channels
        self.groups = [
            self.register(f"rg{i}", ResidualGroup(kind, channels, n_blocks, reduction, rng, dtype))
            for i in range(n_groups)
        ]
        self.conv = self.register("conv", Conv2d(channels, channels, 3, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "RIRG")
        h = x
        for rg in self.groups:
            h = rg(h)
        return ops.add(x, self.conv(h))

    @staticmethod
    def count(kind, channels: int, n_groups: int, n_blocks: int, reduction: int) -> int:
        return n_groups * ResidualGroup.count(kind, channels, n_blocks, reduction) + Conv2d.count(
            channels, channels, 3
        )
