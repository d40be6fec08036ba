"""Coarse super-resolution network, refinement network, and their composition."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .blocks import BlockKind, ResidualGroup, ResidualInResidualGroup
from .core import Conv2d, Module, ParamStore, Tensor, ops
from .core.tensor import DEFAULT_DTYPE
from .errors import ConfigError, ShapeError

SCALES = (2, 3, 4)
COLORS = 3


@dataclass(frozen=True)
class ModelConfig:
    scale: int = 2
    channels: int = 96
    coarse_groups: int = 4
    coarse_blocks: int = 8
    fine_groups: int = 2
    fine_blocks: int = 8
    reduction: int = 8
    refinement_enabled: bool = True
    coarse_block_kind: str = "PDAB"
    fine_block_kind: str = "SDAB"

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}, got {self.scale}")
        for name in ("channels", "coarse_groups", "coarse_blocks", "fine_groups", "fine_blocks", "reduction"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.channels % self.reduction:
            raise ConfigError(f"channels ({self.channels}) must be divisible by reduction ({self.reduction})")
        for name in ("coarse_block_kind", "fine_block_kind"):
            try:
                BlockKind(getattr(self, name))
            except ValueError:
                raise ConfigError(f"{name} must be PDAB or SDAB, got {getattr(self, name)!r}") from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> ModelConfig:
        return dataclasses.replace(self, **kw)


def upsample_stages(scale: int) -> list[int]:
    if scale not in SCALES:
        raise ConfigError(f"unsupported scale {scale}")
    return [2, 2] if scale == 4 else [scale]


class Upsampler(Module):
    """conv3x3(C -> r*r*C) + pixel shuffle(r), chained twice for x4."""

    def __init__(self, channels: int, scale: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.factors = upsample_stages(scale)
        self.convs = [
            self.register(f"conv{i}", Conv2d(channels, r * r * channels, 3, rng, dtype))
            for i, r in enumerate(self.factors)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for conv, r in zip(self.convs, self.factors):
            x = ops.pixel_shuffle(conv(x), r)
        return x

    @staticmethod
    def count(channels: int, scale: int) -> int:
        return sum(Conv2d.count(channels, r * r * channels, 3) for r in upsample_stages(scale))


class CoarseNet(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        c = cfg.channels
        self.scale = cfg.scale
        self.shallow = self.register("shallow", Conv2d(COLORS, c, 3, rng, dtype))
        self.rirg = self.register(
            "rirg",
            ResidualInResidualGroup(cfg.coarse_block_kind, c, cfg.coarse_groups, cfg.coarse_blocks, cfg.reduction, rng, dtype),
        )
        self.upsampler = self.register("upsampler", Upsampler(c, cfg.scale, rng, dtype))
        self.recon = self.register("recon", Conv2d(c, COLORS, 3, rng, dtype))

    def __call__(self, lr: Tensor) -> Tensor:
        if lr.ndim != 4 or lr.shape[1] != COLORS:
            raise ShapeError(f"coarse network expects (N,3,h,w), got {lr.shape}")
        feat = self.rirg(self.shallow(lr))
        return self.recon(self.upsampler(feat))


class RefineNet(Module):
    """Residual refinement: out = x + tail(fineRG_G(...fineRG_1(head(x)))); tail starts at zero."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        c = cfg.channels
        self.head = self.register("head", Conv2d(COLORS, c, 3, rng, dtype))
        self.groups = [
            self.register(f"rg{i}", ResidualGroup(cfg.fine_block_kind, c, cfg.fine_blocks, cfg.reduction, rng, dtype))
            for i in range(cfg.fine_groups)
        ]
        self.tail = self.register("tail", Conv2d(c, COLORS, 3, rng, dtype))
        # zero tail: a fresh refinement net is the identity, so stage 2 starts from the stage-1 output
        self.tail.zero_()

    def residual(self, x: Tensor) -> Tensor:
        h = self.head(x)
        for rg in self.groups:
            h = rg(h)
        return self.tail(h)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != COLORS:
            raise ShapeError(f"refinement network expects (N,3,H,W), got {x.shape}")
        return ops.add(x, self.residual(x))


class CisrModel(Module):
    """Both sub-networks; parameters are named ``coarse.*`` and ``refine.*``."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.config = config
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(self.seed)
        self.coarse = self.register("coarse", CoarseNet(config, rng, dtype))
        self.refine = self.register("refine", RefineNet(config, rng, dtype)) if config.refinement_enabled else None
        self.params: ParamStore = self.param_store()

    @property
    def scale(self) -> int:
        return self.config.scale

    def coarse_params(self) -> ParamStore:
        return self.params.subset("coarse.")

    def refine_params(self) -> ParamStore:
        return self.params.subset("refine.")

    def coarse_forward(self, lr: Tensor) -> Tensor:
        return self.coarse(lr)

    def refine_forward(self, hr_coarse: Tensor) -> Tensor:
        if self.refine is None:
            return hr_coarse
        return self.refine(hr_coarse)

    def __call__(self, lr: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(hr_coarse, hr_fine)``; outputs are not clamped."""
        hr_coarse = self.coarse_forward(lr)
        return hr_coarse, self.refine_forward(hr_coarse)

    full_forward = __call__


def count_params(model: Module) -> int:
    return sum(int(t.data.size) for _, t in model.named_parameters())


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form layer census for a config; matches :func:`count_params`."""
    c = cfg.channels
    coarse = Conv2d.count(COLORS, c, 3)
    coarse += ResidualInResidualGroup.count(cfg.coarse_block_kind, c, cfg.coarse_groups, cfg.coarse_blocks, cfg.reduction)
    coarse += Upsampler.count(c, cfg.scale)
    coarse += Conv2d.count(c, COLORS, 3)
    if not cfg.refinement_enabled:
        return coarse
    refine = Conv2d.count(COLORS, c, 3) + Conv2d.count(c, COLORS, 3)
    refine += cfg.fine_groups * ResidualGroup.count(cfg.fine_block_kind, c, cfg.fine_blocks, cfg.reduction)
    return coarse + refine
