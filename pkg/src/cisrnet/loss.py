"""Pixel (L1), perceptual and content losses, and the frozen feature extractor."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .core import Tensor, kaiming_uniform, ops
from .core.tensor import DEFAULT_DTYPE
from .errors import ConfigError, DataError, ShapeError

# VGG19 convolution widths up to conv5_4; "M" is a 2x2 max pool.
VGG19_LAYOUT = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512)
ARCHIVE_ARCH = "vgg19-conv5_4"
ARCHIVE_META_KEY = "__meta__"


@dataclass(frozen=True)
class LossWeights:
    stage1_weight: float = 0.1
    lambda_l1: float = 1.0
    lambda_p: float = 0.05

    def __post_init__(self):
        for k in ("stage1_weight", "lambda_l1", "lambda_p"):
            if getattr(self, k) < 0:
                raise ConfigError(f"loss weight {k} must be nonnegative")


def _same_shape(pred: Tensor, gt: Tensor, who: str) -> None:
    if pred.shape != gt.shape:
        raise ShapeError(f"{who}: prediction {pred.shape} and target {gt.shape} differ")


def l1_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute error per image, averaged over the batch."""
    _same_shape(pred, gt, "l1_loss")
    return ops.mean_all(ops.abs_(ops.sub(pred, gt)))


def vgg19_layer_names() -> list[str]:
    names, block, idx = [], 1, 1
    for item in VGG19_LAYOUT:
        if item == "M":
            block, idx = block + 1, 1
        else:
            names.append(f"conv{block}_{idx}")
            idx += 1
    return names


def _widths(width: float) -> list[int]:
    return [max(1, int(round(c * width))) for c in VGG19_LAYOUT if c != "M"]


class FeatureExtractor:
    """VGG19 convolution stack up to the ReLU after conv5_4, with frozen weights.

    The default build draws the weights from a fixed seed; ``width`` scales
    every layer's channel count (1.0 is the real VGG19 layout).
    Use :meth:`from_archive` to load pretrained weights instead.
    """

    def __init__(
        self,
        seed: int | None = 1234,
        width: float = 1.0,
        dtype=DEFAULT_DTYPE,
        weights: dict[str, np.ndarray] | None = None,
        mean: tuple[float, float, float] | None = None,
        std: tuple[float, float, float] | None = None,
    ):
        if width <= 0:
            raise ConfigError("extractor width must be positive")
        self.seed, self.width = seed, width
        self.names = vgg19_layer_names()
        rng = np.random.default_rng(seed) if weights is None else None
        self.layers: list[tuple[str, Tensor, Tensor]] = []
        cin = 3
        for name, cout in zip(self.names, _widths(width)):
            wshape = (cout, cin, 3, 3)
            if weights is None:
                w = kaiming_uniform(rng, wshape, cin * 9, dtype, a=0.0)
                b = np.zeros(cout, dtype=dtype)
            else:
                w = np.asarray(weights[f"{name}.weight"], dtype=dtype)
                b = np.asarray(weights[f"{name}.bias"], dtype=dtype)
            self.layers.append((name, Tensor(w), Tensor(b)))
            cin = cout
        self.out_channels = cin
        self._norm = None
        if mean is not None or std is not None:
            m = np.asarray(mean if mean is not None else (0.0, 0.0, 0.0), dtype=dtype).reshape(1, 3, 1, 1)
            s = np.asarray(std if std is not None else (1.0, 1.0, 1.0), dtype=dtype).reshape(1, 3, 1, 1)
            self._norm = (Tensor(m), Tensor(1.0 / s))

    def parameters(self) -> list[Tensor]:
        return [t for _, w, b in self.layers for t in (w, b)]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"feature extractor expects (N,3,H,W), got {x.shape}")
        if self._norm is not None:
            x = ops.mul(ops.sub(x, self._norm[0]), self._norm[1])
        h = x
        li = 0
        for item in VGG19_LAYOUT:
            if item == "M":
                h = ops.max_pool2d(h, 2)
                continue
            _, w, b = self.layers[li]
            h = ops.relu(ops.conv2d(h, w, b, stride=1, padding=1))
            li += 1
        return h

    @classmethod
    def from_archive(cls, path: str | Path, dtype=DEFAULT_DTYPE) -> FeatureExtractor:
        """Load pretrained weights from an ``.npz`` written by :func:`save_extractor_archive`."""
        path = Path(path)
        if not path.exists():
            raise DataError(f"extractor archive not found: {path}")
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        if ARCHIVE_META_KEY not in arrays:
            raise DataError(f"{path}: missing {ARCHIVE_META_KEY} record")
        meta = json.loads(str(arrays.pop(ARCHIVE_META_KEY)))
        if meta.get("architecture") != ARCHIVE_ARCH:
            raise DataError(f"{path}: architecture {meta.get('architecture')!r} is not {ARCHIVE_ARCH}")
        width = float(meta.get("width", 1.0))
        names = vgg19_layer_names()
        if meta.get("layers") != names:
            raise DataError(f"{path}: layer list does not match VGG19 up to conv5_4")
        expected = {}
        cin = 3
        for name, cout in zip(names, _widths(width)):
            expected[f"{name}.weight"] = (cout, cin, 3, 3)
            expected[f"{name}.bias"] = (cout,)
            cin = cout
        if set(arrays) != set(expected):
            raise DataError(f"{path}: array names differ from expected ({sorted(set(arrays) ^ set(expected))[:4]} ...)")
        for k, shp in expected.items():
            if arrays[k].shape != shp:
                raise DataError(f"{path}: {k} has shape {arrays[k].shape}, expected {shp}")
        norm = meta.get("normalization") or {}
        return cls(
            seed=None,
            width=width,
            dtype=dtype,
            weights=arrays,
            mean=tuple(norm["mean"]) if "mean" in norm else None,
            std=tuple(norm["std"]) if "std" in norm else None,
        )


def save_extractor_archive(
    path: str | Path,
    weights: dict[str, np.ndarray],
    width: float = 1.0,
    mean: tuple[float, float, float] | None = None,
    std: tuple[float, float, float] | None = None,
) -> None:
    meta = {"architecture": ARCHIVE_ARCH, "layers": vgg19_layer_names(), "width": width, "normalization": {}}
    if mean is not None:
        meta["normalization"]["mean"] = list(mean)
    if std is not None:
        meta["normalization"]["std"] = list(std)
    np.savez(path, **weights, **{ARCHIVE_META_KEY: np.array(json.dumps(meta))})


Extractor = Callable[[Tensor], Tensor]


def perceptual_loss(pred: Tensor, gt: Tensor, extractor: Extractor) -> Tensor:
    """Mean squared distance between feature maps of prediction and target."""
    _same_shape(pred, gt, "perceptual_loss")
    target = extractor(gt.detach())
    return ops.mean_all(ops.square(ops.sub(extractor(pred), target)))


def content_loss_terms(
    pred: Tensor, gt: Tensor, weights: LossWeights, extractor: Extractor | None
) -> tuple[Tensor, dict[str, float]]:
    """Weighted content loss plus the unweighted values of its two terms."""
    pixel = l1_loss(pred, gt)
    if weights.lambda_p == 0:
        return ops.scalar_mul(pixel, weights.lambda_l1), {"l1": pixel.item()}
    if extractor is None:
        raise ConfigError("content loss with lambda_p > 0 needs a feature extractor")
    feat = perceptual_loss(pred, gt, extractor)
    total = ops.add(ops.scalar_mul(pixel, weights.lambda_l1), ops.scalar_mul(feat, weights.lambda_p))
    return total, {"l1": pixel.item(), "perceptual": feat.item()}


def content_loss(pred: Tensor, gt: Tensor, weights: LossWeights, extractor: Extractor | None) -> Tensor:
    """lambda_l1 * L1 + lambda_p * perceptual."""
    return content_loss_terms(pred, gt, weights, extractor)[0]
