"""Y-channel PSNR / SSIM and dataset evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import no_grad
from .data import LoadedPair, normalize, denormalize, upscale_baseline
from .errors import ConfigError, DataError, ShapeError

PEAK = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

# +inf is the documented PSNR for identical images.
PSNR_IDENTICAL = math.inf


def rgb_to_y(image: np.ndarray) -> np.ndarray:
    """BT.601 luma in [16, 235] from an 8-bit RGB image."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"rgb_to_y expects HxWx3, got {img.shape}")
    rgb = img.astype(np.float64)
    return 16.0 + (65.481 * rgb[..., 0] + 128.553 * rgb[..., 1] + 24.966 * rgb[..., 2]) / 255.0


def _y_planes(pred: np.ndarray, gt: np.ndarray, shave: int) -> tuple[np.ndarray, np.ndarray]:
    if pred.shape != gt.shape:
        raise ShapeError(f"image sizes differ: {pred.shape} vs {gt.shape}")
    if shave < 0:
        raise ConfigError("shave must be >= 0")
    a, b = rgb_to_y(pred), rgb_to_y(gt)
    if shave:
        a, b = a[shave:-shave, shave:-shave], b[shave:-shave, shave:-shave]
    if a.size == 0:
        raise ShapeError(f"nothing left after shaving {shave} px from {pred.shape[:2]}")
    return a, b


def psnr_plane(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR between two real planes on the 8-bit scale."""
    mse = float(np.mean((np.asarray(a, np.float64) - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(PEAK * PEAK / mse)


def psnr_y(pred: np.ndarray, gt: np.ndarray, shave: int = 0) -> float:
    return psnr_plane(*_y_planes(pred, gt, shave))


def _gaussian_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g1: np.ndarray) -> np.ndarray:
    # separable "valid" correlation with a 1-D normalized gaussian
    rows = sliding_window_view(img, g1.size, axis=0) @ g1
    return sliding_window_view(rows, g1.size, axis=1) @ g1


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    g1 = _gaussian_1d()
    c1, c2 = (SSIM_K1 * PEAK) ** 2, (SSIM_K2 * PEAK) ** 2
    mu_a, mu_b = _filter_valid(a, g1), _filter_valid(b, g1)
    var_a = _filter_valid(a * a, g1) - mu_a * mu_a
    var_b = _filter_valid(b * b, g1) - mu_b * mu_b
    cov = _filter_valid(a * b, g1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim_y(pred: np.ndarray, gt: np.ndarray, shave: int = 0) -> float:
    a, b = _y_planes(pred, gt, shave)
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} px after shave, got {a.shape}")
    if np.array_equal(a, b):
        return 1.0
    return float(ssim_map(a, b).mean())


# -- dataset evaluation ----------------------------------------------------------


@dataclass
class ImageScore:
    name: str
    psnr_y: float
    ssim_y: float


@dataclass
class EvalReport:
    label: str
    scale: int
    shave: int
    codec_id: str = ""
    rows: list[ImageScore] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr_y for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim_y for r in self.rows])) if self.rows else float("nan")

    def to_text(self) -> str:
        lines = [f"# {self.label}  scale=x{self.scale} shave={self.shave} codec={self.codec_id}"]
        lines += [f"{r.name}\tpsnr_y={r.psnr_y:.4f}\tssim_y={r.ssim_y:.4f}" for r in self.rows]
        lines.append(f"MEAN\tpsnr_y={self.mean_psnr:.4f}\tssim_y={self.mean_ssim:.4f}")
        return "\n".join(lines) + "\n"


def write_reports(reports: Sequence[EvalReport], out_dir: str | Path, stem: str = "eval") -> None:
    """Write ``<stem>.txt`` (human readable) and ``<stem>.csv`` (one row per image and method)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.txt").write_text("\n".join(r.to_text() for r in reports))
    with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "image", "scale", "shave", "codec_id", "psnr_y", "ssim_y"])
        for rep in reports:
            for r in rep.rows:
                w.writerow([rep.label, r.name, rep.scale, rep.shave, rep.codec_id, repr(r.psnr_y), repr(r.ssim_y)])
            w.writerow([rep.label, "MEAN", rep.scale, rep.shave, rep.codec_id, repr(rep.mean_psnr), repr(rep.mean_ssim)])


Predictor = Callable[[np.ndarray], np.ndarray]


def model_predictor(model, output: str = "fine") -> Predictor:
    """LR uint8 -> SR uint8 (clamped and quantized); ``output`` picks the refined or the coarse image."""
    if output not in ("fine", "coarse"):
        raise ConfigError(f"output must be 'fine' or 'coarse', got {output!r}")

    def predict(lr: np.ndarray) -> np.ndarray:
        with no_grad():
            if output == "coarse":
                return denormalize(model.coarse_forward(normalize(lr, model.dtype)))
            _, fine = model(normalize(lr, model.dtype))
        return denormalize(fine)

    return predict


def bicubic_predictor(scale: int) -> Predictor:
    return lambda lr: upscale_baseline(lr, scale)


def evaluate_dataset(
    predict: Predictor,
    pairs: Sequence[LoadedPair],
    scale: int,
    label: str = "model",
    codec_id: str = "",
    model_scale: int | None = None,
) -> EvalReport:
    """Score every pair with border shave = scale; aggregates are arithmetic means."""
    if model_scale is not None and model_scale != scale:
        raise ConfigError(f"model scale x{model_scale} does not match dataset scale x{scale}")
    if not pairs:
        raise DataError("empty evaluation set")
    report = EvalReport(label, scale, scale, codec_id)
    for p in pairs:
        sr = predict(p.lr)
        if sr.shape != p.hr.shape:
            raise ShapeError(f"{p.name}: prediction {sr.shape} vs ground truth {p.hr.shape}")
        report.rows.append(ImageScore(p.name, psnr_y(sr, p.hr, scale), ssim_y(sr, p.hr, scale)))
    return report
