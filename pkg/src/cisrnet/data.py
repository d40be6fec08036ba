"""Degradation (bicubic downscale + JPEG), patch sampling, augmentation, manifests."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

from .core import Tensor
from .core.tensor import DEFAULT_DTYPE
from .errors import ConfigError, DataError

MANIFEST_VERSION = 1
PATCH_SIZE = 48
CUBIC_A = -0.5


# -- codecs --------------------------------------------------------------------


class JpegCodec(Protocol):
    codec_id: str

    def encode(self, image: np.ndarray, quality: int) -> bytes: ...

    def decode(self, payload: bytes) -> np.ndarray: ...


class PillowJpegCodec:
    """Baseline sequential JPEG through Pillow's libjpeg, 4:2:0 chroma."""

    codec_id = "pillow-libjpeg-baseline-420"

    def encode(self, image: np.ndarray, quality: int) -> bytes:
        if not 1 <= quality <= 100:
            raise ConfigError(f"JPEG quality must be in [1, 100], got {quality}")
        buf = io.BytesIO()
        try:
            Image.fromarray(as_uint8_rgb(image), "RGB").save(
                buf, format="JPEG", quality=int(quality), subsampling=2, optimize=False, progressive=False
            )
        except OSError as exc:
            raise DataError(f"JPEG encoding failed: {exc}") from exc
        return buf.getvalue()

    def decode(self, payload: bytes) -> np.ndarray:
        try:
            with Image.open(io.BytesIO(payload)) as im:
                return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
        except OSError as exc:
            raise DataError(f"JPEG decoding failed: {exc}") from exc


CODECS: dict[str, type] = {PillowJpegCodec.codec_id: PillowJpegCodec}


def get_codec(codec_id: str | None = None) -> JpegCodec:
    codec_id = codec_id or PillowJpegCodec.codec_id
    try:
        return CODECS[codec_id]()
    except KeyError:
        raise ConfigError(f"unknown codec {codec_id!r}; available: {sorted(CODECS)}") from None


# -- image io ----------------------------------------------------------------


def as_uint8_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise DataError(f"expected an HxWx3 uint8 image, got {image.shape} {image.dtype}")
    return image


def read_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def write_png(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(as_uint8_rgb(image), "RGB").save(path, format="PNG", optimize=False, compress_level=6)


# -- resampling ----------------------------------------------------------------


def cubic(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    """Keys cubic convolution kernel."""
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _mirror(idx: np.ndarray, n: int) -> np.ndarray:
    # half-sample symmetric: ... 1 0 | 0 1 ... n-1 | n-1 n-2 ...
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx < n, idx, period - 1 - idx)


def resize_weights(in_len: int, out_len: int) -> np.ndarray:
    """Dense (out_len, in_len) interpolation matrix; antialiased when shrinking."""
    scale = out_len / in_len
    support = 2.0
    if scale < 1:
        support /= scale
        kernel = lambda d: scale * cubic(scale * d)  # noqa: E731
    else:
        kernel = cubic
    centers = (np.arange(out_len) + 0.5) / scale - 0.5
    left = np.floor(centers - support).astype(int)
    taps = int(math.ceil(2 * support)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kernel(centers[:, None] - idx)
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((out_len, in_len))
    np.add.at(mat, (np.repeat(np.arange(out_len), taps), _mirror(idx, in_len).ravel()), w.ravel())
    return mat


def bicubic_resize(image: np.ndarray, factor: float | None = None, size: tuple[int, int] | None = None) -> np.ndarray:
    """Separable cubic resize (a=-0.5, mirrored borders) of an HxW or HxWxC array.

    Returns float64 in the input's value range, unquantized.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if size is None:
        if factor is None or factor <= 0:
            raise ConfigError("bicubic_resize needs a positive factor or an explicit size")
        size = (int(round(h * factor)), int(round(w * factor)))
    oh, ow = size
    if oh < 1 or ow < 1:
        raise DataError(f"resize to {oh}x{ow} is degenerate")
    if (oh, ow) == (h, w):
        return img.copy()
    wh = resize_weights(h, oh)
    ww = resize_weights(w, ow)
    out = np.tensordot(wh, img, axes=(1, 0))
    out = np.tensordot(ww, out, axes=(1, 1)).swapaxes(0, 1)
    return np.ascontiguousarray(out)


def quantize(image: np.ndarray) -> np.ndarray:
    """Clamp to [0, 255] and round half up to uint8."""
    return np.floor(np.clip(image, 0.0, 255.0) + 0.5).astype(np.uint8)


def crop_to_scale(hr: np.ndarray, scale: int) -> np.ndarray:
    h, w = hr.shape[:2]
    return hr[: h - h % scale, : w - w % scale]


def downscale(hr: np.ndarray, scale: int) -> np.ndarray:
    """Crop to a multiple of ``scale`` and bicubic-downscale to uint8 (no compression)."""
    hr = crop_to_scale(hr, scale)
    h, w = hr.shape[:2]
    return quantize(bicubic_resize(hr, size=(h // scale, w // scale)))


def degrade(
    hr: np.ndarray, scale: int, quality: int = 10, codec: JpegCodec | None = None, min_lr: int = PATCH_SIZE
) -> np.ndarray:
    """HR uint8 -> bicubic x1/scale -> JPEG at ``quality`` -> decoded uint8 LR."""
    hr = as_uint8_rgb(hr)
    if scale < 1:
        raise ConfigError(f"invalid scale {scale}")
    if min(hr.shape[:2]) < min_lr * scale:
        raise DataError(f"HR image {hr.shape[1]}x{hr.shape[0]} smaller than {min_lr * scale} px at x{scale}")
    codec = codec or get_codec()
    lr = downscale(hr, scale)
    return codec.decode(codec.encode(lr, quality))


def upscale_baseline(lr: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic upscaling of a (compressed) LR image, the evaluation baseline."""
    h, w = lr.shape[:2]
    return quantize(bicubic_resize(lr, size=(h * scale, w * scale)))


# -- tensors -----------------------------------------------------------------


def normalize(image: np.ndarray, dtype=DEFAULT_DTYPE) -> Tensor:
    """HxWx3 (or NxHxWx3) uint8 -> NCHW tensor in [0, 1]."""
    a = np.asarray(image)
    if a.ndim == 3:
        a = a[None]
    return Tensor(np.divide(np.ascontiguousarray(a.transpose(0, 3, 1, 2)), 255.0, dtype=dtype))


def denormalize(t: Tensor | np.ndarray) -> np.ndarray:
    """NCHW in [0, 1] -> NxHxWx3 uint8 (clamped, round half up); N=1 is squeezed."""
    a = t.data if isinstance(t, Tensor) else np.asarray(t)
    if a.ndim == 3:
        a = a[None]
    out = np.floor(np.clip(a.astype(np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    out = out.transpose(0, 2, 3, 1)
    return out[0] if out.shape[0] == 1 else out


# -- patches -----------------------------------------------------------------


@dataclass(frozen=True)
class AugFlags:
    hflip: bool = False
    vflip: bool = False
    rot90: bool = False


def sample_patch_pair(
    lr: np.ndarray, hr: np.ndarray, scale: int, rng: np.random.Generator, patch: int = PATCH_SIZE
) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    """Uniform LR window of ``patch`` px and the HR window it maps onto."""
    lh, lw = lr.shape[:2]
    if lh < patch or lw < patch:
        raise DataError(f"LR image {lw}x{lh} smaller than patch {patch}")
    if hr.shape[0] < lh * scale or hr.shape[1] < lw * scale:
        raise DataError("HR image does not cover the LR image at this scale")
    y = int(rng.integers(0, lh - patch + 1))
    x = int(rng.integers(0, lw - patch + 1))
    hp = patch * scale
    return lr[y : y + patch, x : x + patch], hr[y * scale : y * scale + hp, x * scale : x * scale + hp], (y, x)


def apply_augment(img: np.ndarray, flags: AugFlags) -> np.ndarray:
    if flags.hflip:
        img = img[:, ::-1]
    if flags.vflip:
        img = img[::-1]
    if flags.rot90:
        if img.shape[0] != img.shape[1]:
            raise DataError("rot90 augmentation needs a square patch")
        img = np.rot90(img)
    return img


def augment(lr: np.ndarray, hr: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, AugFlags]:
    """Independent 50% horizontal flip, vertical flip, 90-degree rotation."""
    hflip, vflip, rot = (bool(v) for v in rng.random(3) < 0.5)
    flags = AugFlags(hflip, vflip, rot)
    return apply_augment(lr, flags), apply_augment(hr, flags), flags


@dataclass
class PatchBatch:
    lr: Tensor
    hr: Tensor
    aug: list[AugFlags]
    origins: list[tuple[int, int, int]]  # (image index, lr y, lr x)


@dataclass
class LoadedPair:
    name: str
    lr: np.ndarray
    hr: np.ndarray  # cropped to a multiple of the scale


class PatchSampler:
    """Random paired batches; all randomness comes from the caller's generator."""

    def __init__(self, pairs: list[LoadedPair], scale: int, batch_size: int = 16, patch: int = PATCH_SIZE, dtype=DEFAULT_DTYPE):
        if not pairs:
            raise DataError("no training pairs")
        if batch_size < 1:
            raise ConfigError("batch_size must be positive")
        self.pairs, self.scale, self.batch_size, self.patch, self.dtype = pairs, scale, batch_size, patch, dtype

    def batch(self, rng: np.random.Generator) -> PatchBatch:
        lrs, hrs, flags, origins = [], [], [], []
        for _ in range(self.batch_size):
            i = int(rng.integers(0, len(self.pairs)))
            p = self.pairs[i]
            lp, hp, (y, x) = sample_patch_pair(p.lr, p.hr, self.scale, rng, self.patch)
            lp, hp, f = augment(lp, hp, rng)
            lrs.append(lp)
            hrs.append(hp)
            flags.append(f)
            origins.append((i, y, x))
        return PatchBatch(normalize(np.stack(lrs), self.dtype), normalize(np.stack(hrs), self.dtype), flags, origins)


# -- manifests -----------------------------------------------------------------


@dataclass(frozen=True)
class ImagePair:
    hr_path: str
    lr_path: str
    scale: int
    codec_id: str
    quality: int = 10


@dataclass
class DatasetManifest:
    pairs: list[ImagePair]
    split: str
    scale: int
    codec_id: str
    quality: int
    seed: int
    root: Path = field(default_factory=Path, compare=False)

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "split": self.split,
            "scale": self.scale,
            "quality": self.quality,
            "codec_id": self.codec_id,
            "seed": self.seed,
            "pairs": [{"hr": p.hr_path, "lr": p.lr_path} for p in self.pairs],
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, d: dict, root: Path = Path(".")) -> DatasetManifest:
        if d.get("version") != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {d.get('version')!r}")
        try:
            scale, quality, codec_id = int(d["scale"]), int(d["quality"]), str(d["codec_id"])
            pairs = [ImagePair(p["hr"], p["lr"], scale, codec_id, quality) for p in d["pairs"]]
            m = cls(pairs, str(d.get("split", "train")), scale, codec_id, quality, int(d.get("seed", 0)), root)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed manifest: {exc}") from exc
        hrs = [p.hr_path for p in pairs]
        if len(set(hrs)) != len(hrs):
            raise DataError("manifest lists the same HR image twice")
        return m

    @classmethod
    def read(cls, path: str | Path, check_files: bool = True) -> DatasetManifest:
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        m = cls.from_dict(d, path.parent)
        if check_files:
            for p in m.pairs:
                for rel in (p.hr_path, p.lr_path):
                    if not (m.root / rel).exists():
                        raise DataError(f"manifest references missing file {rel}")
        return m

    def load(self) -> list[LoadedPair]:
        out = []
        for p in self.pairs:
            hr = crop_to_scale(read_image(self.root / p.hr_path), self.scale)
            lr = read_image(self.root / p.lr_path)
            if lr.shape[0] * self.scale != hr.shape[0] or lr.shape[1] * self.scale != hr.shape[1]:
                raise DataError(f"{p.lr_path}: LR {lr.shape[:2]} does not match HR {hr.shape[:2]} at x{self.scale}")
            out.append(LoadedPair(Path(p.hr_path).stem, lr, hr))
        return out


def prepare_dataset(
    hr_dir: str | Path,
    out_dir: str | Path,
    scale: int,
    quality: int = 10,
    seed: int = 0,
    codec_id: str | None = None,
    split: str = "train",
    force: bool = False,
    min_lr: int = PATCH_SIZE,
) -> DatasetManifest:
    """Degrade every PNG in ``hr_dir`` into ``out_dir`` and write ``manifest.json``.

    HR images are copied next to the LR JPEGs so the manifest is self-contained.
    """
    hr_dir, out_dir = Path(hr_dir), Path(out_dir)
    sources = sorted(hr_dir.glob("*.png"))
    if not sources:
        raise DataError(f"no PNG images in {hr_dir}")
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists() and not force:
        raise DataError(f"{manifest_path} exists; pass force to overwrite")
    codec = get_codec(codec_id)
    (out_dir / "hr").mkdir(parents=True, exist_ok=True)
    (out_dir / "lr").mkdir(parents=True, exist_ok=True)
    pairs = []
    for src in sources:
        hr = crop_to_scale(read_image(src), scale)
        if min(hr.shape[:2]) < min_lr * scale:
            raise DataError(f"{src.name}: smaller than {min_lr * scale} px at x{scale}")
        payload = codec.encode(downscale(hr, scale), quality)
        hr_rel, lr_rel = f"hr/{src.stem}.png", f"lr/{src.stem}_x{scale}_q{quality}.jpg"
        write_png(out_dir / hr_rel, hr)
        (out_dir / lr_rel).write_bytes(payload)
        pairs.append(ImagePair(hr_rel, lr_rel, scale, codec.codec_id, quality))
    m = DatasetManifest(pairs, split, scale, codec.codec_id, quality, seed, out_dir)
    m.write(manifest_path)
    return m


# -- procedural images -----------------------------------------------------------


def synthetic_image(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Smooth shading plus sharp-edged shapes and stripe textures, uint8 RGB."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.empty((height, width, 3))
    base = rng.uniform(40, 215, 3)
    gy, gx = rng.uniform(-0.4, 0.4, (2, 3))
    for ch in range(3):
        img[..., ch] = base[ch] + gy[ch] * (yy - height / 2) + gx[ch] * (xx - width / 2)
    n_shapes = int(rng.integers(12, 22))
    for _ in range(n_shapes):
        color = rng.uniform(0, 255, 3)
        kind = rng.integers(0, 4)
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        if kind == 0:  # ellipse
            ry, rx = rng.uniform(4, height / 4), rng.uniform(4, width / 4)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        elif kind == 1:  # rotated rectangle
            th = rng.uniform(0, np.pi)
            hy, hx = rng.uniform(3, height / 5), rng.uniform(3, width / 5)
            u = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
            v = -(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th)
            mask = (np.abs(u) <= hx) & (np.abs(v) <= hy)
        elif kind == 2:  # stripe patch
            th = rng.uniform(0, np.pi)
            period = rng.uniform(3, 12)
            r = rng.uniform(8, min(height, width) / 3)
            phase = ((xx * np.cos(th) + yy * np.sin(th)) / period) % 1.0
            mask = (phase < 0.5) & ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r)
        else:  # thick line
            th = rng.uniform(0, np.pi)
            d = np.abs((xx - cx) * np.sin(th) - (yy - cy) * np.cos(th))
            mask = d <= rng.uniform(1, 4)
        img[mask] = color
    return quantize(img)
