"""Image ingestion, few-shot batching and image-grid output.

Images are held as float32 arrays shaped ``(N, C, H, W)`` with values in
``[-1, 1]``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".tif", ".tiff"}
MAX_FEWSHOT = 1000


@dataclass
class ImageDataset:
    images: np.ndarray
    tags: list = field(default_factory=list)
    labels: np.ndarray | None = None

    def __post_init__(self):
        imgs = np.asarray(self.images, dtype=np.float32)
        if imgs.ndim != 4 or imgs.shape[0] < 1:
            raise ValueError(f"images must be a non-empty (N, C, H, W) array, got shape {imgs.shape}")
        if not np.all(np.isfinite(imgs)) or imgs.min() < -1 or imgs.max() > 1:
            raise ValueError("image values must be finite and lie in [-1, 1]")
        self.images = imgs
        if not self.tags:
            self.tags = [f"item{i}" for i in range(len(imgs))]
        if len(self.tags) != len(imgs):
            raise ValueError("one provenance tag per image is required")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (len(imgs),):
                raise ValueError("labels must be one per image")

    def __len__(self):
        return self.images.shape[0]

    @property
    def k(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]


@dataclass
class FewShotDataset(ImageDataset):
    def __post_init__(self):
        super().__post_init__()
        if not 1 <= self.k <= MAX_FEWSHOT:
            raise ValueError(f"few-shot dataset must hold 1..{MAX_FEWSHOT} images, got {self.k}")


def to_uint8(images: np.ndarray) -> np.ndarray:
    """``(N, C, H, W)`` in [-1, 1] -> ``(N, H, W, C)`` uint8."""
    u = np.clip(np.rint((np.asarray(images, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return u.transpose(0, 2, 3, 1)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    """``(N, H, W, C)`` uint8 -> ``(N, C, H, W)`` float32 in [-1, 1]."""
    x = np.asarray(pixels, dtype=np.float32) / 127.5 - 1.0
    return x.transpose(0, 3, 1, 2)


def _decode(path: Path, image_size: int, channels: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        w, h = im.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        im = im.crop((left, top, left + side, top + side))
        if side != image_size:
            im = im.resize((image_size, image_size), Image.Resampling.BICUBIC)
        arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def load_image_dir(path, image_size: int, limit: int = 10, seed: int = 0, channels: int = 3) -> FewShotDataset:
    """Load a deterministic, seeded subset of a flat image directory.

    Files are shuffled with ``seed`` and decoded in that order until
    ``limit`` images succeed; each is center-cropped to a square and resized.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"image directory not found: {path}")
    files = sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        raise FileNotFoundError(f"no image files in {path}")
    order = np.random.default_rng(seed).permutation(len(files))
    pixels, tags = [], []
    for idx in order:
        if len(pixels) >= limit:
            break
        f = files[idx]
        try:
            pixels.append(_decode(f, image_size, channels))
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            log.warning("skipping undecodable image %s: %s", f, exc)
            continue
        tags.append(str(f))
    if not pixels:
        raise FileNotFoundError(f"no decodable images in {path}")
    if len(pixels) < limit:
        log.warning("requested %d images but only %d available in %s", limit, len(pixels), path)
    return FewShotDataset(from_uint8(np.stack(pixels)), tags=tags)


def iterate_batches(ds: ImageDataset, batch_size: int, rng: np.random.Generator):
    """Endless stream of batches drawn uniformly with replacement."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    while True:
        yield ds.images[rng.integers(0, len(ds), size=batch_size)]


def make_grid(images: np.ndarray, ncol: int | None = None, pad: int = 1) -> np.ndarray:
    """Tile ``(N, C, H, W)`` images into one ``(H', W', C)`` uint8 array."""
    pix = to_uint8(images)
    n, h, w, c = pix.shape
    ncol = ncol or int(math.ceil(math.sqrt(n)))
    nrow = int(math.ceil(n / ncol))
    grid = np.zeros((nrow * (h + pad) + pad, ncol * (w + pad) + pad, c), dtype=np.uint8)
    for i in range(n):
        r, col = divmod(i, ncol)
        y, x = pad + r * (h + pad), pad + col * (w + pad)
        grid[y:y + h, x:x + w] = pix[i]
    return grid


def _save_png(arr: np.ndarray, path):
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def save_image_grid(images: np.ndarray, path, ncol: int | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _save_png(make_grid(images, ncol=ncol), path)
    return path


def save_image_dir(images: np.ndarray, path, prefix: str = "img") -> list[Path]:
    """Write each image as its own lossless PNG; loadable by :func:`load_image_dir`."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    out = []
    width = max(4, len(str(len(images))))
    for i, px in enumerate(to_uint8(images)):
        p = path / f"{prefix}_{i:0{width}d}.png"
        _save_png(px, p)
        out.append(p)
    return out
