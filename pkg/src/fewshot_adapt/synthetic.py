"""Shape-world: a procedural source domain with known structural modes.

Each mode is a shape kind drawn in one cell of a 2x2 grid with a saturated
color. The few-shot target is a handful of images from a subset of modes
with their hue rotated, so structure persists while appearance changes.
Mode classification works on the per-pixel HSV value channel, which a hue
rotation leaves untouched.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .data import FewShotDataset, ImageDataset

log = logging.getLogger(__name__)

SHAPES = ("hbar", "vbar")
REJECT = -1


@dataclass(frozen=True)
class Mode:
    shape: str
    cell: tuple[int, int]
    hue: float

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; choose from {SHAPES}")


def default_modes() -> list[Mode]:
    cells = [(0, 0), (0, 1), (1, 0), (1, 1)]
    combos = list(itertools.product(SHAPES, cells))
    return [Mode(s, c, i / len(combos)) for i, (s, c) in enumerate(combos)]


@dataclass
class ShapeWorldSpec:
    image_size: int = 32
    modes: list = field(default_factory=default_modes)
    samples_per_mode: int = 500
    noise_level: float = 1.0

    def __post_init__(self):
        self.modes = [m if isinstance(m, Mode) else Mode(m["shape"], tuple(m["cell"]), m["hue"])
                      for m in self.modes]
        if len(self.modes) < 2:
            raise ValueError("shape world needs at least two modes")
        if len({(m.shape, m.cell) for m in self.modes}) != len(self.modes):
            raise ValueError("modes must differ in shape or cell")
        if not 0 <= self.noise_level <= 1:
            raise ValueError("noise_level must lie in [0, 1]")

    @property
    def max_shift(self) -> int:
        return int(round(2 * self.noise_level))

    @property
    def max_resize(self) -> int:
        return int(round(1 * self.noise_level))

    def to_dict(self):
        d = asdict(self)
        d["modes"] = [dict(shape=m.shape, cell=list(m.cell), hue=m.hue) for m in self.modes]
        return d


def _mask(shape: str, size: int, cy: float, cx: float, half: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = np.abs(yy - cy), np.abs(xx - cx)
    thick, length = max(1, half // 2), half + 2
    if shape == "hbar":
        m = (dy < thick) & (dx < length)
    else:
        m = (dx < thick) & (dy < length)
    return m.astype(np.float64)


def _center(spec: ShapeWorldSpec, mode: Mode):
    cs = spec.image_size / 2
    return (mode.cell[0] + 0.5) * cs - 0.5, (mode.cell[1] + 0.5) * cs - 0.5


def _base_half(spec):
    return max(2, spec.image_size // 6)


def render(spec: ShapeWorldSpec, mode: Mode, dy=0, dx=0, dsize=0, hue_jitter=0.0) -> np.ndarray:
    """One ``(3, H, W)`` image in [-1, 1]."""
    cy, cx = _center(spec, mode)
    m = _mask(mode.shape, spec.image_size, cy + dy, cx + dx, _base_half(spec) + dsize)
    rgb = hsv_to_rgb(np.array([(mode.hue + hue_jitter) % 1.0, 1.0, 1.0]))
    img = m[None] * rgb[:, None, None]
    return (2.0 * img - 1.0).astype(np.float32)


def make_shape_dataset(spec: ShapeWorldSpec, rng: np.random.Generator) -> ImageDataset:
    s, r = spec.max_shift, spec.max_resize
    images, labels = [], []
    for label, mode in enumerate(spec.modes):
        for _ in range(spec.samples_per_mode):
            dy, dx = rng.integers(-s, s + 1, size=2)
            ds = rng.integers(-r, r + 1)
            hj = rng.uniform(-0.03, 0.03) * spec.noise_level
            images.append(render(spec, mode, dy, dx, ds, hj))
            labels.append(label)
    tags = [f"mode{l}" for l in labels]
    return ImageDataset(np.stack(images), tags=tags, labels=np.array(labels))


def hue_shift(images: np.ndarray, shift: float) -> np.ndarray:
    """Rotate hue of ``(N, 3, H, W)`` images by ``shift`` turns; value channel is preserved."""
    rgb = ((np.asarray(images, dtype=np.float64) + 1.0) / 2.0).clip(0, 1).transpose(0, 2, 3, 1)
    hsv = rgb_to_hsv(rgb)
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    out = hsv_to_rgb(hsv).transpose(0, 3, 1, 2)
    return (2.0 * out - 1.0).astype(np.float32)


def make_fewshot_target(spec: ShapeWorldSpec, chosen_modes, k: int, transform=None,
                        rng: np.random.Generator | None = None) -> FewShotDataset:
    """``k`` images spread round-robin over ``chosen_modes`` (indices), then transformed.

    ``transform`` maps an image array to an image array; ``None`` is identity.
    """
    chosen = list(chosen_modes)
    if not chosen or any(not 0 <= c < len(spec.modes) for c in chosen):
        raise ValueError(f"chosen_modes must be indices into the {len(spec.modes)} modes")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    variety = len(chosen) * (2 * spec.max_shift + 1) ** 2 * (2 * spec.max_resize + 1)
    if spec.noise_level == 0 and k > len(chosen):
        log.warning("k=%d exceeds the %d distinct images available at zero noise", k, len(chosen))
    elif k > variety:
        log.warning("k=%d exceeds the structural variety (%d) of the chosen modes", k, variety)
    s, r = spec.max_shift, spec.max_resize
    images, labels = [], []
    for i in range(k):
        label = chosen[i % len(chosen)]
        dy, dx = rng.integers(-s, s + 1, size=2)
        ds = rng.integers(-r, r + 1)
        hj = rng.uniform(-0.03, 0.03) * spec.noise_level
        images.append(render(spec, spec.modes[label], dy, dx, ds, hj))
        labels.append(label)
    images = np.stack(images)
    if transform is not None:
        images = np.asarray(transform(images), dtype=np.float32)
    return FewShotDataset(images, tags=[f"mode{l}" for l in labels], labels=np.array(labels))


def value_map(images) -> np.ndarray:
    """HSV value channel in [0, 1], flattened: ``(N, H*W)``."""
    x = (np.asarray(images, dtype=np.float64) + 1.0) / 2.0
    return x.clip(0, 1).max(axis=1).reshape(len(x), -1)


class ModeClassifier:
    """Nearest-template classifier over every clean rendering a mode can produce.

    Distance is the mean squared difference of value maps; samples whose best
    distance exceeds ``threshold`` are rejected (label ``-1``).
    """

    def __init__(self, spec: ShapeWorldSpec, threshold: float = 0.03):
        self.spec = spec
        self.threshold = threshold
        s, r = spec.max_shift, spec.max_resize
        templates, owners = [], []
        for label, mode in enumerate(spec.modes):
            for dy, dx, ds in itertools.product(range(-s, s + 1), range(-s, s + 1), range(-r, r + 1)):
                templates.append(render(spec, mode, dy, dx, ds))
                owners.append(label)
        self.templates = value_map(np.stack(templates))
        self.owners = np.array(owners)

    def distances(self, samples) -> np.ndarray:
        """``(N, n_modes)`` best template distance per mode."""
        v = value_map(samples)
        t = self.templates
        d = (v ** 2).mean(1)[:, None] + (t ** 2).mean(1)[None] - 2.0 * (v @ t.T) / v.shape[1]
        d = np.maximum(d, 0.0)
        out = np.full((len(v), len(self.spec.modes)), np.inf)
        for label in range(len(self.spec.modes)):
            out[:, label] = d[:, self.owners == label].min(axis=1)
        return out

    def predict(self, samples) -> np.ndarray:
        d = self.distances(samples)
        labels = d.argmin(axis=1)
        labels[d.min(axis=1) > self.threshold] = REJECT
        return labels


def mode_coverage(samples, spec: ShapeWorldSpec, threshold: float = 0.03, min_fraction: float = 0.01,
                  classifier: ModeClassifier | None = None) -> float:
    """Fraction of modes that receive at least ``min_fraction`` of the samples."""
    samples = np.asarray(samples)
    if len(samples) == 0:
        raise ValueError("samples must be non-empty")
    clf = classifier or ModeClassifier(spec, threshold)
    labels = clf.predict(samples)
    counts = np.bincount(labels[labels != REJECT], minlength=len(spec.modes))
    return float(np.mean(counts >= min_fraction * len(samples)))


def correspondence_score(source_samples, adapted_samples, spec: ShapeWorldSpec, threshold: float = 0.03,
                         classifier: ModeClassifier | None = None) -> float:
    """Fraction of latents whose source and adapted images fall in the same structural mode.

    Rows of the two arrays must come from the same latents; rejected samples never match.
    """
    if len(source_samples) != len(adapted_samples) or len(source_samples) == 0:
        raise ValueError("need equally many (non-zero) source and adapted samples")
    clf = classifier or ModeClassifier(spec, threshold)
    a, b = clf.predict(source_samples), clf.predict(adapted_samples)
    return float(np.mean((a == b) & (a != REJECT)))
