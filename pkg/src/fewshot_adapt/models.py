"""Toy convolutional generator and discriminator.

The generator exposes per-layer activation taps; the discriminator has one
convolutional trunk feeding two heads: a whole-image logit and a set of
patch-logit maps read off internal trunk layers.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .latent import LatentSpec, NoiseBatch

ActivationStack = dict  # layer id -> (N, features) tensor

# Patch band quoted for 256-pixel inputs; scaled linearly to other sizes.
REFERENCE_PATCH_BAND = (22, 61)
REFERENCE_RESOLUTION = 256


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    latent_dim: int = 32
    g_base: int = 64          # channels of the 4x4 seed tensor
    g_min: int = 8
    d_base: int = 8           # channels of the first trunk layer
    d_max: int = 64
    tap_layers: list | None = None
    patch_layers: list | None = None

    def __post_init__(self):
        n = int(round(math.log2(self.image_size)))
        if 2 ** n != self.image_size or self.image_size < 8:
            raise ValueError(f"image_size must be a power of two >= 8, got {self.image_size}")
        if self.channels < 1 or self.latent_dim < 1:
            raise ValueError("channels and latent_dim must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class ConvSpec:
    name: str
    kernel: int
    stride: int
    padding: int
    out_channels: int


def _n_up(image_size):
    return int(round(math.log2(image_size))) - 2


def trunk_layout(config: ModelConfig) -> list[ConvSpec]:
    """Discriminator trunk: a stride-1 3x3 stem, then (4x4/2, 3x3/1) pairs down to 4x4."""
    specs = [ConvSpec("t0", 3, 1, 1, config.d_base)]
    ch = config.d_base
    size = config.image_size
    idx = 1
    while size > 4:
        ch = min(ch * 2, config.d_max)
        specs.append(ConvSpec(f"t{idx}", 4, 2, 1, ch))
        size //= 2
        idx += 1
        if size > 4:
            specs.append(ConvSpec(f"t{idx}", 3, 1, 1, ch))
            idx += 1
    return specs


def receptive_fields(layout: list[ConvSpec]) -> dict[str, tuple[int, int, int]]:
    """Map layer name -> (extent, jump, start) by the standard recurrence.

    ``extent`` grows by ``(kernel - 1) * jump``; ``start`` is the input
    coordinate of the first pixel seen by output cell 0 (negative inside
    the padding).
    """
    out = {}
    extent, jump, start = 1, 1, 0
    for s in layout:
        extent = extent + (s.kernel - 1) * jump
        start = start - s.padding * jump
        jump = jump * s.stride
        out[s.name] = (extent, jump, start)
    return out


def default_patch_layers(config: ModelConfig) -> list[str]:
    lo, hi = (b * config.image_size / REFERENCE_RESOLUTION for b in REFERENCE_PATCH_BAND)
    rfs = receptive_fields(trunk_layout(config))
    chosen = [name for name, (ext, _, _) in rfs.items() if lo <= ext <= hi]
    if not chosen:
        # band too narrow for very small inputs: take the layer closest to it
        mid = (lo + hi) / 2
        chosen = [min(rfs, key=lambda n: abs(rfs[n][0] - mid))]
    return chosen


def reference_256_config() -> ModelConfig:
    """The 256-pixel member of the discriminator family, at minimal width."""
    return ModelConfig(image_size=256, channels=3, latent_dim=8, g_base=4, g_min=4, d_base=2, d_max=4)


class Generator(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.latent_spec = LatentSpec(config.latent_dim)
        self.output_shape = (config.channels, config.image_size, config.image_size)
        self.frozen = False
        self.seed = nn.Linear(config.latent_dim, config.g_base * 16)
        blocks = []
        ch = config.g_base
        for _ in range(_n_up(config.image_size)):
            out = max(ch // 2, config.g_min)
            blocks.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch, out, 3, padding=1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(out, out, 3, padding=1),
                nn.LeakyReLU(0.2),
            ))
            ch = out
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = nn.Conv2d(ch, config.channels, 1)
        self.act = nn.LeakyReLU(0.2)
        names = [f"block{i}" for i in range(len(blocks))] + ["image"]
        taps = list(config.tap_layers) if config.tap_layers is not None else names
        unknown = [t for t in taps if t not in names]
        if not taps or unknown:
            raise ValueError(f"tap_layers must be a non-empty subset of {names}, got {taps}")
        self.tap_layers = taps
        self.layer_names = names

    def forward(self, z, with_taps=False):
        n = z.shape[0]
        h = self.act(self.seed(z)).view(n, self.config.g_base, 4, 4)
        acts = {}
        for i, block in enumerate(self.blocks):
            h = block(h)
            if with_taps and f"block{i}" in self.tap_layers:
                acts[f"block{i}"] = h.reshape(n, -1)
        img = torch.tanh(self.to_rgb(h))
        if with_taps and "image" in self.tap_layers:
            acts["image"] = img.reshape(n, -1)
        if with_taps:
            return img, {t: acts[t] for t in self.tap_layers}
        return img


class Discriminator(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.input_shape = (config.channels, config.image_size, config.image_size)
        self.layout = trunk_layout(config)
        layers = []
        ch = config.channels
        for s in self.layout:
            layers.append(nn.Conv2d(ch, s.out_channels, s.kernel, s.stride, s.padding))
            ch = s.out_channels
        self.trunk = nn.ModuleList(layers)
        self.act = nn.LeakyReLU(0.2)
        self.image_head = nn.Linear(ch * 16, 1)
        names = [s.name for s in self.layout]
        patch = list(config.patch_layers) if config.patch_layers is not None else default_patch_layers(config)
        unknown = [p for p in patch if p not in names]
        if not patch or unknown:
            raise ValueError(f"patch_layers must be a non-empty subset of {names}, got {patch}")
        self.patch_layers = patch
        widths = {s.name: s.out_channels for s in self.layout}
        self.patch_heads = nn.ModuleDict({p: nn.Conv2d(widths[p], 1, 1) for p in patch})
        self.trunk_calls = 0

    def forward(self, x, image=True, patch=True):
        """Run the trunk once and evaluate the requested heads.

        Returns ``(image_logits or None, patch_maps or None)``; ``patch_maps``
        is a list of ``(N, H_l, W_l)`` tensors ordered as ``patch_layers``.
        """
        self.trunk_calls += 1
        feats = {}
        h = x
        for s, conv in zip(self.layout, self.trunk):
            h = self.act(conv(h))
            feats[s.name] = h
            if not image and patch and all(p in feats for p in self.patch_layers):
                break
        img_logits = self.image_head(h.flatten(1)).squeeze(1) if image else None
        maps = [self.patch_heads[p](feats[p]).squeeze(1) for p in self.patch_layers] if patch else None
        return img_logits, maps


def build_models(config: ModelConfig, seed: int = 0):
    torch.manual_seed(seed)
    return Generator(config), Discriminator(config)


def _as_tensor(noise, gen):
    v = noise.vectors if isinstance(noise, NoiseBatch) else noise
    if isinstance(v, np.ndarray):
        v = torch.from_numpy(np.array(v))
    dtype = next(gen.parameters()).dtype
    return v.to(dtype)


def generate(gen: Generator, noise, with_taps: bool = False):
    """Return ``(images, activations)``; activations is ``None`` unless requested."""
    dim = noise.dim if isinstance(noise, NoiseBatch) else noise.shape[-1]
    if dim != gen.latent_spec.dim:
        raise ValueError(f"noise dim {dim} does not match generator latent dim {gen.latent_spec.dim}")
    z = _as_tensor(noise, gen)
    if with_taps:
        return gen(z, with_taps=True)
    return gen(z), None


def clone_frozen(gen: Generator) -> Generator:
    """Deep copy with gradients disabled on every parameter."""
    clone = copy.deepcopy(gen)
    for p in clone.parameters():
        p.requires_grad_(False)
    clone.eval()
    clone.frozen = True
    return clone


def _check_images(disc, images):
    if tuple(images.shape[1:]) != disc.input_shape:
        raise ValueError(f"expected images of shape (N, {disc.input_shape}), got {tuple(images.shape)}")


def discriminate_image(disc: Discriminator, images):
    _check_images(disc, images)
    return disc(images, image=True, patch=False)[0]


def discriminate_patch(disc: Discriminator, images):
    _check_images(disc, images)
    return disc(images, image=False, patch=True)[1]


def effective_patch_size(disc: Discriminator, layer: str) -> tuple[int, int]:
    if layer not in disc.patch_layers:
        raise ValueError(f"{layer!r} is not a patch layer; patch layers are {disc.patch_layers}")
    ext = receptive_fields(disc.layout)[layer][0]
    return ext, ext


def receptive_window(disc: Discriminator, layer: str, row: int, col: int):
    """Input-pixel window ``(r0, r1, c0, c1)`` (half-open, clipped) seen by one patch cell."""
    ext, jump, start = receptive_fields(disc.layout)[layer]
    size = disc.config.image_size
    r0, c0 = start + row * jump, start + col * jump
    return max(r0, 0), min(r0 + ext, size), max(c0, 0), min(c0 + ext, size)
