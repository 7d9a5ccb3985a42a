"""Training objectives.

All functions work on torch tensors so that they can sit inside the training
graph; the KL regulariser treats the source-generator side as a constant.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .latent import AnchorSet, NoiseBatch, sample_anchor, sample_prior
from .models import generate

__all__ = [
    "NumericDegenerateError",
    "SimilarityDistribution",
    "LossReport",
    "AdvParts",
    "similarity_distribution",
    "similarity_log_probs",
    "distance_consistency_loss",
    "adversarial_d_loss",
    "adversarial_g_loss",
    "reduce_patch_logits",
    "discriminator_parts",
    "generator_parts",
    "relaxed_adversarial_losses",
    "total_generator_loss",
]


class NumericDegenerateError(ArithmeticError):
    """Raised when an activation vector has zero norm (a dead layer)."""


@dataclass
class SimilarityDistribution:
    probs: torch.Tensor
    layer: str
    index: int


@dataclass
class LossReport:
    adv_image: float
    adv_patch: float
    dist: float
    total: float
    lam: float
    d_image: float = 0.0
    d_patch: float = 0.0

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


class AdvParts(NamedTuple):
    image: torch.Tensor
    patch: torch.Tensor


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def similarity_log_probs(acts: torch.Tensor) -> torch.Tensor:
    """Row-wise log-softmax of cosine similarities with the diagonal removed.

    ``acts`` is ``(B, F)``; the result is ``(B, B-1)``, row ``i`` listing
    samples ``j != i`` in increasing ``j``.
    """
    if acts.ndim != 2 or acts.shape[0] < 2:
        raise ValueError(f"need at least two flattened activation vectors, got shape {tuple(acts.shape)}")
    norms = acts.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise NumericDegenerateError("zero-norm activation vector; the tapped layer is dead for this input")
    unit = acts / norms
    sim = unit @ unit.T
    b = acts.shape[0]
    off = ~torch.eye(b, dtype=torch.bool, device=acts.device)
    return F.log_softmax(sim[off].view(b, b - 1), dim=1)


def similarity_distribution(acts: dict, layer: str, i: int) -> SimilarityDistribution:
    if layer not in acts:
        raise KeyError(f"layer {layer!r} not in activation stack")
    a = acts[layer]
    if not 0 <= i < a.shape[0]:
        raise IndexError(f"sample index {i} out of range for batch of {a.shape[0]}")
    return SimilarityDistribution(similarity_log_probs(a.flatten(1))[i].exp(), layer, i)


def distance_consistency_loss(source_acts: dict, adapted_acts: dict) -> torch.Tensor:
    """Sum over layers and samples of KL(adapted || source)."""
    if set(source_acts) != set(adapted_acts):
        raise ValueError(f"layer sets differ: {sorted(source_acts)} vs {sorted(adapted_acts)}")
    if not source_acts:
        raise ValueError("empty activation stacks")
    total = 0.0
    for layer in adapted_acts:
        src, ada = source_acts[layer], adapted_acts[layer]
        if src.shape[0] != ada.shape[0]:
            raise ValueError(f"batch size mismatch at {layer!r}: {src.shape[0]} vs {ada.shape[0]}")
        log_q = similarity_log_probs(src.detach().flatten(1))
        log_p = similarity_log_probs(ada.flatten(1))
        total = total + (log_p.exp() * (log_p - log_q)).sum()
    return total


def _nonempty(*xs):
    out = [_as_tensor(x).reshape(-1) for x in xs]
    if any(x.numel() == 0 for x in out):
        raise ValueError("logit sets must be non-empty")
    return out


def adversarial_d_loss(real_logits, fake_logits, literal: bool = False) -> torch.Tensor:
    """Discriminator side. Non-saturating: softplus(-real) + softplus(fake), batch means."""
    real, fake = _nonempty(real_logits, fake_logits)
    if literal:
        return fake.mean() - real.mean()
    return F.softplus(-real).mean() + F.softplus(fake).mean()


def adversarial_g_loss(fake_logits, literal: bool = False) -> torch.Tensor:
    (fake,) = _nonempty(fake_logits)
    if literal:
        return -fake.mean()
    return F.softplus(-fake).mean()


def reduce_patch_logits(maps) -> torch.Tensor:
    """Average each map over its cells, then over layers: one logit per image."""
    return torch.stack([m.flatten(1).mean(dim=1) for m in maps], dim=0).mean(dim=0)


_ZERO = torch.zeros(())


def discriminator_parts(gen, disc, z_img, z_patch, real, relaxed=True, literal=False) -> AdvParts:
    """Discriminator losses for one step; generator outputs are detached.

    With ``relaxed`` the image head judges ``z_img`` generations (anchor
    samples) and the patch head judges ``z_patch`` generations (full prior).
    Without it only the image head is used, on ``z_img``.
    """
    real_img, real_maps = disc(real, image=True, patch=relaxed)
    with torch.no_grad():
        fake_img = generate(gen, z_img)[0]
    d_img = adversarial_d_loss(real_img, disc(fake_img, image=True, patch=False)[0], literal)
    if not relaxed:
        return AdvParts(d_img, _ZERO)
    with torch.no_grad():
        fake_patch = generate(gen, z_patch)[0]
    fake_maps = disc(fake_patch, image=False, patch=True)[1]
    d_patch = adversarial_d_loss(reduce_patch_logits(real_maps), reduce_patch_logits(fake_maps), literal)
    return AdvParts(d_img, d_patch)


def generator_parts(gen, disc, z_img, z_patch, relaxed=True, literal=False) -> AdvParts:
    g_img = adversarial_g_loss(disc(generate(gen, z_img)[0], image=True, patch=False)[0], literal)
    if not relaxed:
        return AdvParts(g_img, _ZERO)
    maps = disc(generate(gen, z_patch)[0], image=False, patch=True)[1]
    return AdvParts(g_img, adversarial_g_loss(reduce_patch_logits(maps), literal))


def relaxed_adversarial_losses(gen, disc, anchors: AnchorSet, target_batch, rng: np.random.Generator,
                               batch_size: int | None = None, literal: bool = False):
    """Evaluate both sides of the anchor/patch adversarial objective once.

    Draws one anchor batch for the image head and one full-prior batch for the
    patch head, each of ``batch_size`` (default: the real batch size).
    Returns ``(generator_parts, discriminator_parts)``.
    """
    real = _as_tensor(target_batch).to(next(disc.parameters()).dtype)
    if real.shape[0] < 1:
        raise ValueError("target batch must be non-empty")
    n = batch_size or real.shape[0]
    z_img = sample_anchor(anchors, n, rng)
    z_patch = sample_prior(gen.latent_spec, n, rng)
    d_parts = discriminator_parts(gen, disc, z_img, z_patch, real, literal=literal)
    g_parts = generator_parts(gen, disc, z_img, z_patch, literal=literal)
    return g_parts, d_parts


def _scalar(x) -> float:
    return x.item() if isinstance(x, torch.Tensor) else float(x)


def total_generator_loss(parts, dist, lam) -> LossReport:
    lam = float(lam)
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    img, patch = (_scalar(p) for p in parts)
    dist = _scalar(dist)
    return LossReport(img, patch, dist, img + patch + lam * dist, lam)
