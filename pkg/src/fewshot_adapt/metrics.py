"""Evaluation metrics over pluggable, fixed feature extractors.

Every extractor turns an image batch into flat vectors whose squared
Euclidean distance *is* the perceptual distance, so pairwise work reduces to
plain vector arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "FeatureExtractor",
    "ClusterAssignment",
    "DiversityResult",
    "perceptual_distance",
    "pairwise_distances",
    "intra_cluster_diversity",
    "density_coverage",
    "feature_statistics",
    "frechet_distance",
]

KINDS = ("pixel", "fixed_random_conv", "external_perceptual")


def _unit_normalize(feat: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    """Normalise each spatial position's channel vector to unit length."""
    norm = np.sqrt((feat ** 2).sum(axis=1, keepdims=True))
    return feat / (norm + eps)


@dataclass
class FeatureExtractor:
    """Deterministic image -> feature-vector map.

    ``pixel``: raw pixels, distance = mean squared difference over all values.
    ``fixed_random_conv``: a seeded, never-trained two-layer conv stack; each
    layer is channel-normalised and contributes the spatial mean of the
    channel-summed squared difference.
    ``external_perceptual``: ``layers_fn(images) -> list of (N, C, H, W)``
    arrays from some pretrained network, treated like the conv kind.
    """

    kind: str = "fixed_random_conv"
    seed: int = 0
    widths: tuple = (16, 32)
    normalization: bool | None = None
    layers_fn: Callable | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown extractor kind {self.kind!r}; choose from {KINDS}")
        if self.kind == "external_perceptual" and self.layers_fn is None:
            raise ValueError("external_perceptual extractor needs a layers_fn")
        if self.normalization is None:
            self.normalization = self.kind != "pixel"
        self._weights = {}
        self.feature_dim = None

    def _conv_weights(self, in_ch):
        if in_ch not in self._weights:
            rng = np.random.default_rng(self.seed)
            ws, c = [], in_ch
            for w in self.widths:
                ws.append(torch.from_numpy(rng.standard_normal((w, c, 3, 3)) / np.sqrt(9 * c)))
                c = w
            self._weights[in_ch] = ws
        return self._weights[in_ch]

    def layers(self, images: np.ndarray) -> list[np.ndarray]:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got shape {x.shape}")
        if self.kind == "pixel":
            return [x]
        if self.kind == "external_perceptual":
            return [np.asarray(f, dtype=np.float64) for f in self.layers_fn(x)]
        out, h = [], torch.from_numpy(x)
        with torch.no_grad():
            for w in self._conv_weights(x.shape[1]):
                h = F.leaky_relu(F.conv2d(h, w, stride=2, padding=1), 0.2)
                out.append(h.numpy())
        return out

    def __call__(self, images, batch: int = 256) -> np.ndarray:
        """Flat ``(N, D)`` features; squared distance between rows = perceptual distance."""
        images = np.asarray(images)
        chunks = []
        for i in range(0, len(images), batch):
            parts = []
            for f in self.layers(images[i:i + batch]):
                if self.normalization:
                    f = _unit_normalize(f)
                    scale = f.shape[2] * f.shape[3]
                else:
                    scale = f[0].size
                parts.append(f.reshape(len(f), -1) / np.sqrt(scale))
            chunks.append(np.concatenate(parts, axis=1))
        feats = np.concatenate(chunks)
        self.feature_dim = feats.shape[1]
        return feats


def perceptual_distance(a, b, fx: FeatureExtractor) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    fa, fb = fx(np.stack([a, b]))
    return float(((fa - fb) ** 2).sum())


def pairwise_distances(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """Squared distances between feature rows by direct differencing (no Gram-trick rounding)."""
    out = np.empty((len(fa), len(fb)))
    for i, row in enumerate(fa):
        out[i] = ((fb - row) ** 2).sum(axis=1)
    return out


@dataclass
class ClusterAssignment:
    assignments: np.ndarray      # generated index -> training index
    distances: np.ndarray        # distance to the assigned training image
    k: int

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)

    @property
    def excluded_clusters(self) -> int:
        """Clusters with fewer than two members; they carry no pairwise score."""
        return int((self.sizes < 2).sum())


class DiversityResult(NamedTuple):
    score: float
    per_cluster: np.ndarray      # NaN where the cluster has < 2 members
    assignment: ClusterAssignment


def _mean_pairwise(feats: np.ndarray) -> float:
    total, count = 0.0, 0
    for i in range(len(feats) - 1):
        d = ((feats[i + 1:] - feats[i]) ** 2).sum(axis=1)
        total += d.sum()
        count += len(d)
    return total / count


def intra_cluster_diversity(generated, training, fx: FeatureExtractor | None = None) -> DiversityResult:
    """Assign each generation to its nearest training image, then average the
    mean pairwise distance (over pairs ``i < j``) within each cluster.

    Clusters with fewer than two members are left out of the average; if no
    cluster qualifies the score is 0.
    """
    fx = fx or FeatureExtractor()
    generated, training = np.asarray(generated), np.asarray(training)
    if len(generated) < 1 or len(training) < 1:
        raise ValueError("need at least one generated and one training image")
    fg, ft = fx(generated), fx(training)
    d = pairwise_distances(fg, ft)
    assign = d.argmin(axis=1)
    ca = ClusterAssignment(assign, d[np.arange(len(fg)), assign], len(training))
    per = np.full(len(training), np.nan)
    for c in range(len(training)):
        members = fg[assign == c]
        if len(members) >= 2:
            per[c] = _mean_pairwise(members)
    valid = per[~np.isnan(per)]
    score = float(valid.mean()) if len(valid) else 0.0
    return DiversityResult(score, per, ca)


def _euclid(a, b):
    return np.sqrt(pairwise_distances(a, b))


def density_coverage(real_feats, fake_feats, nearest_k: int = 1) -> tuple[float, float]:
    """Neighbourhood-ball density and coverage.

    Each real sample's ball has radius equal to the distance to its
    ``nearest_k``-th nearest other real sample; membership is strict
    (``distance < radius``).
    """
    real = np.asarray(real_feats, dtype=np.float64)
    fake = np.asarray(fake_feats, dtype=np.float64)
    if real.ndim == 1:
        real = real[:, None]
    if fake.ndim == 1:
        fake = fake[:, None]
    if len(real) < nearest_k + 1:
        raise ValueError(f"need at least {nearest_k + 1} real samples, got {len(real)}")
    if len(fake) < 1:
        raise ValueError("need at least one fake sample")
    rr = _euclid(real, real)
    np.fill_diagonal(rr, np.inf)
    radii = np.sort(rr, axis=1)[:, nearest_k - 1]
    inside = _euclid(real, fake) < radii[:, None]        # (n_real, n_fake)
    density = inside.sum() / (nearest_k * len(fake))
    coverage = inside.any(axis=1).mean()
    return float(density), float(coverage)


def feature_statistics(feats) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(feats, dtype=np.float64)
    return feats.mean(axis=0), np.atleast_2d(np.cov(feats, rowvar=False))


def _psd_sqrt(m: np.ndarray, tol: float) -> np.ndarray:
    m = (m + m.T) / 2
    w, v = np.linalg.eigh(m)
    if w.min() < -tol * max(1.0, abs(w).max()):
        raise FloatingPointError(f"matrix is not positive semidefinite (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(mean_a, cov_a, mean_b, cov_b, tol: float = 1e-8) -> float:
    """Squared Fréchet distance between two Gaussians.

    The cross term uses ``tr((A^1/2 B A^1/2)^1/2)``, which equals
    ``tr((AB)^1/2)`` and only needs symmetric square roots.
    """
    mu_a, mu_b = np.atleast_1d(np.asarray(mean_a, float)), np.atleast_1d(np.asarray(mean_b, float))
    ca, cb = np.atleast_2d(np.asarray(cov_a, float)), np.atleast_2d(np.asarray(cov_b, float))
    if mu_a.shape != mu_b.shape or ca.shape != cb.shape or ca.shape != (len(mu_a), len(mu_a)):
        raise ValueError("mean/covariance dimensions do not match")
    for c in (ca, cb):
        if not np.allclose(c, c.T, atol=tol * max(1.0, np.abs(c).max())):
            raise ValueError("covariance matrices must be symmetric")
    sa = _psd_sqrt(ca, tol)
    _psd_sqrt(cb, tol)
    cross = _psd_sqrt(sa @ cb @ sa, tol)
    diff = mu_a - mu_b
    val = diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * np.trace(cross)
    return float(max(val, 0.0))
