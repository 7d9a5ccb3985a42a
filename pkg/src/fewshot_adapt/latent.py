"""Latent prior, anchor regions and the samplers over them.

Every sampler takes an explicit ``numpy.random.Generator``; nothing in this
module touches global random state.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

__all__ = [
    "LatentSpec",
    "AnchorSet",
    "NoiseBatch",
    "create_anchor_set",
    "sample_prior",
    "sample_anchor",
]

DEFAULT_ANCHOR_SIGMA = 0.05


@dataclass(frozen=True)
class LatentSpec:
    dim: int
    prior: Literal["standard_normal"] = "standard_normal"

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"latent dim must be a positive integer, got {self.dim!r}")
        if self.prior != "standard_normal":
            raise ValueError(f"unsupported prior {self.prior!r}")


@dataclass(frozen=True, eq=False)
class AnchorSet:
    """Fixed latent base points plus the per-coordinate perturbation scale.

    ``base_points`` is stored as a read-only ``(k, dim)`` array.
    """

    base_points: np.ndarray
    sigma: float = DEFAULT_ANCHOR_SIGMA
    seed: int = 0

    def __post_init__(self):
        pts = np.array(self.base_points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError(f"base_points must be a non-empty (k, dim) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("base_points must be finite")
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        pts.setflags(write=False)
        object.__setattr__(self, "base_points", pts)
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def k(self) -> int:
        return self.base_points.shape[0]

    @property
    def dim(self) -> int:
        return self.base_points.shape[1]

    def __eq__(self, other):
        if not isinstance(other, AnchorSet):
            return NotImplemented
        return (
            self.sigma == other.sigma
            and self.seed == other.seed
            and np.array_equal(self.base_points, other.base_points)
        )


@dataclass(frozen=True, eq=False)
class NoiseBatch:
    vectors: np.ndarray
    origin: Literal["prior", "anchor"]
    # index of the base point each vector was drawn around (anchor batches only)
    anchor_index: np.ndarray | None = field(default=None)

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"noise vectors must be an (N, dim) array with N >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("noise vectors must be finite")
        if self.origin not in ("prior", "anchor"):
            raise ValueError(f"unknown origin {self.origin!r}")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _check_count(name, n):
    if int(n) != n or n < 1:
        raise ValueError(f"{name} must be a positive integer, got {n!r}")


def create_anchor_set(spec: LatentSpec, k: int, seed: int, sigma: float = DEFAULT_ANCHOR_SIGMA) -> AnchorSet:
    """Draw ``k`` base points i.i.d. from the prior; a pure function of its arguments."""
    _check_count("k", k)
    rng = np.random.default_rng(seed)
    points = rng.standard_normal((int(k), spec.dim))
    return AnchorSet(points, sigma=sigma, seed=int(seed))


def sample_prior(spec: LatentSpec, n: int, rng: np.random.Generator) -> NoiseBatch:
    _check_count("n", n)
    return NoiseBatch(rng.standard_normal((int(n), spec.dim)), origin="prior")


def sample_anchor(anchors: AnchorSet, n: int, rng: np.random.Generator) -> NoiseBatch:
    """Pick a base point uniformly per sample and add ``Normal(0, sigma^2 I)`` noise."""
    _check_count("n", n)
    idx = rng.integers(0, anchors.k, size=int(n))
    eps = rng.standard_normal((int(n), anchors.dim)) * anchors.sigma
    return NoiseBatch(anchors.base_points[idx] + eps, origin="anchor", anchor_index=idx)
