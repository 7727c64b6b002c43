"""Seeded synthetic stand-in for image-descriptor benchmarks.

Points come from a mixture of anisotropic Gaussians in a low-dimensional
latent space, squashed by ``tanh`` and mapped linearly to ``d`` dimensions,
plus a little isotropic noise. The latent structure spreads across all PQ
subspaces, so subindices are far from independent, as with real descriptors.
The mixture is fixed by ``seed``; ``stream`` selects independent samples from
it (train / base / query splits).
"""

from __future__ import annotations

import numpy as np


def gaussian_mixture(
    n: int,
    d: int = 64,
    seed: int = 0,
    stream: int = 0,
    latent_dim: int = 16,
    components: int = 64,
    spread: float = 0.6,
    noise: float = 0.05,
) -> np.ndarray:
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((latent_dim, d)) / np.sqrt(latent_dim)
    centers = rng.standard_normal((components, latent_dim))
    scales = rng.uniform(0.2, 1.0, (components, latent_dim)) * spread
    weights = rng.dirichlet(np.full(components, 2.0))
    rs = np.random.default_rng([seed, stream + 1])
    label = rs.choice(components, n, p=weights)
    z = centers[label] + rs.standard_normal((n, latent_dim)) * scales[label]
    x = np.tanh(z) @ A + noise * rs.standard_normal((n, d))
    return x.astype(np.float32)


def splits(ntrain: int, nbase: int, nquery: int, d: int = 64, seed: int = 0, **kw) -> dict[str, np.ndarray]:
    return {
        "train": gaussian_mixture(ntrain, d, seed, 1, **kw),
        "base": gaussian_mixture(nbase, d, seed, 2, **kw),
        "query": gaussian_mixture(nquery, d, seed, 3, **kw),
    }
