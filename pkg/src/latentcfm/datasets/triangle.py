"""Multimodal "triangle" benchmark: a d-fold product of a k-mode 1-d mixture.

Each 1-d mode is a symmetric triangular density of half-width
``mode_width`` centred at ``(j + 0.5) * mode_spacing``; with the defaults the
whole support sits inside the unit interval.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

CHUNK = 4096

# Per-dimension weight vectors for the five density shapes used in benchmarks.
WEIGHT_PRESETS = [
    ([0.25, 0.25, 0.25, 0.25], [0.25, 0.25, 0.25, 0.25]),
    ([0.15, 0.20, 0.30, 0.35], [0.15, 0.20, 0.30, 0.35]),
    ([0.35, 0.15, 0.35, 0.15], [0.25, 0.25, 0.25, 0.25]),
    ([0.20, 0.30, 0.30, 0.20], [0.15, 0.35, 0.15, 0.35]),
    ([0.40, 0.20, 0.20, 0.20], [0.20, 0.20, 0.20, 0.40]),
]


class ConfigError(ValueError):
    pass


@dataclass
class TriangleConfig:
    k: int = 4
    d: int = 2
    weights: list | None = None  # one k-vector per dimension, or a single shared one
    mode_spacing: float = 0.25
    mode_width: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.d < 1:
            raise ConfigError("k and d must be positive")
        if self.mode_spacing <= 0 or self.mode_width <= 0:
            raise ConfigError("mode_spacing and mode_width must be positive")
        self.dim_weights()  # validate early

    @classmethod
    def preset(cls, index, **kw):
        w1, w2 = WEIGHT_PRESETS[index]
        return cls(k=4, d=2, weights=[list(w1), list(w2)], **kw)

    def dim_weights(self):
        if self.weights is None:
            w = np.full((self.d, self.k), 1.0 / self.k)
        else:
            w = np.asarray(self.weights, dtype=float)
            if w.ndim == 1:
                w = np.tile(w, (self.d, 1))
            if w.shape != (self.d, self.k):
                raise ConfigError(f"weights must have shape ({self.d}, {self.k}) or ({self.k},), got {w.shape}")
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-12):
            raise ConfigError("weights must be nonnegative and sum to 1 per dimension")
        return w

    def centers_1d(self):
        return (np.arange(self.k) + 0.5) * self.mode_spacing

    def mode_centers(self):
        """All k**d mode centres, ordered lexicographically by per-dim index."""
        c = self.centers_1d()
        return np.array(list(itertools.product(c, repeat=self.d)))

    def mode_weights(self):
        w = self.dim_weights()
        return np.array([np.prod([w[i, j] for i, j in enumerate(idx)])
                         for idx in itertools.product(range(self.k), repeat=self.d)])

    @property
    def n_modes(self):
        return self.k ** self.d


def _chunk(cfg, w, start, stop, chunk_index):
    rng = np.random.default_rng([cfg.seed, chunk_index])
    m = stop - start
    c = cfg.centers_1d()
    out = np.empty((m, cfg.d))
    for i in range(cfg.d):
        modes = rng.choice(cfg.k, size=m, p=w[i])
        out[:, i] = rng.triangular(c[modes] - cfg.mode_width, c[modes], c[modes] + cfg.mode_width)
    return out


def sample_triangle(cfg: TriangleConfig, n: int) -> np.ndarray:
    """Draw ``n`` points; chunk ``j`` uses the RNG stream ``(seed, j)``."""
    if n <= 0:
        raise ConfigError("n must be positive")
    w = cfg.dim_weights()
    parts = []
    for j, start in enumerate(range(0, n, CHUNK)):
        parts.append(_chunk(cfg, w, start, min(start + CHUNK, n), j))
    return np.concatenate(parts, axis=0)


def triangle_density(cfg: TriangleConfig, x) -> np.ndarray:
    """Ground-truth density at points ``x`` of shape (n, d)."""
    x = np.atleast_2d(x)
    w = cfg.dim_weights()
    c = cfg.centers_1d()
    h = cfg.mode_width
    dens = np.ones(len(x))
    for i in range(cfg.d):
        tri = np.clip(1.0 - np.abs(x[:, i, None] - c[None, :]) / h, 0.0, None) / h
        dens *= tri @ w[i]
    return dens


def in_support(cfg: TriangleConfig, x) -> np.ndarray:
    x = np.atleast_2d(x)
    c = cfg.centers_1d()
    inside = np.abs(x[:, :, None] - c[None, None, :]) <= cfg.mode_width + 1e-12
    return inside.any(axis=2).all(axis=1)


def split_half(x, seed=0):
    """Shuffle and split into equally sized train/test halves."""
    idx = np.random.default_rng(seed).permutation(len(x))
    half = len(x) // 2
    return x[idx[:half]], x[idx[half:]]
