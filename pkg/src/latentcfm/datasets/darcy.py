"""2-D Darcy flow on the unit square.

Permeability ``K = exp(G)`` with ``G`` a truncated Karhunen-Loeve expansion
of a Gaussian random field with exponential covariance.  The pressure solves
``-div(K grad p) = f_s`` with zero-flux walls and zero spatial mean, on a
cell-centred grid of ``N x N`` cells (spacing ``h = 1/N``) using the
two-point flux stencil with harmonic-mean face permeabilities.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse.linalg
import scipy.spatial


class ConfigError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


@dataclass
class DarcyConfig:
    N: int = 64
    r: float = 10.0
    w: float = 0.125
    kl_terms: int = 16
    grf_mean: float = 0.0
    grf_lengthscale: float = 0.1
    seed: int = 0
    source_side: float | None = None  # side of the +r corner block (defaults to w)
    sink_side: float | None = None    # side of the -r corner block (defaults to w)

    def __post_init__(self):
        if self.N < 8:
            raise ConfigError("grid N must be at least 8")
        if not 0.0 < self.w < 0.5:
            raise ConfigError("source width w must lie in (0, 0.5)")
        if self.kl_terms < 0 or self.kl_terms > self.N ** 2:
            raise ConfigError("kl_terms must be in [0, N^2]")
        if self.grf_lengthscale <= 0:
            raise ConfigError("GRF lengthscale must be positive")

    @property
    def h(self):
        return 1.0 / self.N

    def cell_centers(self):
        return (np.arange(self.N) + 0.5) / self.N


def source_term(cfg: DarcyConfig) -> np.ndarray:
    """+r on the corner block at the origin, -r on the opposite corner block."""
    c = cfg.cell_centers()
    a = cfg.w if cfg.source_side is None else cfg.source_side
    b = cfg.w if cfg.sink_side is None else cfg.sink_side
    near = c <= a
    far = c >= 1.0 - b
    f = np.zeros((cfg.N, cfg.N))
    f[np.ix_(near, near)] = cfg.r
    f[np.ix_(far, far)] = -cfg.r
    return f


@functools.lru_cache(maxsize=8)
def _kl_basis(N, lengthscale, s):
    c = (np.arange(N) + 0.5) / N
    xx, yy = np.meshgrid(c, c, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    dist = scipy.spatial.distance.cdist(pts, pts)
    cov = np.exp(-dist / lengthscale)
    n = N * N
    try:
        if N <= 32:
            vals, vecs = scipy.linalg.eigh(cov, subset_by_index=[n - s, n - 1])
        else:
            vals, vecs = scipy.sparse.linalg.eigsh(cov, k=s, which="LA")
    except (np.linalg.LinAlgError, scipy.sparse.linalg.ArpackError) as exc:
        raise NumericError(f"covariance eigendecomposition failed: {exc}") from exc
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    if np.any(vals <= 0):
        raise NumericError("non-positive leading covariance eigenvalue")
    # continuous-operator normalisation: lambda = eig * h^2, phi = v / h
    lam = vals / n
    phi = vecs * N
    return lam, phi


def kl_eigenpairs(cfg: DarcyConfig):
    """Leading ``kl_terms`` eigenpairs, eigenvalues non-increasing.

    Eigenfunctions are returned as columns of shape ``(N*N, s)`` normalised so
    that ``mean(phi_i**2) == 1`` over the grid.
    """
    if cfg.kl_terms == 0:
        return np.zeros(0), np.zeros((cfg.N * cfg.N, 0))
    lam, phi = _kl_basis(cfg.N, float(cfg.grf_lengthscale), int(cfg.kl_terms))
    return lam.copy(), phi.copy()


def sample_log_permeability(cfg: DarcyConfig, theta) -> np.ndarray:
    """``G = mu + sum_i sqrt(lambda_i) theta_i phi_i`` for a batch of theta rows."""
    theta = np.atleast_2d(theta)
    lam, phi = kl_eigenpairs(cfg)
    g = cfg.grf_mean + (theta * np.sqrt(lam)) @ phi.T
    return g.reshape(-1, cfg.N, cfg.N)


def sample_grf(cfg: DarcyConfig, index=0) -> np.ndarray:
    """Permeability field for sample ``index`` (RNG stream ``(seed, index)``)."""
    theta = np.random.default_rng([cfg.seed, index]).standard_normal(cfg.kl_terms)
    return np.exp(sample_log_permeability(cfg, theta)[0])


# -- finite-volume operator ---------------------------------------------------
def _face_transmissibility(K, h):
    Kx = 2.0 * K[..., 1:, :] * K[..., :-1, :] / (K[..., 1:, :] + K[..., :-1, :])
    Ky = 2.0 * K[..., :, 1:] * K[..., :, :-1] / (K[..., :, 1:] + K[..., :, :-1])
    return Kx / h ** 2, Ky / h ** 2


def apply_operator(p, Tx, Ty):
    """``-div(K grad p)`` with zero-flux walls (flux-form stencil)."""
    out = np.zeros_like(p)
    fx = Tx * (p[..., 1:, :] - p[..., :-1, :])
    fy = Ty * (p[..., :, 1:] - p[..., :, :-1])
    out[..., :-1, :] -= fx
    out[..., 1:, :] += fx
    out[..., :, :-1] -= fy
    out[..., :, 1:] += fy
    return out


def _project(v):
    return v - v.mean(axis=(-2, -1), keepdims=True)


def solve_pressure(K, f, h, tol=1e-10, max_iter=20000):
    """Batched projected conjugate gradient for ``-div(K grad p) = f``.

    Iterates stay in the mean-zero subspace, where the operator is SPD.
    ``K`` and ``f`` are ``(..., N, N)`` arrays (f may broadcast).
    """
    K = np.asarray(K, dtype=float)
    if np.any(K <= 0):
        raise ConfigError("permeability must be positive")
    Tx, Ty = _face_transmissibility(K, h)
    b = _project(np.broadcast_to(f, K.shape).astype(float))
    p = np.zeros_like(b)
    r = b.copy()
    d = r.copy()
    rs = np.sum(r * r, axis=(-2, -1), keepdims=True)
    bnorm = np.sqrt(np.sum(b * b, axis=(-2, -1), keepdims=True))
    bnorm = np.where(bnorm == 0, 1.0, bnorm)
    for it in range(max_iter):
        if np.all(np.sqrt(rs) <= tol * bnorm):
            return _project(p)
        Ad = apply_operator(d, Tx, Ty)
        dAd = np.sum(d * Ad, axis=(-2, -1), keepdims=True)
        active = np.sqrt(rs) > tol * bnorm
        alpha = np.where(active, rs / np.where(dAd == 0, 1.0, dAd), 0.0)
        if np.any(active & (dAd <= 0)):
            raise NumericError("CG breakdown: operator not positive on search direction")
        p = p + alpha * d
        r = _project(r - alpha * Ad)
        rs_new = np.sum(r * r, axis=(-2, -1), keepdims=True)
        beta = np.where(active, rs_new / np.where(rs == 0, 1.0, rs), 0.0)
        d = r + beta * d
        rs = rs_new
    raise NumericError(f"CG did not converge in {max_iter} iterations")


def solve_darcy(K, cfg: DarcyConfig, f=None):
    """Return ``(K, p)`` with ``p`` the mean-zero pressure for this permeability."""
    f = source_term(cfg) if f is None else f
    p = solve_pressure(K, f, cfg.h)
    return K, p


def generate_darcy(cfg: DarcyConfig, n, start=0):
    """``n`` (K, p) pairs, sample ``i`` drawn from RNG stream ``(seed, start+i)``."""
    theta = np.stack([np.random.default_rng([cfg.seed, start + i]).standard_normal(cfg.kl_terms)
                      for i in range(n)]) if n else np.zeros((0, cfg.kl_terms))
    K = np.exp(sample_log_permeability(cfg, theta))
    f = source_term(cfg)
    P = np.empty_like(K)
    for lo in range(0, n, 256):
        P[lo:lo + 256] = solve_pressure(K[lo:lo + 256], f, cfg.h)
    return K, P


# -- standardisation ------------------------------------------------------------
REFERENCE_STATS = {"mu_K": 1.1491, "sigma_K": 7.8154, "mu_p": 0.0, "sigma_p": 0.0823}


def standardize(K, P, stats=None):
    """Per-channel ``(x - mu) / sigma``; returns the (n, 2, N, N) stack and stats."""
    K, P = np.asarray(K, float), np.asarray(P, float)
    if stats is None:
        stats = {"mu_K": float(K.mean()), "sigma_K": float(K.std()),
                 "mu_p": float(P.mean()), "sigma_p": float(P.std())}
    for key in ("sigma_K", "sigma_p"):
        if not stats[key] > 0:
            raise ConfigError(f"{key} is zero: channel is constant")
    x = np.stack([(K - stats["mu_K"]) / stats["sigma_K"], (P - stats["mu_p"]) / stats["sigma_p"]], axis=1)
    return x, dict(stats)


def unstandardize(x, stats):
    x = np.asarray(x, float)
    K = x[:, 0] * stats["sigma_K"] + stats["mu_K"]
    P = x[:, 1] * stats["sigma_p"] + stats["mu_p"]
    return K, P
