"""Sample-quality metrics: Sinkhorn W2, kernel distances, mode coverage and the
Darcy PDE residual."""
from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .datasets.darcy import DarcyConfig, source_term
from .datasets.triangle import TriangleConfig, in_support

log = logging.getLogger(__name__)


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class SinkhornConfig:
    """Settings for the debiased entropic OT estimator.

    The entropic temperature is ``(blur * scale) ** 2``.  ``scale=None`` takes
    the side of the pooled bounding box, so the estimate is equivariant under
    rescaling both clouds; pass ``scale=1.0`` to use ``blur`` as an absolute
    length (the natural choice for data living in the unit square).
    """
    blur: float = 0.05
    scale: float | None = None
    scaling: float = 0.5          # epsilon-annealing ratio for the warm start
    max_iters: int = 5000         # scaling iterations per transport problem
    tol: float = 1e-4             # L1 error of the first marginal
    debias: bool = True
    chunk: int = 4_000_000        # cost-matrix entries materialised at once

    def __post_init__(self):
        if not self.blur > 0:
            raise ValueError("blur must be positive")
        if self.scale is not None and not self.scale > 0:
            raise ValueError("scale must be positive")
        if not 0 < self.scaling < 1:
            raise ValueError("scaling must lie in (0, 1)")
        if self.max_iters < 1 or not self.tol > 0:
            raise ValueError("max_iters must be >= 1 and tol > 0")


def _sqdist_half(x, y):
    xx = np.einsum("ij,ij->i", x, x)[:, None]
    yy = np.einsum("ij,ij->i", y, y)[None, :]
    return np.maximum(0.5 * (xx + yy) - x @ y.T, 0.0)


def _softmin(eps, x, y, h, chunk):
    """``-eps * log sum_j exp(h_j - C(x_i, y_j) / eps)`` for every row i."""
    rows = max(1, chunk // max(len(y), 1))
    out = np.empty(len(x))
    for lo in range(0, len(x), rows):
        z = _sqdist_half(x[lo:lo + rows], y)
        z /= -eps
        z += h[None, :]
        m = z.max(axis=1, keepdims=True)
        z -= m
        np.exp(z, out=z)
        out[lo:lo + rows] = -eps * (np.log(z.sum(axis=1)) + m[:, 0])
    return out


def _eps_schedule(diameter, blur, scaling, p=2):
    eps = [diameter ** p]
    e = p * np.log(diameter)
    stop = p * np.log(blur)
    step = p * np.log(scaling)
    while e + step > stop:
        e += step
        eps.append(np.exp(e))
    eps.append(blur ** p)
    return eps


def _as_cloud(a):
    x = np.asarray(a, dtype=float)
    return x.reshape(len(x), -1)


def data_scale(a, b):
    """Side of the bounding box of the pooled clouds (1.0 if degenerate)."""
    z = np.concatenate([_as_cloud(a), _as_cloud(b)], axis=0)
    side = float(np.max(z.max(0) - z.min(0)))
    return side if side > 0 else 1.0


def _anneal(x, y, schedule, chunk):
    """Log-domain epsilon-scaling with averaged symmetric updates (warm start)."""
    la = np.full(len(x), -np.log(len(x)))
    lb = np.full(len(y), -np.log(len(y)))
    eps = schedule[0]
    f = _softmin(eps, x, y, lb, chunk)
    g = _softmin(eps, y, x, la, chunk)
    for eps in schedule:
        ft = _softmin(eps, x, y, lb + g / eps, chunk)
        gt = _softmin(eps, y, x, la + f / eps, chunk)
        f, g = 0.5 * (f + ft), 0.5 * (g + gt)
    return f, g


def _entropic_ot(x, y, eps, f, g, cfg):
    """Entropic OT value ``<a, f> + <b, g>`` at the target temperature.

    Starting from potentials ``(f, g)`` this runs stabilised Sinkhorn scaling
    on the kernel ``exp((f_i + g_j - C_ij) / eps)``; the scalings are folded
    back into the potentials whenever they grow large.  Returns the value,
    the iteration count and whether the marginal tolerance was met.
    """
    n, m = len(x), len(y)
    a = np.full(n, 1.0 / n)
    b = np.full(m, 1.0 / m)
    C = np.empty((n, m))
    rows = max(1, cfg.chunk // max(m, 1))
    for lo in range(0, n, rows):
        C[lo:lo + rows] = _sqdist_half(x[lo:lo + rows], y)

    def kernel(f, g):
        K = np.subtract(f[:, None], C)
        K += g[None, :]
        K /= eps
        return np.exp(K, out=K)

    K = kernel(f, g)
    u, v = np.ones(n), np.ones(m)
    converged, it = False, 0
    for it in range(1, cfg.max_iters + 1):
        Kv = K @ (b * v)
        u = 1.0 / Kv
        v = 1.0 / (K.T @ (a * u))
        if it % 10 == 0 or it == cfg.max_iters:
            err = np.abs(a * u * (K @ (b * v)) - a).sum()
            if not np.isfinite(err):
                raise FloatingPointError("Sinkhorn scaling overflowed")
            if err < cfg.tol:
                converged = True
                break
        if np.max(np.abs(np.log(u))) > 30 or np.max(np.abs(np.log(v))) > 30:
            f, g = f + eps * np.log(u), g + eps * np.log(v)
            K = kernel(f, g)
            u, v = np.ones(n), np.ones(m)
    f, g = f + eps * np.log(u), g + eps * np.log(v)
    return float(a @ f + b @ g), it, converged


def _canonical_pair(x, y):
    """Order the two clouds deterministically so (a, b) and (b, a) agree bit for bit."""
    kx = (len(x), hashlib.sha256(x.tobytes()).digest())
    ky = (len(y), hashlib.sha256(y.tobytes()).digest())
    return (y, x) if ky < kx else (x, y)


def sinkhorn_divergence(a, b, cfg: SinkhornConfig | None = None, return_info=False):
    """Debiased entropic OT value for the cost ``|x - y|^2 / 2``, uniform weights.

    ``S = OT(a, b) - (OT(a, a) + OT(b, b)) / 2`` (plain ``OT(a, b)`` with
    ``debias=False``).  Each transport problem is warm-started by
    epsilon-annealing and then solved to the marginal tolerance; if
    ``max_iters`` runs out first the result is still returned together with
    a ``ConvergenceWarning``.
    """
    cfg = cfg or SinkhornConfig()
    x, y = _as_cloud(a), _as_cloud(b)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("point clouds must be nonempty")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("point clouds contain non-finite values")
    x, y = _canonical_pair(x, y)
    scale = data_scale(x, y) if cfg.scale is None else float(cfg.scale)
    blur = cfg.blur * scale
    lo = np.minimum(x.min(0), y.min(0))
    hi = np.maximum(x.max(0), y.max(0))
    diameter = max(float(np.linalg.norm(hi - lo)), blur)
    schedule = _eps_schedule(diameter, blur, cfg.scaling)
    eps = schedule[-1]

    problems = [(x, y)] + ([(x, x), (y, y)] if cfg.debias else [])
    values, iters, ok = [], [], True
    for u, w in problems:
        f, g = _anneal(u, w, schedule, cfg.chunk)
        val, it, conv = _entropic_ot(u, w, eps, f, g, cfg)
        values.append(val)
        iters.append(it)
        ok = ok and conv
    if not ok:
        warnings.warn(f"Sinkhorn stopped at max_iters={cfg.max_iters} above tol={cfg.tol} "
                      f"(blur={blur:.3g}, iterations {iters})", ConvergenceWarning, stacklevel=2)
    value = values[0] - 0.5 * (values[1] + values[2]) if cfg.debias else values[0]
    if return_info:
        return value, {"blur": blur, "eps": eps, "stages": len(schedule),
                       "iterations": iters, "converged": ok}
    return value


def sinkhorn_w2(a, b, cfg: SinkhornConfig | None = None):
    """Debiased entropic 2-Wasserstein distance, ``sqrt(2 * S)``.

    ``S`` uses the half squared-distance cost, so for a pure translation by
    ``tau`` this returns ``|tau|``.
    """
    s = sinkhorn_divergence(a, b, cfg)
    return float(np.sqrt(2.0 * max(s, 0.0)))


# -- kernel distances ---------------------------------------------------------
def _pairwise_mean(x, y, fn, chunk=2_000_000):
    rows = max(1, chunk // max(len(y), 1))
    total = 0.0
    for lo in range(0, len(x), rows):
        d = np.sqrt(2.0 * _sqdist_half(x[lo:lo + rows], y))
        total += fn(d).sum()
    return total / (len(x) * len(y))


def median_bandwidth(a, b, max_points=2000, seed=0):
    z = np.concatenate([a, b], axis=0)
    if len(z) > max_points:
        z = z[np.random.default_rng(seed).choice(len(z), max_points, replace=False)]
    d = np.sqrt(2.0 * _sqdist_half(z, z))
    vals = d[np.triu_indices(len(z), k=1)]
    med = float(np.median(vals)) if len(vals) else 1.0
    return med if med > 0 else 1.0


def kernel_distances(a, b, bandwidth=None):
    """Energy distance and Gaussian / Laplacian MMD^2 (V-statistics).

    The energy distance is ``2E|X-Y| - E|X-X'| - E|Y-Y'|``.  Both kernels
    share one bandwidth, by default the median pairwise distance of the
    pooled sample; it is returned under ``"bandwidth"``.
    """
    a = np.asarray(a, float).reshape(len(a), -1)
    b = np.asarray(b, float).reshape(len(b), -1)
    bw = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)

    def dist(fn):
        return _pairwise_mean(a, a, fn) + _pairwise_mean(b, b, fn) - 2 * _pairwise_mean(a, b, fn)

    energy = -dist(lambda d: d)
    gauss = dist(lambda d: np.exp(-d ** 2 / (2 * bw ** 2)))
    lap = dist(lambda d: np.exp(-d / bw))
    return {"energy": max(energy, 0.0), "gaussian_mmd": max(gauss, 0.0),
            "laplacian_mmd": max(lap, 0.0), "bandwidth": bw}


# -- mode coverage ------------------------------------------------------------
def mode_coverage(samples, cfg: TriangleConfig):
    """Assign samples to the nearest triangle mode centre and count."""
    centers = cfg.mode_centers()
    samples = np.asarray(samples, float).reshape(-1, cfg.d)
    counts = np.zeros(len(centers), dtype=int)
    outside = 0.0
    if len(samples):
        nearest = np.argmin(((samples[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        counts = np.bincount(nearest, minlength=len(centers))
        outside = float(np.mean(~in_support(cfg, samples)))
    n = max(len(samples), 1)
    return {"counts": counts, "fractions": counts / n,
            "missing": [int(i) for i in np.flatnonzero(counts == 0)],
            "outside_fraction": outside}


# -- Darcy residual -----------------------------------------------------------
def _d1(a, h, axis):
    return np.gradient(a, h, axis=axis, edge_order=2)


def _d2(a, h, axis):
    """Compact central second difference, one-sided second-order at the frame."""
    a = np.moveaxis(a, axis, -1)
    out = np.empty_like(a)
    out[..., 1:-1] = (a[..., 2:] - 2 * a[..., 1:-1] + a[..., :-2]) / h ** 2
    out[..., 0] = (2 * a[..., 0] - 5 * a[..., 1] + 4 * a[..., 2] - a[..., 3]) / h ** 2
    out[..., -1] = (2 * a[..., -1] - 5 * a[..., -2] + 4 * a[..., -3] - a[..., -4]) / h ** 2
    return np.moveaxis(out, -1, axis)


def residual_field(K, p, cfg: DarcyConfig, f=None):
    """Pointwise ``f_s + K p_xx + K_x p_x + K p_yy + K_y p_y`` (original units)."""
    K = np.asarray(K, float)
    p = np.asarray(p, float)
    if K.shape != p.shape or K.shape[-2:] != (cfg.N, cfg.N):
        raise ValueError(f"expected matching (..., {cfg.N}, {cfg.N}) fields, got {K.shape} and {p.shape}")
    f = source_term(cfg) if f is None else f
    h = cfg.h
    ax1, ax2 = K.ndim - 2, K.ndim - 1
    return (f + K * _d2(p, h, ax1) + _d1(K, h, ax1) * _d1(p, h, ax1)
            + K * _d2(p, h, ax2) + _d1(K, h, ax2) * _d1(p, h, ax2))


def darcy_residual(K, p, cfg: DarcyConfig, f=None):
    """Spatially averaged squared residual per sample: ``(1/N^2) ||R||^2``."""
    r = residual_field(K, p, cfg, f)
    return np.mean(r ** 2, axis=(-2, -1))


def residual_report(K, p, cfg: DarcyConfig):
    R = np.atleast_1d(darcy_residual(K, p, cfg))
    q = np.quantile(R, [0.1, 0.25, 0.5, 0.75, 0.9])
    return {"residuals": R, "median": float(q[2]), "mean": float(R.mean()),
            "q10": float(q[0]), "q25": float(q[1]), "q75": float(q[3]), "q90": float(q[4])}
