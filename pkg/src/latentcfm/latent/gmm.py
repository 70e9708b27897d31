"""Diagonal-covariance Gaussian mixtures fitted by gradient descent on the NLL.

Weights are a softmax of free logits and variances are ``floor + exp(raw)``,
so every parameter is unconstrained during optimisation.  k-means (or a few EM
sweeps) only provides the starting point.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ..nn import Adam, Tensor
from ..nn import autograd as ad

log = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)


class ComponentCollapseWarning(UserWarning):
    pass


@dataclass
class GaussianMixture:
    weights: np.ndarray    # (M,)
    means: np.ndarray      # (M, d)
    variances: np.ndarray  # (M, d)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
        if self.means.shape != self.variances.shape or len(self.weights) != len(self.means):
            raise ValueError("weights, means and variances disagree on shape")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")

    @property
    def n_components(self):
        return len(self.weights)

    @property
    def dim(self):
        return self.means.shape[1]

    def component_log_pdf(self, x):
        """``log N(x_i; mu_j, diag var_j)``, shape (n, M)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        diff = x[:, None, :] - self.means[None]
        return -0.5 * np.sum(diff ** 2 / self.variances + np.log(self.variances) + LOG2PI, axis=-1)

    def log_density(self, x):
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logsumexp(self.component_log_pdf(x) + logw, axis=1)

    def nll(self, x):
        return float(-np.mean(self.log_density(x)))

    def sample(self, n, rng):
        ids = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[ids] + np.sqrt(self.variances[ids]) * z, ids

    def to_arrays(self):
        return {"weights": self.weights, "means": self.means, "variances": self.variances}


@dataclass
class GmmConfig:
    steps: int = 200
    lr: float = 1e-3
    batch: int | None = None    # None: full batch (minibatch noise undoes the k-means start)
    init: str = "kmeans"        # kmeans | em | random
    n_init: int = 5             # k-means restarts, best distortion kept
    em_iters: int = 20
    var_floor: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.init not in ("kmeans", "em", "random"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.var_floor <= 0:
            raise ValueError("var_floor must be positive")


def _moments(data, labels, M, floor):
    d = data.shape[1]
    w = np.zeros(M)
    mu = np.zeros((M, d))
    var = np.ones((M, d))
    overall = data.var(axis=0) + floor
    for j in range(M):
        pts = data[labels == j]
        w[j] = len(pts)
        if len(pts):
            mu[j] = pts.mean(axis=0)
            var[j] = pts.var(axis=0) if len(pts) > 1 else overall
        else:
            mu[j] = data[j % len(data)]
            var[j] = overall
    w = np.maximum(w, 1.0)
    return w / w.sum(), mu, np.maximum(var, 10 * floor)


def _kmeans_pp(data, M, rng, trials=None):
    """Greedy k-means++ seeding: several candidates per round, keep the best."""
    trials = trials or 2 + int(np.log(M))
    centers = [data[rng.integers(len(data))]]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for _ in range(1, M):
        p = d2 / d2.sum() if d2.sum() > 0 else None
        cand = data[rng.choice(len(data), size=trials, p=p)]
        cand_d2 = np.minimum(d2[None], np.sum((data[None] - cand[:, None]) ** 2, axis=2))
        best = int(np.argmin(cand_d2.sum(axis=1)))
        centers.append(cand[best])
        d2 = cand_d2[best]
    return np.array(centers)


def kmeans(data, M, rng, iters=100):
    """Lloyd iterations from a k-means++ start; returns ``(centers, labels, distortion)``."""
    centers = _kmeans_pp(data, M, rng)
    labels = None
    for _ in range(iters):
        d2 = np.sum((data[:, None, :] - centers[None]) ** 2, axis=2)
        new = np.argmin(d2, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(M):
            pts = data[labels == j]
            if len(pts):
                centers[j] = pts.mean(axis=0)
    dist = float(np.sum((data - centers[labels]) ** 2))
    return centers, labels, dist


def _kmeans_init(data, M, cfg, rng):
    best = None
    for _ in range(max(cfg.n_init, 1)):
        _, labels, dist = kmeans(data, M, rng)
        if best is None or dist < best[0]:
            best = (dist, labels)
    return _moments(data, best[1], M, cfg.var_floor)


def _em(data, g: GaussianMixture, iters, floor):
    for _ in range(iters):
        lp = g.component_log_pdf(data) + np.log(np.maximum(g.weights, 1e-300))
        resp = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
        nk = resp.sum(axis=0) + 1e-12
        mu = resp.T @ data / nk[:, None]
        var = resp.T @ data ** 2 / nk[:, None] - mu ** 2
        g = GaussianMixture(nk / nk.sum(), mu, np.maximum(var, floor))
    return g


def _tensor_nll(x, logits, means, raw, floor):
    var = ad.exp(raw) + floor                                   # (M, d)
    diff = ad.reshape(Tensor(x), (len(x), 1, x.shape[1])) - means
    quad = ad.sum_(diff * diff / var, axis=-1)                  # (n, M)
    logdet = ad.sum_(ad.log(var), axis=-1)                      # (M,)
    comp = (quad + logdet + LOG2PI * x.shape[1]) * -0.5
    return -ad.mean(ad.logsumexp(comp + ad.log_softmax(logits), axis=-1))


def gmm_fit(data, M, cfg: GmmConfig | None = None):
    """Fit an ``M``-component diagonal GMM minimising ``-E log q(x)``.

    Returns ``(mixture, history)``; history holds ``(step, nll)`` rows.  The
    returned parameters are the best seen (never worse than the start).
    """
    cfg = cfg or GmmConfig()
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("data must be a nonempty (n, d) array")
    if M < 1:
        raise ValueError("M must be >= 1")
    if len(data) < M:
        raise ValueError(f"need at least M={M} points, got {len(data)}")
    rng = np.random.default_rng([cfg.seed, 21])
    if cfg.init == "random":
        idx = rng.choice(len(data), M, replace=False)
        g0 = GaussianMixture(np.full(M, 1.0 / M), data[idx],
                             np.tile(data.var(axis=0) + cfg.var_floor, (M, 1)))
    else:
        g0 = GaussianMixture(*_kmeans_init(data, M, cfg, rng))
        if cfg.init == "em":
            g0 = _em(data, g0, cfg.em_iters, cfg.var_floor)

    logits = Tensor(np.log(g0.weights), requires_grad=True)
    means = Tensor(g0.means.copy(), requires_grad=True)
    raw = Tensor(np.log(np.maximum(g0.variances - cfg.var_floor, 1e-300)), requires_grad=True)
    opt = Adam([("logits", logits), ("means", means), ("raw", raw)], lr=cfg.lr)

    def current():
        w = np.exp(logits.data - logsumexp(logits.data))
        return GaussianMixture(w / w.sum(), means.data.copy(), np.exp(raw.data) + cfg.var_floor)

    best_g, best_nll = g0, g0.nll(data)
    history = [(0, best_nll)]
    for step in range(1, cfg.steps + 1):
        x = data if cfg.batch is None else data[rng.integers(0, len(data), cfg.batch)]
        opt.zero_grad()
        loss = _tensor_nll(x, logits, means, raw, cfg.var_floor)
        if not np.isfinite(loss.item()):
            break
        ad.backward(loss)
        opt.step()
        if step % 50 == 0 or step == cfg.steps:
            g = current()
            nll = g.nll(data)
            history.append((step, nll))
            if nll < best_nll:
                best_g, best_nll = g, nll
    if np.any(best_g.variances < 10 * cfg.var_floor):
        warnings.warn("a mixture component collapsed onto the variance floor",
                      ComponentCollapseWarning, stacklevel=2)
    log.debug("gmm fit: nll %.5f -> %.5f", history[0][1], best_nll)
    return best_g, history


def gmm_assign(g: GaussianMixture, x):
    """Cluster id ``argmax_j N(x; mu_j, Sigma_j)`` (mixture weights ignored).

    Ties resolve to the lowest component index.
    """
    return np.argmax(g.component_log_pdf(x), axis=1)


def gmm_sample_ids(g: GaussianMixture, K, seed):
    """``K`` component ids drawn from ``Categorical(weights)``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.choice(g.n_components, size=int(K), p=g.weights)
