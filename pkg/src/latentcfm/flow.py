"""Probability paths, endpoint couplings, the vector-field network and CFM losses.

Training uses the linear path ``x_t = t x1 + (1 - t) x0 + sigma * eps`` whose
conditional target is ``u = x1 - x0``.  A latent code ``f`` (a VAE draw or a
one-hot cluster id) enters the network through a bias-free linear embedding
added to the first hidden pre-activation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .latent.gmm import GaussianMixture, gmm_assign
from .latent.vae import LatentEncoder, kl_to_standard_normal
from .nn import MLP, MlpConfig, Module, Tensor
from .nn import autograd as ad
from .nn.autograd import ShapeError


class ContractError(ValueError):
    pass


@dataclass
class PathConfig:
    sigma: float = 0.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ContractError("path noise sigma must be nonnegative")


def _time_column(t, n):
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        t = np.full(n, float(t))
    t = t.reshape(-1)
    if len(t) != n:
        raise ShapeError(f"expected {n} times, got {len(t)}")
    return t


def sample_path_point(x0, x1, t, sigma=0.0, eps=None):
    """``x_t = t x1 + (1 - t) x0 + sigma * eps`` row-wise."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    if x0.shape != x1.shape:
        raise ShapeError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    t = _time_column(t, len(x0))
    if np.any(t < 0) or np.any(t > 1):
        raise ContractError("t must lie in [0, 1]")
    xt = t[:, None] * x1 + (1.0 - t[:, None]) * x0
    if sigma:
        if eps is None:
            raise ContractError("sigma > 0 needs the noise draw eps")
        xt = xt + sigma * np.asarray(eps, dtype=float)
    return xt


def target_vector_field(x0, x1):
    """Conditional target ``u = x1 - x0`` (independent of t)."""
    x0, x1 = np.asarray(x0, dtype=float), np.asarray(x1, dtype=float)
    if x0.shape != x1.shape:
        raise ShapeError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    return x1 - x0


def gaussian_path_field(x, mu_t, dmu_t, sigma_t, dsigma_t):
    """Field generating ``N(mu_t, sigma_t^2 I)``: ``(sigma_t'/sigma_t)(x - mu_t) + mu_t'``."""
    return (dsigma_t / sigma_t) * (np.asarray(x, dtype=float) - mu_t) + dmu_t


# -- couplings -------------------------------------------------------------------
INDEPENDENT, MINIBATCH_OT, LATENT = "independent", "minibatch_ot", "latent"


@dataclass
class Coupling:
    kind: str = INDEPENDENT
    encoder: LatentEncoder | None = None
    mixture: GaussianMixture | None = None

    def __post_init__(self):
        if self.kind not in (INDEPENDENT, MINIBATCH_OT, LATENT):
            raise ContractError(f"unknown coupling kind {self.kind!r}")
        if self.kind == LATENT and (self.encoder is None) == (self.mixture is None):
            raise ContractError("latent coupling needs exactly one of encoder / mixture")


def ot_pairing(x0, x1):
    """Permutation ``pi`` minimising ``sum |x0_i - x1_pi(i)|^2`` (exact assignment)."""
    diff = x0[:, None, :] - x1[None, :, :]
    cost = np.einsum("ijk,ijk->ij", diff, diff)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(x0), dtype=int)
    perm[rows] = cols
    return perm


def couple(coupling: Coupling, x0, x1, rng=None):
    """Pair a source batch with a data batch.

    Returns a dict with ``x0``, ``x1`` (re-ordered for minibatch OT) and, for
    latent couplings, ``f`` (reparameterised encoder draw, with the noise
    ``f_eps`` used) or ``c`` (cluster ids).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    if len(x0) != len(x1):
        raise ContractError(f"batch sizes differ: {len(x0)} vs {len(x1)}")
    out = {"x0": x0, "x1": x1}
    if coupling.kind == MINIBATCH_OT:
        out["x1"] = x1[ot_pairing(x0, x1)]
    elif coupling.kind == LATENT:
        if coupling.mixture is not None:
            out["c"] = gmm_assign(coupling.mixture, x1)
        else:
            rng = np.random.default_rng() if rng is None else rng
            mu, logsig = coupling.encoder.predict(x1)
            eps = rng.standard_normal(mu.shape)
            out["f_eps"] = eps
            out["f"] = mu + np.exp(logsig) * eps
    return out


@dataclass
class CfmBatch:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    xt: np.ndarray
    u: np.ndarray
    eps: np.ndarray | None = None      # path noise
    f_eps: np.ndarray | None = None    # reparameterisation noise for the latent
    c: np.ndarray | None = None        # cluster ids


def make_batch(x0, x1, t, sigma=0.0, eps=None, f_eps=None, c=None):
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    t = _time_column(t, len(x0))
    if sigma and eps is None:
        raise ContractError("sigma > 0 needs the noise draw eps")
    xt = sample_path_point(x0, x1, t, sigma, eps)
    return CfmBatch(x0, x1, t, xt, target_vector_field(x0, x1), eps, f_eps, c)


# -- network -----------------------------------------------------------------------
class VectorFieldNet(Module):
    """``v(x, t, cond)``: MLP on ``[x, t]`` plus ``cond @ W_emb`` on the first layer."""

    def __init__(self, dim, cond_dim=0, hidden_dims=(64, 64, 64), rng=None, activation="selu"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.dim, self.cond_dim = int(dim), int(cond_dim)
        self.mlp = MLP(MlpConfig(dim + 1, list(hidden_dims), dim, activation), rng)
        self.embed = None
        if cond_dim:
            bound = 1.0 / np.sqrt(cond_dim)
            self.embed = Tensor(rng.uniform(-bound, bound, (cond_dim, hidden_dims[0])),
                                requires_grad=True)

    def _inputs(self, x, t):
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"expected (n, {self.dim}) states, got {x.shape}")
        return np.concatenate([x, _time_column(t, len(x))[:, None]], axis=1)

    def _check_cond(self, cond, n):
        if self.cond_dim == 0:
            if cond is not None:
                raise ShapeError("this network takes no conditioning input")
            return None
        if cond is None:
            raise ShapeError(f"conditioning input of width {self.cond_dim} required")
        shape = cond.shape
        if len(shape) != 2 or shape[0] != n or shape[1] != self.cond_dim:
            raise ShapeError(f"expected ({n}, {self.cond_dim}) conditioning, got {shape}")
        return cond

    def __call__(self, x, t, cond=None):
        """Graph-recording forward pass; ``cond`` may be a tensor (to train an encoder)."""
        inp = self._inputs(x, t)
        cond = self._check_cond(cond, len(inp))
        offset = None if cond is None else ad.as_tensor(cond) @ self.embed
        return self.mlp(inp, first_offset=offset)

    def predict(self, x, t, cond=None):
        inp = self._inputs(x, t)
        cond = self._check_cond(None if cond is None else np.asarray(cond, float), len(inp))
        offset = None if cond is None else cond @ self.embed.data
        return self.mlp.predict(inp, first_offset=offset)


def one_hot(ids, M):
    ids = np.asarray(ids, dtype=int)
    out = np.zeros((len(ids), M))
    out[np.arange(len(ids)), ids] = 1.0
    return out


# -- losses ------------------------------------------------------------------------
def _sq_error(v, u):
    diff = v - Tensor(u)
    return ad.mean(ad.sum_(diff * diff, axis=-1))


def cfm_loss(net, batch: CfmBatch, cond=None):
    """``mean_i |v(x_t, t) - u|^2`` (squared norm summed over coordinates)."""
    loss = _sq_error(net(batch.xt, batch.t, cond), batch.u)
    if not loss.is_finite():
        raise FloatingPointError("CFM loss is not finite")
    return loss


def latent_cfm_loss(net, enc, batch: CfmBatch, beta=0.0, enc_input=None):
    """Flow-matching error with a reparameterised latent plus ``beta * KL``.

    The latent is ``f = mu + sigma * batch.f_eps`` with ``(mu, logsig)`` from
    the encoder applied to ``x1`` (or to ``enc_input`` for time-dependent
    encoders), so gradients reach the trainable encoder parameters.  Returns
    ``(loss, flow_term, kl_term)``; ``beta = 0`` leaves the flow term alone.
    """
    if beta < 0:
        raise ContractError("beta must be nonnegative")
    if batch.f_eps is None:
        raise ContractError("batch carries no reparameterisation noise f_eps")
    mu, logsig = enc(batch.x1 if enc_input is None else enc_input)
    f = mu + ad.exp(logsig) * Tensor(batch.f_eps)
    flow = _sq_error(net(batch.xt, batch.t, f), batch.u)
    kl = ad.mean(kl_to_standard_normal(mu, logsig))
    loss = flow + kl * beta if beta else flow
    if not loss.is_finite():
        raise FloatingPointError("latent CFM loss is not finite")
    return loss, flow, kl
