"""Gaussian-posterior encoders and a small VAE used as a feature extractor.

The encoder is split into a *trunk* (an MLP mapping data to hidden features)
and a *head* (one linear layer emitting the posterior mean and log standard
deviation).  During flow training the trunk is frozen and only the head is
finetuned, with a KL penalty keeping the posterior close to the prior.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..nn import MLP, Adam, Linear, MlpConfig, Module, Tensor
from ..nn import autograd as ad

log = logging.getLogger(__name__)

LOGSIG_CLAMP = 10.0


class TrainingError(RuntimeError):
    """Raised when a loss turns non-finite; carries the offending step."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


def kl_to_standard_normal(mu, logsig):
    """Per-sample ``KL(N(mu, sigma^2) || N(0, I))`` summed over latent dims.

    Accepts numpy arrays or tensors; for tensors the result records the graph.
    """
    if isinstance(mu, Tensor) or isinstance(logsig, Tensor):
        mu, logsig = ad.as_tensor(mu), ad.as_tensor(logsig)
        var = ad.exp(logsig * 2.0)
        term = mu * mu + var - 1.0 - logsig * 2.0
        return ad.sum_(term, axis=-1) * 0.5
    mu = np.asarray(mu, dtype=float)
    logsig = np.asarray(logsig, dtype=float)
    return 0.5 * np.sum(mu ** 2 + np.exp(2 * logsig) - 1.0 - 2 * logsig, axis=-1)


class LatentEncoder(Module):
    """``x -> (mu, logsig)`` through a trunk MLP and a linear Gaussian head.

    With ``frozen_trunk=True`` the trunk weights are excluded from
    :meth:`named_parameters` (they never receive gradients or optimizer
    updates) and the trunk runs as a plain numpy computation.
    """

    def __init__(self, input_dim, latent_dim=2, hidden_dims=(64, 64, 64), rng=None,
                 activation="selu"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.input_dim, self.latent_dim = int(input_dim), int(latent_dim)
        hidden_dims = list(hidden_dims)
        # features are act(trunk(x)): the trunk's output layer is the last hidden layer
        self.trunk = MLP(MlpConfig(input_dim, hidden_dims[:-1], hidden_dims[-1], activation), rng)
        self.head = Linear(hidden_dims[-1], 2 * latent_dim, rng)
        self._act = ad.ACTIVATIONS[self.trunk.config.activation]
        self._act_np = ad.ACTIVATION_ARRAYS[self.trunk.config.activation]
        self.frozen_trunk = False

    def named_parameters(self, prefix=""):
        if not self.frozen_trunk:
            yield from self.trunk.named_parameters(prefix + "trunk.")
        yield from self.head.named_parameters(prefix + "head.")

    def all_state(self):
        """Every weight including a frozen trunk (for checkpoints)."""
        state = {f"trunk.{k}": v for k, v in self.trunk.state_dict().items()}
        state.update({f"head.{k}": v for k, v in self.head.state_dict().items()})
        return state

    def load_all_state(self, state):
        self.trunk.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("trunk.")})
        self.head.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("head.")})

    # checkpoints always carry the trunk, frozen or not
    state_dict = all_state
    load_state_dict = load_all_state

    def freeze_trunk(self):
        self.frozen_trunk = True
        return self

    def trunk_checksum(self):
        return self.trunk.checksum()

    def _split(self, out):
        k = self.latent_dim
        mu = out[:, :k]
        logsig = ad.clip(out[:, k:], -LOGSIG_CLAMP, LOGSIG_CLAMP)
        return mu, logsig

    def __call__(self, x):
        """Graph-recording forward pass returning ``(mu, logsig)`` tensors."""
        if self.frozen_trunk:
            h = Tensor(self.features(np.asarray(ad.as_tensor(x).data)))
        else:
            h = self._act(self.trunk(x))
        return self._split(self.head(h))

    def features(self, x):
        """Numpy trunk features."""
        return self._act_np(self.trunk.predict(x))

    def predict(self, x):
        """Numpy ``(mu, logsig)``."""
        out = self.head.predict(self.features(x))
        k = self.latent_dim
        return out[:, :k], np.clip(out[:, k:], -LOGSIG_CLAMP, LOGSIG_CLAMP)


def encode(enc: LatentEncoder, x1, rng=None, eps=None):
    """Posterior parameters and a reparameterised draw ``f = mu + sigma * eps``.

    ``eps`` may be supplied directly; otherwise it is drawn from ``rng``.
    Returns numpy arrays ``(mu, logsig, f)``.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    mu, logsig = enc.predict(x1)
    if eps is None:
        rng = np.random.default_rng() if rng is None else rng
        eps = rng.standard_normal(mu.shape)
    eps = np.broadcast_to(np.asarray(eps, dtype=float), mu.shape)
    return mu, logsig, mu + np.exp(logsig) * eps


class VaeModel(Module):
    """Encoder plus a one-hidden-layer decoder with unit-variance Gaussian likelihood."""

    def __init__(self, data_dim, latent_dim=2, hidden_dims=(64, 64, 64), decoder_hidden=(64,),
                 rng=None, activation="selu"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.data_dim, self.latent_dim = int(data_dim), int(latent_dim)
        self.encoder = LatentEncoder(data_dim, latent_dim, hidden_dims, rng, activation)
        self.decoder = MLP(MlpConfig(latent_dim, list(decoder_hidden), data_dim, activation), rng)

    def loss(self, x, eps, beta):
        """Mean negative ELBO (up to a constant) and its two parts.

        Reconstruction is ``0.5 * |x - decoder(f)|^2`` per sample.
        """
        mu, logsig = self.encoder(x)
        f = mu + ad.exp(logsig) * eps
        xhat = self.decoder(f)
        diff = xhat - x
        rec = ad.mean(ad.sum_(diff * diff, axis=-1)) * 0.5
        kl = ad.mean(kl_to_standard_normal(mu, logsig))
        return rec + kl * beta, rec, kl

    def reconstruct(self, x, rng=None, sample=False):
        mu, logsig = self.encoder.predict(x)
        f = mu
        if sample:
            f = mu + np.exp(logsig) * np.random.default_rng(rng).standard_normal(mu.shape)
        return self.decoder.predict(f)


@dataclass
class VaeConfig:
    latent_dim: int = 2
    hidden_dims: list = field(default_factory=lambda: [64, 64, 64])
    decoder_hidden: list = field(default_factory=lambda: [64])
    beta: float = 0.01
    steps: int = 20000
    batch: int = 128
    lr: float = 1e-3
    seed: int = 0
    log_every: int = 500

    def __post_init__(self):
        if self.latent_dim < 1 or self.batch < 1 or self.steps < 0:
            raise ValueError("latent_dim and batch must be positive, steps nonnegative")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")


def vae_pretrain(data, cfg: VaeConfig | None = None, model: VaeModel | None = None):
    """Fit a VAE by minibatch Adam on the negative ELBO.

    Returns ``(model, history)`` where history rows are
    ``(step, loss, reconstruction, kl)`` averaged over the logging window.
    """
    cfg = cfg or VaeConfig()
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("data must be a nonempty (n, d) array")
    rng = np.random.default_rng([cfg.seed, 11])
    if model is None:
        model = VaeModel(data.shape[1], cfg.latent_dim, cfg.hidden_dims, cfg.decoder_hidden,
                         rng=np.random.default_rng([cfg.seed, 10]))
    opt = Adam(model.named_parameters(), lr=cfg.lr)
    history, window = [], []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(data), size=min(cfg.batch, len(data)))
        x = data[idx]
        eps = rng.standard_normal((len(x), cfg.latent_dim))
        opt.zero_grad()
        loss, rec, kl = model.loss(x, eps, cfg.beta)
        if not np.isfinite(loss.item()):
            raise TrainingError("VAE loss is not finite", step)
        ad.backward(loss)
        opt.step()
        window.append((loss.item(), rec.item(), kl.item()))
        if step % cfg.log_every == 0 or step == cfg.steps:
            history.append((step, *np.mean(window, axis=0)))
            window = []
            log.debug("vae step %d loss %.5f", step, history[-1][1])
    return model, history


def finetune_encoder(model: VaeModel, rng=None):
    """Copy of the pretrained encoder with the trunk frozen and a trainable head.

    The head starts from the pretrained head weights.
    """
    cfg = model.encoder.trunk.config
    enc = LatentEncoder(model.encoder.input_dim, model.latent_dim,
                        [*cfg.hidden_dims, cfg.output_dim],
                        np.random.default_rng(0) if rng is None else rng,
                        model.encoder.trunk.config.activation)
    enc.load_all_state(model.encoder.all_state())
    return enc.freeze_trunk()
