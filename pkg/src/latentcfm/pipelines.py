"""Training and sampling for I-CFM, OT-CFM, Latent-CFM (VAE / GMM) and VRFM.

A :class:`ModelBundle` holds everything needed to sample: the vector-field
network plus, depending on the method, a finetuned encoder, the fitted
mixture, or a time-dependent encoder.  :func:`train` is resumable: a
checkpoint stores parameters, optimizer moments, the RNG state and metrics,
and resuming reproduces the uninterrupted run bit for bit.
"""
from __future__ import annotations

import copy
import json
import logging
import os
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .flow import (Coupling, INDEPENDENT, LATENT, MINIBATCH_OT, VectorFieldNet, cfm_loss,
                   couple, latent_cfm_loss, make_batch, one_hot)
from .io import config_hash, load_container, save_container
from .latent.gmm import GaussianMixture, GmmConfig, gmm_fit, gmm_sample_ids
from .latent.vae import (LatentEncoder, TrainingError, VaeConfig, VaeModel, encode,
                         finetune_encoder, kl_to_standard_normal, vae_pretrain)
from .metrics import ConvergenceWarning, SinkhornConfig, sinkhorn_divergence
from .nn import Adam, backward
from .solvers import ComposeConfig, SolverConfig, integrate, predictor_corrector

log = logging.getLogger(__name__)

METHODS = ("icfm", "otcfm", "latent-cfm-vae", "latent-cfm-gmm", "vrfm")
VRFM_INPUTS = ("x0x1xtt", "x1t")
_ALIASES = {"i-cfm": "icfm", "ot-cfm": "otcfm", "latentcfm_vae": "latent-cfm-vae",
            "latentcfm_gmm": "latent-cfm-gmm", "vrfm_ablation": "vrfm"}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    method: str = "icfm"
    steps: int = 30000
    batch: int = 128
    lr: float = 2e-4
    beta: float = 0.01
    latent_dim: int = 2
    gmm_components: int = 16
    seed: int = 0
    sigma: float = 0.0
    hidden_dims: list = field(default_factory=lambda: [64, 64, 64])
    eval_every: int = 0              # 0 disables periodic evaluation
    eval_n: int = 10000              # generated and reference points per evaluation
    eval_blur: float = 0.05
    eval_scale: float | None = 1.0   # blur is absolute for unit-square data
    eval_solver: str = "dopri5"
    checkpoint_every: int = 0
    vae_steps: int = 20000
    vae_lr: float = 1e-3
    vae_beta: float | None = None    # pretraining KL weight (defaults to beta)
    vae_hidden: list = field(default_factory=lambda: [64, 64, 64])
    decoder_hidden: list = field(default_factory=lambda: [64])
    gmm_steps: int = 200
    gmm_lr: float = 1e-3
    vrfm_input: str = "x0x1xtt"

    def __post_init__(self):
        self.method = _ALIASES.get(self.method.lower(), self.method.lower())
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.steps < 0 or self.batch < 1 or not self.lr > 0:
            raise ConfigError("steps >= 0, batch >= 1 and lr > 0 required")
        if self.beta < 0 or self.sigma < 0:
            raise ConfigError("beta and sigma must be nonnegative")
        if self.method in ("latent-cfm-vae", "vrfm") and self.latent_dim < 1:
            raise ConfigError("latent methods need latent_dim >= 1")
        if self.method == "latent-cfm-gmm" and self.gmm_components < 1:
            raise ConfigError("GMM method needs gmm_components >= 1")
        if self.vrfm_input not in VRFM_INPUTS:
            raise ConfigError(f"vrfm_input must be one of {VRFM_INPUTS}")
        if self.eval_every < 0 or self.eval_n < 1 or self.checkpoint_every < 0:
            raise ConfigError("eval_every/checkpoint_every >= 0 and eval_n >= 1 required")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**known)


@dataclass
class RunRecord:
    config: dict
    metrics: list = field(default_factory=list)       # (step, metric, value) rows
    losses: list = field(default_factory=list)        # (step, mean loss over window)
    checkpoints: list = field(default_factory=list)
    wall_clock: float = 0.0
    pretrain: dict = field(default_factory=dict)

    def add_metric(self, step, metric, value):
        prev = [s for s, m, _ in self.metrics if m == metric]
        if prev and step <= prev[-1]:
            raise ValueError(f"metric {metric!r} rows must increase in step")
        self.metrics.append((int(step), metric, float(value)))

    def series(self, metric):
        return [(s, v) for s, m, v in self.metrics if m == metric]


@dataclass
class ModelBundle:
    method: str
    net: VectorFieldNet
    config: TrainConfig
    encoder: LatentEncoder | None = None     # finetuned head (VAE) or time-dependent (VRFM)
    vae: VaeModel | None = None
    mixture: GaussianMixture | None = None
    train_data: np.ndarray | None = None     # reused for VAE-conditioned sampling

    @property
    def dim(self):
        return self.net.dim

    def cond_dim(self):
        if self.method in ("latent-cfm-vae", "vrfm"):
            return self.config.latent_dim
        if self.method == "latent-cfm-gmm":
            return self.config.gmm_components
        return 0


# -- construction --------------------------------------------------------------------
def _cond_dim(cfg: TrainConfig):
    if cfg.method in ("latent-cfm-vae", "vrfm"):
        return cfg.latent_dim
    if cfg.method == "latent-cfm-gmm":
        return cfg.gmm_components
    return 0


def _vrfm_input_dim(cfg, d):
    return 3 * d + 1 if cfg.vrfm_input == "x0x1xtt" else d + 1


def build_bundle(cfg: TrainConfig, data, vae=None, mixture=None, record=None):
    """Initialise the network and, when needed, pretrain the feature extractor."""
    data = np.asarray(data, dtype=float)
    d = data.shape[1]
    net = VectorFieldNet(d, _cond_dim(cfg), cfg.hidden_dims, rng=np.random.default_rng([cfg.seed, 0]))
    bundle = ModelBundle(cfg.method, net, cfg)
    if cfg.method == "latent-cfm-vae":
        if vae is None:
            t0 = time.time()
            vcfg = VaeConfig(latent_dim=cfg.latent_dim, hidden_dims=list(cfg.vae_hidden),
                             decoder_hidden=list(cfg.decoder_hidden),
                             beta=cfg.beta if cfg.vae_beta is None else cfg.vae_beta,
                             steps=cfg.vae_steps, batch=cfg.batch, lr=cfg.vae_lr, seed=cfg.seed)
            vae, hist = vae_pretrain(data, vcfg)
            if record is not None:
                record.pretrain = {"kind": "vae", "history": hist, "seconds": time.time() - t0}
        bundle.vae = vae
        bundle.encoder = finetune_encoder(vae)
        bundle.train_data = data
    elif cfg.method == "latent-cfm-gmm":
        if mixture is None:
            t0 = time.time()
            mixture, hist = gmm_fit(data, cfg.gmm_components,
                                    GmmConfig(steps=cfg.gmm_steps, lr=cfg.gmm_lr, seed=cfg.seed))
            if record is not None:
                record.pretrain = {"kind": "gmm", "history": hist, "seconds": time.time() - t0}
        bundle.mixture = mixture
    elif cfg.method == "vrfm":
        bundle.encoder = LatentEncoder(_vrfm_input_dim(cfg, d), cfg.latent_dim, cfg.hidden_dims,
                                       rng=np.random.default_rng([cfg.seed, 3]))
    return bundle


def _trainable(bundle):
    params = [(f"net.{n}", p) for n, p in bundle.net.named_parameters()]
    if bundle.encoder is not None:
        params += [(f"encoder.{n}", p) for n, p in bundle.encoder.named_parameters()]
    return params


def _coupling(bundle):
    if bundle.method == "otcfm":
        return Coupling(MINIBATCH_OT)
    if bundle.method == "latent-cfm-gmm":
        return Coupling(LATENT, mixture=bundle.mixture)
    return Coupling(INDEPENDENT)


def training_step(bundle, data, rng, opt):
    """One optimisation step; returns the scalar loss."""
    cfg = bundle.config
    n, d = data.shape
    x1 = data[rng.integers(0, n, size=cfg.batch)]
    x0 = rng.standard_normal((cfg.batch, d))
    pair = couple(_coupling(bundle), x0, x1, rng)
    t = rng.random(cfg.batch)
    eps = rng.standard_normal((cfg.batch, d)) if cfg.sigma else None
    f_eps = rng.standard_normal((cfg.batch, cfg.latent_dim)) if bundle.method in (
        "latent-cfm-vae", "vrfm") else None
    batch = make_batch(pair["x0"], pair["x1"], t, cfg.sigma, eps, f_eps, pair.get("c"))
    opt.zero_grad()
    if bundle.method == "latent-cfm-vae":
        loss, _, _ = latent_cfm_loss(bundle.net, bundle.encoder, batch, cfg.beta)
    elif bundle.method == "vrfm":
        loss, _, _ = latent_cfm_loss(bundle.net, bundle.encoder, batch, cfg.beta,
                                     enc_input=vrfm_encoder_input(cfg, batch))
    elif bundle.method == "latent-cfm-gmm":
        loss = cfm_loss(bundle.net, batch, one_hot(batch.c, cfg.gmm_components))
    else:
        loss = cfm_loss(bundle.net, batch)
    backward(loss)
    opt.step()
    return loss.item()


def vrfm_encoder_input(cfg, batch):
    if cfg.vrfm_input == "x0x1xtt":
        return np.concatenate([batch.x0, batch.x1, batch.xt, batch.t[:, None]], axis=1)
    return np.concatenate([batch.x1, batch.t[:, None]], axis=1)


# -- checkpoints -------------------------------------------------------------------
def _rng_state_json(rng):
    return json.dumps(rng.bit_generator.state)


def _set_rng_state(rng, text):
    state = json.loads(text)
    rng.bit_generator.state = state


def save_bundle(path, bundle: ModelBundle, step=0, opt=None, rng=None, record=None):
    arrays = {f"net/{k}": v for k, v in bundle.net.state_dict().items()}
    if bundle.encoder is not None:
        arrays.update({f"encoder/{k}": v for k, v in bundle.encoder.state_dict().items()})
    if bundle.vae is not None:
        arrays.update({f"vae/{k}": v for k, v in bundle.vae.state_dict().items()})
    if bundle.mixture is not None:
        arrays.update({f"gmm/{k}": v for k, v in bundle.mixture.to_arrays().items()})
    if bundle.train_data is not None:
        arrays["train_data"] = bundle.train_data
    meta = {"checkpoint_version": "lcfm-ckpt/1", "kind": "bundle", "method": bundle.method,
            "config": bundle.config.to_dict(), "step": int(step), "dim": bundle.dim}
    if opt is not None:
        state, opt_arrays = opt.state_dict()
        meta["optimizer"] = state
        meta["optimizer_names"] = opt.names
        arrays.update({f"opt/{k}": v for k, v in opt_arrays.items()})
    if rng is not None:
        meta["rng_state"] = _rng_state_json(rng)
    if record is not None:
        meta["metrics"] = record.metrics
        meta["losses"] = record.losses
        meta["pretrain_meta"] = {k: v for k, v in record.pretrain.items() if k != "history"}
    save_container(path, meta, arrays)
    return path


def load_bundle(path):
    """Returns ``(bundle, meta, arrays)``."""
    meta, arrays = load_container(path)
    if meta.get("kind") != "bundle":
        raise ValueError(f"{path} is not a model checkpoint")
    cfg = TrainConfig.from_dict(meta["config"])
    d = int(meta["dim"])

    def sub(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    net = VectorFieldNet(d, _cond_dim(cfg), cfg.hidden_dims)
    net.load_state_dict(sub("net/"))
    bundle = ModelBundle(cfg.method, net, cfg)
    if cfg.method == "latent-cfm-vae":
        vae = VaeModel(d, cfg.latent_dim, cfg.vae_hidden, cfg.decoder_hidden)
        vae.load_state_dict(sub("vae/"))
        bundle.vae = vae
        bundle.encoder = finetune_encoder(vae)
        bundle.encoder.load_state_dict(sub("encoder/"))
        bundle.train_data = arrays["train_data"]
    elif cfg.method == "vrfm":
        bundle.encoder = LatentEncoder(_vrfm_input_dim(cfg, d), cfg.latent_dim, cfg.hidden_dims)
        bundle.encoder.load_state_dict(sub("encoder/"))
    elif cfg.method == "latent-cfm-gmm":
        g = sub("gmm/")
        bundle.mixture = GaussianMixture(g["weights"], g["means"], g["variances"])
    return bundle, meta, arrays


# -- training ------------------------------------------------------------------------
def evaluate(bundle, reference, n, seed, solver="dopri5", blur=0.05, scale=1.0):
    """Sinkhorn comparison of ``n`` generated points against ``reference[:n]``.

    Returns ``{"sinkhorn": S, "w2": sqrt(2 S)}``; ``S`` is the debiased entropic
    value for the half squared-distance cost (the figure the common
    ``SamplesLoss("sinkhorn")`` call reports).
    """
    ref = np.asarray(reference, dtype=float)[:n]
    gen = sample(bundle, len(ref), SolverConfig(scheme=solver), seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        s = sinkhorn_divergence(gen, ref, SinkhornConfig(blur=blur, scale=scale))
    for w in caught:
        log.warning("evaluation: %s", w.message)
    return {"sinkhorn": s, "w2": float(np.sqrt(2.0 * max(s, 0.0)))}


def train(cfg: TrainConfig, data, eval_data=None, run_dir=None, resume=None, vae=None,
          mixture=None, stop_at=None, callback=None):
    """Train one model; returns ``(bundle, record)``.

    ``resume`` is a checkpoint path from an earlier call with the same config
    and data.  ``stop_at`` ends the loop early (after that step) while keeping
    the configured horizon, which is how interrupted runs are simulated.
    Checkpoints go to ``run_dir/checkpoints`` every ``checkpoint_every``
    steps and at the end; a non-finite loss aborts with :class:`TrainingError`
    after writing nothing further, the last good checkpoint staying on disk.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or len(data) == 0:
        raise ConfigError("training data must be a nonempty (n, d) array")
    record = RunRecord(cfg.to_dict())
    t_start = time.time()
    if resume is not None:
        bundle, meta, arrays = load_bundle(resume)
        if meta["config"] != cfg.to_dict():
            raise ConfigError("resume checkpoint was written with a different config")
        start = int(meta["step"])
        record.metrics = [tuple(r) for r in meta.get("metrics", [])]
        record.losses = [tuple(r) for r in meta.get("losses", [])]
        record.pretrain = dict(meta.get("pretrain_meta", {}))
    else:
        bundle = build_bundle(cfg, data, vae=vae, mixture=mixture, record=record)
        start = 0
    opt = Adam(_trainable(bundle), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    if resume is not None:
        if meta.get("optimizer_names") != opt.names:
            raise ConfigError("checkpoint optimizer parameters do not match the model")
        opt.load_state_dict(meta["optimizer"],
                            {k[4:]: v for k, v in arrays.items() if k.startswith("opt/")})
        _set_rng_state(rng, meta["rng_state"])
    ckpt_dir = None if run_dir is None else os.path.join(run_dir, "checkpoints")
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)
    trunk_sum = bundle.encoder.trunk_checksum() if cfg.method == "latent-cfm-vae" else None

    def checkpoint(step):
        if ckpt_dir is None:
            return
        path = os.path.join(ckpt_dir, f"step_{step:07d}.lcfm")
        save_bundle(path, bundle, step, opt, rng, record)
        record.checkpoints.append(path)

    end = cfg.steps if stop_at is None else min(cfg.steps, stop_at)
    window = []
    for step in range(start + 1, end + 1):
        try:
            loss = training_step(bundle, data, rng, opt)
        except FloatingPointError as exc:
            raise TrainingError(str(exc), step) from exc
        window.append(loss)
        if step % 100 == 0 or step == end:
            record.losses.append((step, float(np.mean(window))))
            window = []
        if cfg.eval_every and eval_data is not None and step % cfg.eval_every == 0:
            m = evaluate(bundle, eval_data, cfg.eval_n, [cfg.seed, 2, step], cfg.eval_solver,
                         cfg.eval_blur, cfg.eval_scale)
            for k, v in m.items():
                record.add_metric(step, k, v)
            log.info("%s step %d sinkhorn %.5f", cfg.method, step, m["sinkhorn"])
            if callback:
                callback(step, m)
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            checkpoint(step)
    if ckpt_dir and (not record.checkpoints or not record.checkpoints[-1].endswith(f"{end:07d}.lcfm")):
        checkpoint(end)
    if trunk_sum is not None and bundle.encoder.trunk_checksum() != trunk_sum:
        raise TrainingError("frozen encoder trunk changed during training")
    record.wall_clock = time.time() - t_start
    return bundle, record


# -- sampling --------------------------------------------------------------------------
def draw_conditions(bundle, K, rng):
    """Conditioning inputs for ``K`` trajectories (``None`` for baselines)."""
    if bundle.method == "latent-cfm-vae":
        n = len(bundle.train_data)
        idx = rng.choice(n, size=K, replace=K > n)
        _, _, f = encode(bundle.encoder, bundle.train_data[idx], rng)
        return f
    if bundle.method == "latent-cfm-gmm":
        return one_hot(gmm_sample_ids(bundle.mixture, K, rng), bundle.config.gmm_components)
    if bundle.method == "vrfm":
        return rng.standard_normal((K, bundle.config.latent_dim))
    return None


def sample(bundle, K, solver: SolverConfig | None = None, seed=0, cond=None, x0=None,
           return_trajectory=False):
    """Generate ``K`` points by integrating the learned field from N(0, I).

    The latent (or cluster id) of each trajectory is drawn once and held
    fixed; ``cond`` overrides that draw.  VAE models reuse training points:
    ``K`` of them are chosen uniformly without replacement (with replacement
    when ``K`` exceeds the training set).
    """
    solver = solver or SolverConfig()
    rng = np.random.default_rng(seed)
    if x0 is None:
        x0 = rng.standard_normal((K, bundle.dim))
    if cond is None:
        cond = draw_conditions(bundle, K, rng)
    net = bundle.net
    traj = integrate(lambda x, t: net.predict(x, t, cond), x0, solver, record=return_trajectory)
    return traj if return_trajectory else traj.final


def compose_sample(bundle, x1_a, x1_b, K, cfg: ComposeConfig | None = None, seed=0):
    """Predictor-corrector sampling from the product of two feature-conditioned models.

    ``f_a ~ q(.|x1_a)`` and ``f_b ~ q(.|x1_b)`` are drawn per trajectory.  The
    chain starts from the product of the two path marginals at ``t_floor``,
    approximated by ``N(0, (1 - t_floor)^2 / m)``.  ``x1_b=None`` gives the
    single-condition chain.
    """
    if bundle.method != "latent-cfm-vae":
        raise ConfigError("composition needs a VAE-conditioned model")
    cfg = cfg or ComposeConfig()
    rng = np.random.default_rng(seed)
    anchors = [x1_a] if x1_b is None else [x1_a, x1_b]
    conds = []
    for x1 in anchors:
        x1 = np.broadcast_to(np.asarray(x1, dtype=float).reshape(1, -1), (K, bundle.dim))
        conds.append(encode(bundle.encoder, x1, rng)[2])
    m = len(conds)
    x = rng.standard_normal((K, bundle.dim)) * (1.0 - cfg.t_floor) / np.sqrt(m)
    net = bundle.net
    return predictor_corrector(lambda y, t, c: net.predict(y, t, c), conds, x, cfg, rng)


def test_kl(bundle, test_data):
    """Mean ``KL(q(f|x) || N(0, I))`` of the finetuned encoder over ``test_data``."""
    mu, logsig = bundle.encoder.predict(np.asarray(test_data, dtype=float))
    return float(np.mean(kl_to_standard_normal(mu, logsig)))


def sweep_beta(cfg: TrainConfig, data, test_data, betas=(1e-3, 1e-2, 1e-1, 1.0), vae=None):
    """Train the VAE-conditioned model at each ``beta`` from one shared pretrained VAE.

    Returns rows ``{"beta", "test_kl", "final_loss"}``.
    """
    if cfg.method != "latent-cfm-vae":
        raise ConfigError("sweep_beta needs method latent-cfm-vae")
    if vae is None:
        vae = build_bundle(cfg, data).vae
    rows = []
    for beta in betas:
        c = copy.deepcopy(cfg)
        c.beta = float(beta)
        bundle, rec = train(c, data, vae=copy.deepcopy(vae))
        rows.append({"beta": float(beta), "test_kl": test_kl(bundle, test_data),
                     "final_loss": rec.losses[-1][1] if rec.losses else float("nan")})
    return rows


def config_id(cfg: TrainConfig):
    return config_hash(cfg.to_dict())
