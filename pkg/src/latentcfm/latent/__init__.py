from .gmm import (ComponentCollapseWarning, GaussianMixture, GmmConfig, gmm_assign,
                  gmm_fit, gmm_sample_ids)
from .vae import (LatentEncoder, TrainingError, VaeConfig, VaeModel, encode,
                  finetune_encoder, kl_to_standard_normal, vae_pretrain)

__all__ = [
    "GaussianMixture", "GmmConfig", "gmm_fit", "gmm_assign", "gmm_sample_ids",
    "ComponentCollapseWarning", "LatentEncoder", "VaeModel", "VaeConfig",
    "vae_pretrain", "encode", "finetune_encoder", "kl_to_standard_normal",
    "TrainingError",
]
