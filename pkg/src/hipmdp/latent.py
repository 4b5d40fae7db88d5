"""Per-instance latent embeddings and the model-tuning alternation.

Each task instance carries a low-dimensional vector w that conditions the
shared transition model. On a new instance, w is drawn from a Gaussian
prior, then refined by Adam on the alpha energy with gradients taken only
through the latent input coordinates (the weight posterior stays frozen).
Model tuning alternates latent-first: small updates to w, then small
updates to the network posterior, for a fixed number of rounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bnn
from .nets import AdamState, adam_step


@dataclass
class LatentEmbedding:
    w: np.ndarray
    instance_id: str

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if not np.all(np.isfinite(self.w)):
            raise ValueError("latent embedding must be finite")

    def copy(self) -> "LatentEmbedding":
        return LatentEmbedding(self.w.copy(), self.instance_id)


@dataclass(frozen=True)
class LatentPrior:
    mean: np.ndarray
    variance: np.ndarray  # diagonal covariance

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "variance", np.asarray(self.variance, dtype=np.float64))
        if (self.variance <= 0).any():
            raise ValueError("prior variance must be positive")

    @classmethod
    def default(cls, dim: int = 5, variance: float = 0.1) -> "LatentPrior":
        return cls(np.zeros(dim), np.full(dim, variance))


@dataclass(frozen=True)
class LatentUpdateConfig:
    steps: int = 50
    minibatch: int = 32
    learning_rate: float = 5e-4


def sample_prior(prior: LatentPrior, rng: np.random.Generator,
                 instance_id: str) -> LatentEmbedding:
    w = prior.mean + np.sqrt(prior.variance) * rng.standard_normal(prior.mean.shape[0])
    return LatentEmbedding(w, instance_id)


def update_latent(embedding: LatentEmbedding, posterior: bnn.WeightPosterior,
                  spec: bnn.BnnSpec, prior_variance: float, buffer,
                  alpha_config: bnn.AlphaConfig, config: LatentUpdateConfig,
                  rng: np.random.Generator) -> LatentEmbedding:
    """Adam steps on w against the alpha energy; the posterior is read-only.

    Minibatches come from the instance buffer with squared-error
    prioritization, and sampled records get their priorities refreshed.
    """
    if len(buffer) == 0:
        raise ValueError("instance buffer must be non-empty")
    out = embedding.copy()
    if config.steps == 0:
        return out
    mb = min(config.minibatch, len(buffer))
    adam = AdamState.init(out.w.shape[0], config.learning_rate)
    for _ in range(config.steps):
        records, _, idx = buffer.sample(mb, rng)
        core, targets, _ = bnn.batch_from_records(spec, records, None)
        result = bnn.alpha_energy(
            posterior, spec, prior_variance, core, targets, out.w,
            len(buffer), alpha_config, rng,
        )
        out.w, adam = adam_step(adam, out.w, result.grads.latent.sum(axis=0))
        buffer.update_priorities(idx, result.record_errors)
    return out


def tune_model(embedding: LatentEmbedding | None, posterior: bnn.WeightPosterior,
               spec: bnn.BnnSpec, prior_variance: float, buffer,
               alpha_config: bnn.AlphaConfig, latent_config: LatentUpdateConfig,
               rounds: int, rng: np.random.Generator):
    """Alternate latent-first updates: w from the buffer, then the network
    posterior from the buffer, `rounds` times. Models without a latent
    (pooled/scratch) skip the latent half. Returns (embedding, posterior)."""
    for _ in range(rounds):
        if embedding is not None:
            embedding = update_latent(embedding, posterior, spec, prior_variance,
                                      buffer, alpha_config, latent_config, rng)
            lookup = lambda _id: embedding.w
        else:
            lookup = None
        posterior = bnn.train_bnn(posterior, spec, prior_variance, buffer,
                                  lookup, alpha_config, rng)
    return embedding, posterior
