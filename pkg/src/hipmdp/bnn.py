"""Variational Bayesian neural network transition models.

A factorized Gaussian posterior over the weights of a dense net is fit by
minimizing a Monte-Carlo black-box alpha-divergence energy with tied site
factors:

    E = KL(q || prior)
        - (N / B) * sum_n (1/alpha) * log( (1/K) * sum_k exp(alpha * log p(t_n | x_n, W_k)) )

with Gaussian likelihoods per output dimension,

    log p(t | x, W) = sum_d [ -0.5*log(2*pi*s2_d) - (t_d - pred_d)^2 / (2*s2_d) ],

weights sampled by reparameterization W_k = mean + sqrt(var) * eps_k so
gradients flow to both the posterior mean and the (log-parameterized)
variance, and s2_d = exp(noise_log_variance_d) the learned per-dimension
observation noise. As alpha -> 0 the energy approaches the variational
free energy on the same samples; alpha = 1 gives the EP-like predictive
form.

Three model forms share this machinery:

  embedded -- the latent task vector is part of the network input,
  linear   -- the network emits a (latent_dim x state_dim) basis matrix
              contracted against the latent vector,
  plain    -- no latent conditioning (pooled/average and scratch models).

Every evaluation appends one stochastic scalar input z drawn from
N(0, input_noise_variance). Networks emit *state differences*; states and
deltas live in standardized units defined by the model's Standardizer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nets
from .errors import NumericalError
from .nets import AdamState, NetSpec, adam_step

FORMS = ("embedded", "linear", "plain")


@dataclass(frozen=True)
class Standardizer:
    """Affine state normalization, fit once on pretraining data and frozen."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, states: np.ndarray, floor: float = 1e-8) -> "Standardizer":
        states = np.asarray(states, dtype=np.float64)
        return cls(states.mean(axis=0), np.maximum(states.std(axis=0), floor))

    def encode_state(self, s) -> np.ndarray:
        return (np.asarray(s, dtype=np.float64) - self.mean) / self.std

    def encode_delta(self, d) -> np.ndarray:
        return np.asarray(d, dtype=np.float64) / self.std

    def decode_delta(self, d) -> np.ndarray:
        return np.asarray(d, dtype=np.float64) * self.std


@dataclass(frozen=True)
class BnnSpec:
    """Form and shape of a transition model."""

    form: str
    state_dim: int
    action_count: int
    latent_dim: int
    net: NetSpec
    standardizer: Standardizer

    @property
    def core_width(self) -> int:
        return self.state_dim + self.action_count


def build_bnn_spec(form: str, state_dim: int, action_count: int, hidden,
                   latent_dim: int = 5, standardizer: Standardizer | None = None) -> BnnSpec:
    if form not in FORMS:
        raise ValueError(f"unknown model form {form!r}")
    core = state_dim + action_count
    if form == "embedded":
        n_in, n_out = core + latent_dim + 1, state_dim
    elif form == "linear":
        n_in, n_out = core + 1, latent_dim * state_dim
    else:
        n_in, n_out = core + 1, state_dim
        latent_dim = 0
    net = NetSpec((n_in, *tuple(int(h) for h in hidden), n_out))
    if standardizer is None:
        standardizer = Standardizer.identity(state_dim)
    return BnnSpec(form, state_dim, action_count, latent_dim, net, standardizer)


@dataclass
class WeightPosterior:
    """Diagonal Gaussian over net weights. Variance is stored as
    log-variance so positivity is structural."""

    mean: np.ndarray
    log_variance: np.ndarray
    noise_log_variance: np.ndarray  # per state dimension
    input_noise_variance: float = 1.0

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_variance)

    def copy(self) -> "WeightPosterior":
        return WeightPosterior(
            self.mean.copy(), self.log_variance.copy(),
            self.noise_log_variance.copy(), self.input_noise_variance,
        )


def init_posterior(spec: BnnSpec, rng: np.random.Generator,
                   init_log_variance: float = -10.0,
                   noise_init_variance: float = 0.25,
                   input_noise_variance: float = 1.0) -> WeightPosterior:
    mean = nets.init_gaussian_means(spec.net, rng)
    return WeightPosterior(
        mean=mean,
        log_variance=np.full(spec.net.param_count, init_log_variance),
        noise_log_variance=np.full(spec.state_dim, np.log(noise_init_variance)),
        input_noise_variance=input_noise_variance,
    )


@dataclass(frozen=True)
class PriorSpec:
    """Zero-mean weight prior whose variance grows over pretraining phases:
    tiny at first (strong shrinkage), multiplied by `growth_factor` after
    each of the first `growth_steps` phases, capped at `max_variance`."""

    weight_prior_mean: float = 0.0
    initial_weight_variance: float = float(np.exp(-10.0))
    growth_factor: float = 10.0
    growth_steps: int = 4
    max_variance: float = 1.0
    input_noise_prior_variance: float = 1.0

    def weight_variance(self, phase: int) -> float:
        exponent = min(max(int(phase), 0), self.growth_steps)
        return float(min(self.initial_weight_variance * self.growth_factor ** exponent,
                         self.max_variance))


@dataclass(frozen=True)
class AlphaConfig:
    """Divergence and optimization settings for one BNN update call."""

    alpha: float = 0.5
    mc_samples: int = 10
    epochs: int = 100
    draw_size: int = 160
    minibatch: int = 32
    learning_rate: float = 2.5e-4
    predict_samples: int = 50

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.draw_size % self.minibatch != 0:
            raise ValueError("draw_size must be divisible by minibatch")


def one_hot(action_count: int, action: int) -> np.ndarray:
    if not 0 <= action < action_count:
        raise ValueError(f"action {action} out of range")
    v = np.zeros(action_count)
    v[action] = 1.0
    return v


@dataclass(frozen=True)
class BnnInput:
    """One model input: standardized state, one-hot action, latent vector."""

    state: np.ndarray
    action_one_hot: np.ndarray
    latent: np.ndarray | None = None

    def __post_init__(self):
        onehot = np.asarray(self.action_one_hot, dtype=np.float64)
        if np.count_nonzero(onehot) != 1 or not np.isclose(onehot.sum(), 1.0):
            raise ValueError("action_one_hot must have exactly one 1")

    @property
    def core(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.state, dtype=np.float64),
                               np.asarray(self.action_one_hot, dtype=np.float64)])


def make_input(spec: BnnSpec, state_raw, action: int, latent=None) -> BnnInput:
    return BnnInput(
        state=spec.standardizer.encode_state(state_raw),
        action_one_hot=one_hot(spec.action_count, action),
        latent=None if spec.form == "plain" else np.asarray(latent, dtype=np.float64),
    )


def _assemble(spec: BnnSpec, core: np.ndarray, latents, z: np.ndarray) -> np.ndarray:
    """Stack the network input rows for one weight sample."""
    cols = [core]
    if spec.form == "embedded":
        cols.append(latents)
    cols.append(z[:, None])
    return np.concatenate(cols, axis=1)


def _contract(spec: BnnSpec, out: np.ndarray, latents) -> np.ndarray:
    """Map raw net output to a predicted state delta."""
    if spec.form == "linear":
        basis = out.reshape(out.shape[0], spec.latent_dim, spec.state_dim)
        return np.einsum("bl,bld->bd", latents, basis)
    return out


def _check_latents(spec: BnnSpec, latents, batch: int):
    if spec.form == "plain":
        return None
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim == 1:
        latents = np.broadcast_to(latents, (batch, latents.shape[0]))
    if latents.shape != (batch, spec.latent_dim):
        raise ValueError(f"latents have shape {latents.shape}, "
                         f"expected ({batch}, {spec.latent_dim})")
    return latents


def sample_weights(posterior: WeightPosterior, rng: np.random.Generator, k: int) -> np.ndarray:
    """k reparameterized weight draws, shape (k, param_count)."""
    if k < 1:
        raise ValueError("need at least one sample")
    w, _ = _sample_weights_eps(posterior, rng, k)
    return w


def _sample_weights_eps(posterior, rng, k):
    eps = rng.standard_normal((k, posterior.mean.shape[0]))
    sigma = np.exp(0.5 * posterior.log_variance)
    return posterior.mean + sigma * eps, eps


def _mc_likelihoods(posterior, spec: BnnSpec, core, targets, latents, k, rng):
    """Shared Monte-Carlo plumbing for the energy and its alpha->0 oracle.

    Draw order is fixed (weight eps, then input noise) so that common
    random numbers work across calls with the same seed.
    """
    batch = core.shape[0]
    weights, eps = _sample_weights_eps(posterior, rng, k)
    z = rng.standard_normal((k, batch)) * np.sqrt(posterior.input_noise_variance)
    sigma2 = np.exp(posterior.noise_log_variance)
    const = -0.5 * float(np.sum(np.log(2.0 * np.pi * sigma2)))
    inputs, resids, loglik = [], [], np.empty((k, batch))
    for i in range(k):
        x = _assemble(spec, core, latents, z[i])
        pred = _contract(spec, nets.forward_batch(spec.net, weights[i], x), latents)
        resid = targets - pred
        loglik[i] = const - 0.5 * (resid ** 2 / sigma2).sum(axis=1)
        inputs.append(x)
        resids.append(resid)
    return weights, eps, inputs, resids, loglik, sigma2


def _kl_diag_gaussian(posterior, prior_variance: float, prior_mean: float = 0.0):
    """Closed-form KL(q || prior) for diagonal Gaussians plus its gradients
    with respect to the posterior mean and log-variance."""
    var = posterior.variance
    dm = posterior.mean - prior_mean
    kl = 0.5 * float(
        np.sum(np.log(prior_variance) - posterior.log_variance
               + (var + dm ** 2) / prior_variance - 1.0)
    )
    return kl, dm / prior_variance, 0.5 * (var / prior_variance - 1.0)


@dataclass
class EnergyGrads:
    mean: np.ndarray
    log_variance: np.ndarray
    noise_log_variance: np.ndarray
    latent: np.ndarray | None  # (batch, latent_dim) per-record input gradients


@dataclass
class EnergyResult:
    energy: float
    grads: EnergyGrads
    record_errors: np.ndarray  # per-record mean squared prediction error


def alpha_energy(posterior: WeightPosterior, spec: BnnSpec, prior_variance: float,
                 core_inputs, targets, latents, dataset_size: int,
                 config: AlphaConfig, rng: np.random.Generator) -> EnergyResult:
    """Tied-factor black-box alpha energy and its gradients.

    Gradients cover the posterior mean, log-variance, observation-noise
    log-variance, and the latent input coordinates (per record). The
    minibatch likelihood term is rescaled by dataset_size / batch.
    """
    core = np.asarray(core_inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if core.ndim != 2 or targets.shape != (core.shape[0], spec.state_dim):
        raise ValueError("core_inputs/targets shapes are inconsistent")
    if core.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    batch = core.shape[0]
    latents = _check_latents(spec, latents, batch)
    k, alpha = config.mc_samples, config.alpha

    weights, eps, inputs, resids, loglik, sigma2 = _mc_likelihoods(
        posterior, spec, core, targets, latents, k, rng
    )

    # site term: (1/alpha) * (logsumexp_k(alpha * loglik) - log K) per record
    a = alpha * loglik
    a_max = a.max(axis=0)
    lse = a_max + np.log(np.exp(a - a_max).sum(axis=0))
    site = (lse - np.log(k)) / alpha
    kl, kl_dmean, kl_dlogvar = _kl_diag_gaussian(
        posterior, prior_variance
    )
    scale = dataset_size / batch
    energy = kl - scale * float(site.sum())
    if not np.isfinite(energy):
        raise NumericalError("alpha energy is non-finite (divergent variance or step size)")

    soft = np.exp(a - lse)  # (k, batch), column-stochastic over k
    sigma = np.exp(0.5 * posterior.log_variance)
    g_mean = np.zeros_like(posterior.mean)
    g_logvar = np.zeros_like(posterior.log_variance)
    g_noise = np.zeros(spec.state_dim)
    g_latent = None if spec.form == "plain" else np.zeros((batch, spec.latent_dim))
    for i in range(k):
        resid = resids[i]
        d_pred = -scale * soft[i][:, None] * resid / sigma2
        g_noise += (-scale * soft[i][:, None] * (-0.5 + resid ** 2 / (2.0 * sigma2))).sum(axis=0)
        if spec.form == "linear":
            out_grad = np.einsum("bl,bd->bld", latents, d_pred).reshape(batch, -1)
            basis = nets.forward_batch(spec.net, weights[i], inputs[i]).reshape(
                batch, spec.latent_dim, spec.state_dim
            )
            g_latent += np.einsum("bld,bd->bl", basis, d_pred)
        else:
            out_grad = d_pred
        pgrad, in_grads = nets.backward_batch(spec.net, weights[i], inputs[i], out_grad)
        g_mean += pgrad
        g_logvar += 0.5 * pgrad * eps[i] * sigma
        if spec.form == "embedded":
            g_latent += in_grads[:, spec.core_width : spec.core_width + spec.latent_dim]
    g_mean += kl_dmean
    g_logvar += kl_dlogvar

    record_errors = np.mean([
        (r ** 2).mean(axis=1) for r in resids
    ], axis=0)
    return EnergyResult(energy, EnergyGrads(g_mean, g_logvar, g_noise, g_latent), record_errors)


def variational_free_energy(posterior: WeightPosterior, spec: BnnSpec, prior_variance: float,
                            core_inputs, targets, latents, dataset_size: int,
                            config: AlphaConfig, rng: np.random.Generator) -> float:
    """KL minus the Monte-Carlo expected log-likelihood on the same draws;
    the alpha -> 0 limit of :func:`alpha_energy`."""
    core = np.asarray(core_inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    latents = _check_latents(spec, latents, core.shape[0])
    _, _, _, _, loglik, _ = _mc_likelihoods(
        posterior, spec, core, targets, latents, config.mc_samples, rng
    )
    kl, _, _ = _kl_diag_gaussian(posterior, prior_variance)
    return kl - (dataset_size / core.shape[0]) * float(loglik.mean(axis=0).sum())


@dataclass
class PredictResult:
    mean: np.ndarray
    variance: np.ndarray  # epistemic spread + observation-noise floor
    samples: np.ndarray   # (k, state_dim) raw delta draws


def predict(posterior: WeightPosterior, spec: BnnSpec, binput: BnnInput,
            rng: np.random.Generator, n_samples: int | None = None) -> PredictResult:
    """Predictive distribution of the standardized state difference."""
    if n_samples is None:
        n_samples = 50
    if n_samples < 1:
        raise ValueError("need at least one sample")
    core = binput.core[None, :]
    latents = _check_latents(spec, binput.latent, 1)
    weights, _ = _sample_weights_eps(posterior, rng, n_samples)
    z = rng.standard_normal((n_samples, 1)) * np.sqrt(posterior.input_noise_variance)
    deltas = np.empty((n_samples, spec.state_dim))
    for i in range(n_samples):
        x = _assemble(spec, core, latents, z[i])
        deltas[i] = _contract(spec, nets.forward_batch(spec.net, weights[i], x), latents)[0]
    noise = np.exp(posterior.noise_log_variance)
    return PredictResult(deltas.mean(axis=0), deltas.var(axis=0) + noise, deltas)


def predict_batch_mean(posterior: WeightPosterior, spec: BnnSpec, core_inputs, latents,
                       rng: np.random.Generator, n_samples: int) -> np.ndarray:
    """Monte-Carlo predictive mean of standardized deltas for many inputs."""
    core = np.asarray(core_inputs, dtype=np.float64)
    latents = _check_latents(spec, latents, core.shape[0])
    weights, _ = _sample_weights_eps(posterior, rng, n_samples)
    z = rng.standard_normal((n_samples, core.shape[0])) * np.sqrt(posterior.input_noise_variance)
    acc = np.zeros((core.shape[0], spec.state_dim))
    for i in range(n_samples):
        x = _assemble(spec, core, latents, z[i])
        acc += _contract(spec, nets.forward_batch(spec.net, weights[i], x), latents)
    return acc / n_samples


def sample_delta(posterior: WeightPosterior, spec: BnnSpec, binput: BnnInput,
                 rng: np.random.Generator, observation_noise: bool = True) -> np.ndarray:
    """One generative draw of the standardized delta (single weight sample,
    input-noise draw, and optionally observation noise); used for rollouts."""
    core = binput.core[None, :]
    latents = _check_latents(spec, binput.latent, 1)
    weights, _ = _sample_weights_eps(posterior, rng, 1)
    z = rng.standard_normal((1, 1)) * np.sqrt(posterior.input_noise_variance)
    x = _assemble(spec, core, latents, z[0])
    delta = _contract(spec, nets.forward_batch(spec.net, weights[0], x), latents)[0]
    if observation_noise:
        delta = delta + rng.standard_normal(spec.state_dim) * np.exp(
            0.5 * posterior.noise_log_variance
        )
    return delta


def batch_from_records(spec: BnnSpec, records, latent_lookup):
    """Training arrays (core inputs, standardized target deltas, latents)
    from replay records; latents resolve to each instance's *current*
    embedding at call time."""
    std = spec.standardizer
    core = np.empty((len(records), spec.core_width))
    targets = np.empty((len(records), spec.state_dim))
    for i, r in enumerate(records):
        core[i, : spec.state_dim] = std.encode_state(r.state)
        core[i, spec.state_dim :] = 0.0
        core[i, spec.state_dim + r.action] = 1.0
        targets[i] = std.encode_delta(np.asarray(r.next_state) - np.asarray(r.state))
    if spec.form == "plain" or latent_lookup is None:
        return core, targets, None
    latents = np.stack([np.asarray(latent_lookup(r.instance_id)) for r in records])
    return core, targets, latents


def train_bnn(posterior: WeightPosterior, spec: BnnSpec, prior_variance: float,
              buffer, latent_lookup, config: AlphaConfig, rng: np.random.Generator,
              dataset_size: int | None = None) -> WeightPosterior:
    """Fit (mean, log-variance, noise) by Adam on the alpha energy.

    Per epoch: draw `draw_size` transitions with squared-error
    prioritization, split into minibatches, one Adam step each; refresh
    the priorities of sampled records with their current squared error.
    Latent vectors enter as inputs only and are never modified.
    """
    if len(buffer) == 0:
        raise ValueError("buffer must be non-empty")
    n_total = dataset_size if dataset_size is not None else len(buffer)
    post = posterior.copy()
    p = post.mean.shape[0]
    vec = np.concatenate([post.mean, post.log_variance, post.noise_log_variance])
    adam = AdamState.init(vec.shape[0], config.learning_rate)
    per_epoch = config.draw_size // config.minibatch
    for _ in range(config.epochs):
        records, _, idx = buffer.sample(config.draw_size, rng)
        core, targets, latents = batch_from_records(spec, records, latent_lookup)
        errors = np.empty(config.draw_size)
        for j in range(per_epoch):
            sl = slice(j * config.minibatch, (j + 1) * config.minibatch)
            result = alpha_energy(
                post, spec, prior_variance, core[sl], targets[sl],
                None if latents is None else latents[sl],
                n_total, config, rng,
            )
            g = result.grads
            vec, adam = adam_step(
                adam, vec, np.concatenate([g.mean, g.log_variance, g.noise_log_variance])
            )
            post.mean = vec[:p]
            post.log_variance = vec[p : 2 * p]
            post.noise_log_variance = vec[2 * p :]
            errors[sl] = result.record_errors
        buffer.update_priorities(idx, errors)
    return post


def save_posterior(base, spec: BnnSpec, posterior: WeightPosterior) -> None:
    """JSON header (form, dims, standardization, noise) plus a binary
    sidecar holding mean and log-variance; bit-exact round trip."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "schema": "bnn-posterior-v1",
        "form": spec.form,
        "state_dim": spec.state_dim,
        "action_count": spec.action_count,
        "latent_dim": spec.latent_dim,
        "layer_widths": list(spec.net.layer_widths),
        "standardizer_mean": [float(v) for v in spec.standardizer.mean],
        "standardizer_std": [float(v) for v in spec.standardizer.std],
        "noise_log_variance": [float(v) for v in posterior.noise_log_variance],
        "input_noise_variance": float(posterior.input_noise_variance),
        "count": int(posterior.mean.shape[0]),
    }
    Path(str(base) + ".json").write_text(json.dumps(header, indent=2, sort_keys=True))
    np.concatenate([posterior.mean, posterior.log_variance]).astype("<f8").tofile(
        str(base) + ".bin"
    )


def load_posterior(base):
    header = json.loads(Path(str(base) + ".json").read_text())
    std = Standardizer(np.array(header["standardizer_mean"]),
                       np.array(header["standardizer_std"]))
    spec = BnnSpec(
        form=header["form"],
        state_dim=header["state_dim"],
        action_count=header["action_count"],
        latent_dim=header["latent_dim"],
        net=NetSpec(tuple(header["layer_widths"])),
        standardizer=std,
    )
    raw = np.fromfile(str(base) + ".bin", dtype="<f8").astype(np.float64)
    count = header["count"]
    if raw.shape != (2 * count,) or count != spec.net.param_count:
        raise ValueError(f"corrupt posterior checkpoint at {base}")
    posterior = WeightPosterior(
        mean=raw[:count],
        log_variance=raw[count:],
        noise_log_variance=np.array(header["noise_log_variance"]),
        input_noise_variance=header["input_noise_variance"],
    )
    return spec, posterior
