"""The transfer-learning procedure, end to end.

Pretraining collects batches of experience from several task instances
(each explored by its own model-free DDQN learner), then fits the shared
transition model and per-instance latent embeddings by alternating tuning
passes. On a new instance, a run draws a fresh latent from the prior and
a fresh policy, takes one exploratory real episode, tunes the model
(latent first, then weights), trains the policy on a large batch of
fictional episodes rolled out from the model, and from then on interleaves
one real episode with one fictional episode, re-tuning whenever the
model's one-step error degrades past a threshold.

Variants:

  embedded   -- latent vector inside the model input (the full method)
  linear     -- model emits a basis matrix contracted with the latent
  scratch    -- fresh model per instance, no pretraining, no latent
  average    -- pretrained pooled model, no latent
  model_free -- DDQN on real transitions only, no model

Real-environment access is funneled through a counting wrapper; fictional
rollouts use the model plus the domain's known reward machinery and can
never touch the counter.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import bnn, dqn, envs, latent
from .config import ExperimentConfig
from .dqn import QNetworkPair
from .errors import ConfigError
from .latent import LatentEmbedding
from .nets import AdamState
from .replay import PrioritizedBuffer, TransitionRecord

FORM_FOR_MODEL = {"embedded": "embedded", "linear": "linear",
                  "average": "plain", "scratch": "plain"}


@dataclass
class EpisodeResult:
    episode: int
    total_reward: float
    steps: int
    wall_ms: int
    model_mse: float  # NaN for the model-free variant
    tuned: bool = False


@dataclass
class PretrainedArtifacts:
    domain: str
    model_key: str  # embedded | linear | average
    spec: bnn.BnnSpec
    posterior: bnn.WeightPosterior
    embeddings: dict[str, LatentEmbedding]
    buffer: PrioritizedBuffer
    instances: list[envs.EnvInstance]


@dataclass
class ModelState:
    spec: bnn.BnnSpec
    posterior: bnn.WeightPosterior
    embedding: LatentEmbedding | None
    baseline_mse: float | None = None


@dataclass
class RunOutcome:
    results: list[EpisodeResult]
    fictional_episodes: int
    real_interactions: int
    tune_count: int
    pair: QNetworkPair
    model: ModelState | None


class RealEnv:
    """Counts every real-environment interaction of a run."""

    def __init__(self, instance: envs.EnvInstance):
        self.instance = instance
        self.interactions = 0

    def reset(self, rng):
        return envs.reset(self.instance, rng)

    def step(self, state, action):
        self.interactions += 1
        return envs.step(self.instance, state, action)


def retune_trigger(episode_mse: float, baseline_mse: float | None,
                   factor: float) -> bool:
    """Model counts as inaccurate when the episode's one-step MSE exceeds
    `factor` times the MSE recorded right after the last tune."""
    if baseline_mse is None:
        return True
    return episode_mse > factor * baseline_mse


def episode_model_mse(model: ModelState, domain: str, transitions,
                      n_samples: int, rng: np.random.Generator) -> float:
    """Mean squared one-step prediction error over an episode's real
    transitions, in scale-normalized raw units (comparable across model
    forms regardless of their internal standardization)."""
    if not transitions:
        return float("nan")
    scale = envs.state_scale(domain)
    core, _, _ = bnn.batch_from_records(model.spec, transitions, None)
    latents = None if model.embedding is None else model.embedding.w
    pred_std = bnn.predict_batch_mean(model.posterior, model.spec, core, latents,
                                      rng, n_samples)
    pred_raw = pred_std * model.spec.standardizer.std
    actual = np.stack([np.asarray(t.next_state) - np.asarray(t.state)
                       for t in transitions])
    return float((((pred_raw - actual) / scale) ** 2).mean())


def scratch_standardizer(domain: str) -> bnn.Standardizer:
    """Deterministic fallback normalization for models with no pretraining
    statistics: zero mean, the domain's fixed magnitude scale."""
    scale = envs.state_scale(domain)
    return bnn.Standardizer(np.zeros(scale.shape[0]), scale)


def _tune(model: ModelState, instance_buffer: PrioritizedBuffer,
          cfg: ExperimentConfig, rng: np.random.Generator) -> ModelState:
    """One TuneModel call: latent-first alternation on the instance data.
    Tuning runs at the relaxed end of the prior schedule."""
    prior_variance = cfg.bnn.prior_spec().weight_variance(cfg.pretrain.passes)
    emb, post = latent.tune_model(
        model.embedding, model.posterior, model.spec, prior_variance,
        instance_buffer, cfg.bnn.alpha_config(), cfg.latent.update_config(),
        rounds=cfg.run.tune_rounds, rng=rng,
    )
    return ModelState(model.spec, post, emb, model.baseline_mse)


def sim_ep(fict_buffer: PrioritizedBuffer, model: ModelState, pair: QNetworkPair,
           adam: AdamState, instance: envs.EnvInstance, cfg: ExperimentConfig,
           epsilon: float, rng: np.random.Generator):
    """One fictional episode rolled out from the transition model.

    Each step: epsilon-greedy action, one generative model draw for the
    next state, known-reward resolution, store; every `update_period`
    steps (t = 0 included) one prioritized policy update plus a soft
    target update. Epsilon decays once per fictional episode.

    Returns (pair, adam, epsilon, steps, policy_updates).
    """
    domain = instance.domain
    scale = envs.state_scale(domain)
    pcfg = cfg.agent.policy_config()
    state = envs.reset(instance, rng)
    updates = 0
    steps = 0
    for t in range(envs.episode_cap(domain)):
        action = dqn.select_action(pair, state / scale, epsilon, rng)
        binput = bnn.make_input(model.spec, state, action,
                                None if model.embedding is None else model.embedding.w)
        if cfg.run.rollout_mode == "mean":
            delta_std = bnn.predict(model.posterior, model.spec, binput, rng,
                                    cfg.bnn.mc_samples).mean
        else:
            delta_std = bnn.sample_delta(model.posterior, model.spec, binput, rng)
        proposed = state + model.spec.standardizer.decode_delta(delta_std)
        if not np.all(np.isfinite(proposed)):
            raise bnn.NumericalError("model rollout produced a non-finite state")
        res = envs.simulate_transition(instance, state, action, proposed)
        fict_buffer.push(TransitionRecord(state / scale, action, res.reward,
                                          res.next_state / scale,
                                          instance.instance_id, done=res.done))
        if t % pcfg.update_period == 0:
            pair, adam, _ = dqn.policy_update(pair, adam, fict_buffer, pcfg, rng)
            pair = dqn.soft_update(pair, pcfg.tau)
            updates += 1
        state = res.next_state
        steps += 1
        if res.done:
            break
    return pair, adam, pcfg.decay(epsilon), steps, updates


def _real_episode(env: RealEnv, pair: QNetworkPair, epsilon: float,
                  cfg: ExperimentConfig, rng: np.random.Generator,
                  sinks: list) -> tuple[list, float, int]:
    """One real episode under the current policy; transitions (raw states)
    are appended to every sink buffer. No policy updates happen here for
    model-based variants."""
    domain = env.instance.domain
    scale = envs.state_scale(domain)
    state = env.reset(rng)
    transitions = []
    total = 0.0
    for _ in range(envs.episode_cap(domain)):
        action = dqn.select_action(pair, state / scale, epsilon, rng)
        res = env.step(state, action)
        rec = TransitionRecord(np.asarray(state, dtype=np.float64).copy(), action,
                               res.reward, res.next_state.copy(),
                               env.instance.instance_id, done=res.done)
        transitions.append(rec)
        for sink in sinks:
            sink.push(TransitionRecord(rec.state.copy(), action, res.reward,
                                       rec.next_state.copy(),
                                       rec.instance_id, done=res.done))
        total += res.reward
        state = res.next_state
        if res.done:
            break
    return transitions, total, len(transitions)


def learn_policy(model: ModelState, instance: envs.EnvInstance,
                 cfg: ExperimentConfig, rng: np.random.Generator,
                 global_buffer: PrioritizedBuffer | None = None) -> RunOutcome:
    """The full procedure on one new instance (model-based variants)."""
    domain = instance.domain
    env = RealEnv(instance)
    pcfg = cfg.agent.policy_config()
    pair = dqn.init_pair(envs.state_dim(domain), envs.action_count(domain),
                         cfg.agent.hidden, rng)
    adam = AdamState.init(pair.spec.param_count, cfg.agent.learning_rate)
    instance_buffer = cfg.replay.make_buffer()
    fict_buffer = cfg.replay.make_buffer()
    epsilon = cfg.agent.epsilon_start
    sinks = [instance_buffer] + ([global_buffer] if global_buffer is not None else [])

    results = []
    fictional = 0
    tunes = 0
    total_steps = 0
    for i in range(cfg.run.n_episodes):
        t0 = time.monotonic()
        transitions, total_reward, steps = _real_episode(env, pair, epsilon, cfg,
                                                         rng, sinks)
        total_steps += steps
        mse = episode_model_mse(model, domain, transitions, cfg.run.mse_samples, rng)
        tuned = False
        if i == 0 or retune_trigger(mse, model.baseline_mse, cfg.run.retune_factor):
            model = _tune(model, instance_buffer, cfg, rng)
            model.baseline_mse = episode_model_mse(model, domain, transitions,
                                              cfg.run.mse_samples, rng)
            tuned = True
            tunes += 1
            for _ in range(cfg.run.n_fictional):
                pair, adam, epsilon, _, _ = sim_ep(fict_buffer, model, pair, adam,
                                                   instance, cfg, epsilon, rng)
                fictional += 1
        pair, adam, epsilon, _, _ = sim_ep(fict_buffer, model, pair, adam,
                                           instance, cfg, epsilon, rng)
        fictional += 1
        wall_ms = int(round((time.monotonic() - t0) * 1000))
        results.append(EpisodeResult(i, total_reward, steps, wall_ms, mse, tuned))
    if env.interactions != total_steps:
        raise AssertionError("real-interaction count diverged from episode steps")
    return RunOutcome(results, fictional, env.interactions, tunes, pair, model)


def run_model_free(instance: envs.EnvInstance, cfg: ExperimentConfig,
                   rng: np.random.Generator,
                   global_buffer: PrioritizedBuffer | None = None) -> RunOutcome:
    """DDQN directly on real transitions: updates every `update_period`
    real steps, epsilon decays per real episode."""
    domain = instance.domain
    scale = envs.state_scale(domain)
    env = RealEnv(instance)
    pcfg = cfg.agent.policy_config()
    pair = dqn.init_pair(envs.state_dim(domain), envs.action_count(domain),
                         cfg.agent.hidden, rng)
    adam = AdamState.init(pair.spec.param_count, cfg.agent.learning_rate)
    td_buffer = cfg.replay.make_buffer()
    epsilon = cfg.agent.epsilon_start
    results = []
    total_steps = 0
    for i in range(cfg.run.n_episodes):
        t0 = time.monotonic()
        state = env.reset(rng)
        total = 0.0
        steps = 0
        for t in range(envs.episode_cap(domain)):
            action = dqn.select_action(pair, state / scale, epsilon, rng)
            res = env.step(state, action)
            td_buffer.push(TransitionRecord(state / scale, action, res.reward,
                                            res.next_state / scale,
                                            instance.instance_id, done=res.done))
            if global_buffer is not None:
                global_buffer.push(TransitionRecord(
                    np.asarray(state, dtype=np.float64).copy(), action, res.reward,
                    res.next_state.copy(), instance.instance_id, done=res.done))
            if t % pcfg.update_period == 0:
                pair, adam, _ = dqn.policy_update(pair, adam, td_buffer, pcfg, rng)
                pair = dqn.soft_update(pair, pcfg.tau)
            total += res.reward
            state = res.next_state
            steps += 1
            if res.done:
                break
        epsilon = pcfg.decay(epsilon)
        total_steps += steps
        wall_ms = int(round((time.monotonic() - t0) * 1000))
        results.append(EpisodeResult(i, total, steps, wall_ms, float("nan")))
    if env.interactions != total_steps:
        raise AssertionError("real-interaction count diverged from episode steps")
    return RunOutcome(results, 0, env.interactions, 0, pair, None)


def init_variant_model(variant: str, artifacts: dict[str, PretrainedArtifacts] | None,
                       domain: str, cfg: ExperimentConfig,
                       rng: np.random.Generator) -> ModelState | None:
    """Fresh per-run model state for a variant. Pretrained posteriors are
    copied (runs never mutate artifacts); embedded/linear draw a fresh
    latent from the prior; scratch builds an untrained model."""
    if variant == "model_free":
        return None
    if variant == "scratch":
        spec = bnn.build_bnn_spec("plain", envs.state_dim(domain),
                                  envs.action_count(domain), cfg.bnn.hidden,
                                  standardizer=scratch_standardizer(domain))
        posterior = bnn.init_posterior(spec, rng, cfg.bnn.init_log_variance,
                                       cfg.bnn.noise_init_variance,
                                       cfg.bnn.input_noise_variance)
        return ModelState(spec, posterior, None)
    if artifacts is None or variant not in artifacts:
        raise ConfigError(f"variant {variant!r} needs a pretrained checkpoint")
    arts = artifacts[variant]
    embedding = None
    if variant in ("embedded", "linear"):
        embedding = latent.sample_prior(cfg.latent.prior(), rng, "new")
    return ModelState(arts.spec, arts.posterior.copy(), embedding)


def run_variant(variant: str, artifacts, instance: envs.EnvInstance,
                cfg: ExperimentConfig, rng: np.random.Generator,
                global_buffer: PrioritizedBuffer | None = None) -> RunOutcome:
    if variant not in ("embedded", "linear", "scratch", "average", "model_free"):
        raise ConfigError(f"unknown variant {variant!r}")
    if variant == "model_free":
        return run_model_free(instance, cfg, rng, global_buffer)
    model = init_variant_model(variant, artifacts, instance.domain, cfg, rng)
    return learn_policy(model, instance, cfg, rng, global_buffer)


def collect_pretraining_data(domain: str, instances, cfg: ExperimentConfig,
                             rng: np.random.Generator):
    """Experience batches from per-instance model-free DDQN learners (no
    designed exploration; plain learning traces with decaying epsilon).

    Returns (global_buffer, {instance_id: instance_buffer}).
    """
    data_cfg = replace(
        cfg,
        run=replace(cfg.run, n_episodes=cfg.pretrain.episodes_per_instance),
        agent=replace(cfg.agent, epsilon_min=cfg.pretrain.epsilon_min,
                      epsilon_decay=cfg.pretrain.data_epsilon_decay()),
    )
    global_buffer = cfg.replay.make_buffer()
    per_instance = {}
    for instance in instances:
        instance_buffer = cfg.replay.make_buffer()
        run_model_free(instance, data_cfg, rng, global_buffer=instance_buffer)
        for rec in instance_buffer.records:
            global_buffer.push(TransitionRecord(rec.state.copy(), rec.action,
                                                rec.reward, rec.next_state.copy(),
                                                rec.instance_id, done=rec.done))
        per_instance[instance.instance_id] = instance_buffer
    return global_buffer, per_instance


def pretrain_batch(domain: str, instances, cfg: ExperimentConfig,
                   rng: np.random.Generator, model_key: str = "embedded",
                   collected=None) -> PretrainedArtifacts:
    """Fit one pretrained model (embedded, linear, or average) on batch
    data from several instances by alternating tuning passes; the weight
    prior relaxes on the configured schedule as passes progress."""
    if model_key not in FORM_FOR_MODEL or model_key == "scratch":
        raise ConfigError(f"cannot pretrain model {model_key!r}")
    if collected is None:
        collected = collect_pretraining_data(domain, instances, cfg, rng)
    global_buffer, per_instance = collected

    if cfg.bnn.standardize and len(global_buffer):
        states = np.stack([r.state for r in global_buffer.records])
        standardizer = bnn.Standardizer.fit(states)
    else:
        standardizer = bnn.Standardizer.identity(envs.state_dim(domain))

    form = FORM_FOR_MODEL[model_key]
    spec = bnn.build_bnn_spec(form, envs.state_dim(domain),
                              envs.action_count(domain), cfg.bnn.hidden,
                              latent_dim=cfg.latent.dim, standardizer=standardizer)
    posterior = bnn.init_posterior(spec, rng, cfg.bnn.init_log_variance,
                                   cfg.bnn.noise_init_variance,
                                   cfg.bnn.input_noise_variance)
    prior = cfg.bnn.prior_spec()
    alpha_cfg = cfg.bnn.alpha_config()
    latent_cfg = cfg.latent.update_config()

    embeddings: dict[str, LatentEmbedding] = {}
    if form != "plain":
        for instance_id in per_instance:
            embeddings[instance_id] = latent.sample_prior(cfg.latent.prior(), rng,
                                                          instance_id)
    # Per pass: small latent updates per instance on that instance's data,
    # then one shared-model update over the pooled buffer with each record
    # conditioned on its instance's current embedding. Training the weights
    # per instance instead lets the last instance overwrite the others.
    for phase in range(cfg.pretrain.passes):
        prior_variance = prior.weight_variance(phase)
        if form != "plain":
            for instance_id, buf in per_instance.items():
                embeddings[instance_id] = latent.update_latent(
                    embeddings[instance_id], posterior, spec, prior_variance, buf,
                    alpha_cfg, latent_cfg, rng,
                )
        lookup = None if form == "plain" else (lambda iid: embeddings[iid].w)
        for _ in range(cfg.run.tune_rounds):
            posterior = bnn.train_bnn(posterior, spec, prior_variance,
                                      global_buffer, lookup, alpha_cfg, rng)
    return PretrainedArtifacts(domain, model_key, spec, posterior, embeddings,
                               global_buffer, list(instances))
