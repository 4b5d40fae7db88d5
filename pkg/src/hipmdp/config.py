"""Experiment configuration.

Nested dataclasses, one group per subsystem, resolved from per-domain
defaults, an optional JSON config file, and dotted-key overrides
(``bnn.alpha=0.45``). The fully resolved flat mapping is what run
manifests record.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .bnn import AlphaConfig, PriorSpec
from .dqn import PolicyConfig
from .errors import ConfigError
from .latent import LatentPrior, LatentUpdateConfig
from .replay import PrioritizedBuffer

VARIANTS = ("embedded", "linear", "scratch", "average", "model_free")
PRETRAIN_MODELS = ("embedded", "linear", "average")


@dataclass
class BnnConfig:
    hidden: tuple[int, ...] = (32, 32)
    alpha: float = 0.5
    mc_samples: int = 10
    predict_samples: int = 50
    epochs: int = 100
    draw_size: int = 160
    minibatch: int = 32
    learning_rate: float = 2.5e-4
    init_log_variance: float = -10.0
    noise_init_variance: float = 0.25
    input_noise_variance: float = 1.0
    prior_initial_variance: float = float(np.exp(-10.0))
    prior_growth_factor: float = 10.0
    prior_growth_steps: int = 4
    prior_max_variance: float = 1.0
    standardize: bool = False

    def alpha_config(self) -> AlphaConfig:
        return AlphaConfig(
            alpha=self.alpha, mc_samples=self.mc_samples, epochs=self.epochs,
            draw_size=self.draw_size, minibatch=self.minibatch,
            learning_rate=self.learning_rate, predict_samples=self.predict_samples,
        )

    def prior_spec(self) -> PriorSpec:
        return PriorSpec(
            initial_weight_variance=self.prior_initial_variance,
            growth_factor=self.prior_growth_factor,
            growth_steps=self.prior_growth_steps,
            max_variance=self.prior_max_variance,
            input_noise_prior_variance=self.input_noise_variance,
        )


@dataclass
class LatentConfig:
    dim: int = 5
    prior_variance: float = 0.1
    learning_rate: float = 5e-4
    steps: int = 50
    minibatch: int = 32

    def prior(self) -> LatentPrior:
        return LatentPrior.default(self.dim, self.prior_variance)

    def update_config(self) -> LatentUpdateConfig:
        return LatentUpdateConfig(self.steps, self.minibatch, self.learning_rate)


@dataclass
class AgentConfig:
    hidden: tuple[int, ...] = (256, 512)
    gamma: float = 0.99
    epsilon_start: float = 1.0
    epsilon_decay: float = 0.995
    epsilon_min: float = 0.01
    update_period: int = 10
    tau: float = 0.005
    learning_rate: float = 5e-4
    grad_clip: float = 2.5
    minibatch: int = 32

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(
            hidden=self.hidden, gamma=self.gamma, epsilon_start=self.epsilon_start,
            epsilon_decay=self.epsilon_decay, epsilon_min=self.epsilon_min,
            update_period=self.update_period, tau=self.tau,
            learning_rate=self.learning_rate, grad_clip=self.grad_clip,
            minibatch=self.minibatch,
        )


@dataclass
class ReplayConfig:
    priority_exponent: float = 0.2
    importance_exponent: float = 0.1
    priority_floor: float = 1e-6

    def make_buffer(self) -> PrioritizedBuffer:
        return PrioritizedBuffer(self.priority_exponent, self.importance_exponent,
                                 self.priority_floor)


@dataclass
class RunSettings:
    n_episodes: int = 10        # N_e real episodes per run
    n_fictional: int = 500      # N_f fictional-episode batch after a tune
    tune_rounds: int = 2        # N_u alternation rounds per tune
    retune_factor: float = 2.0  # retune when episode MSE > factor * baseline
    rollout_mode: str = "sample"  # or "mean"
    mse_samples: int = 10


@dataclass
class PretrainConfig:
    n_instances: int = 2
    episodes_per_instance: int = 500
    passes: int = 20
    epsilon_min: float = 0.1
    # 0 = auto: reach the epsilon floor by ~80% of the episode budget, so
    # desk-scale learners trace the same exploration profile as long runs
    epsilon_decay: float = 0.0
    models: tuple[str, ...] = PRETRAIN_MODELS

    def data_epsilon_decay(self) -> float:
        if self.epsilon_decay > 0.0:
            return self.epsilon_decay
        horizon = max(1.0, 0.8 * self.episodes_per_instance)
        return float(self.epsilon_min ** (1.0 / horizon))


@dataclass
class ExperimentConfig:
    domain: str = "nav2d"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out_dir: str = "results"
    variants: tuple[str, ...] = VARIANTS
    bnn: BnnConfig = field(default_factory=BnnConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    run: RunSettings = field(default_factory=RunSettings)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)


_DOMAIN_DEFAULTS = {
    # nav2d BNN learning rate: 5e-5 reproduces the long-run regime (500
    # episodes per instance); the desk-scale default uses 2.5e-4 so the
    # variance parameters can traverse their range within a 20-pass budget.
    "nav2d": {
        "bnn.hidden": (25, 25, 25),
        "bnn.alpha": 0.5,
        "bnn.learning_rate": 2.5e-4,
        "agent.gamma": 0.998,
        "pretrain.n_instances": 2,
    },
    "acrobot": {
        "bnn.hidden": (32, 32),
        "bnn.alpha": 0.5,
        "bnn.learning_rate": 2.5e-4,
        "agent.gamma": 0.99,
        "pretrain.n_instances": 8,
    },
    "hiv": {
        "bnn.hidden": (32, 32),
        "bnn.alpha": 0.45,
        "bnn.learning_rate": 2.5e-4,
        "bnn.standardize": True,
        "agent.gamma": 0.998,
        "pretrain.n_instances": 5,
    },
}


def default_config(domain: str) -> ExperimentConfig:
    if domain not in _DOMAIN_DEFAULTS:
        raise ConfigError(f"unknown domain {domain!r}")
    cfg = ExperimentConfig(domain=domain)
    for key, value in _DOMAIN_DEFAULTS[domain].items():
        set_key(cfg, key, value)
    return cfg


def flatten(cfg: ExperimentConfig) -> dict:
    """Dotted-key view of the full configuration, JSON-serializable."""
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub in fields(value):
                v = getattr(value, sub.name)
                out[f"{f.name}.{sub.name}"] = list(v) if isinstance(v, tuple) else v
        else:
            out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def set_key(cfg: ExperimentConfig, key: str, value) -> None:
    """Assign one dotted key, coercing strings/lists to the field's type."""
    parts = key.split(".")
    target = cfg
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise ConfigError(f"unknown config group {part!r} in {key!r}")
        target = getattr(target, part)
    name = parts[-1]
    if not dataclasses.is_dataclass(target) or not hasattr(target, name):
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(target, name)
    setattr(target, name, _coerce(current, value, key))


def _coerce(current, value, key):
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key!r} expects a sequence")
        elem = current[0] if current else value[0]
        caster = int if isinstance(elem, int) and not isinstance(elem, bool) else (
            float if isinstance(elem, float) else str)
        return tuple(caster(v) for v in value)
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes"):
            return True
        if str(value).lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"{key!r} expects a boolean, got {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return str(value)


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    for key, value in overrides.items():
        set_key(cfg, key, value)
    return cfg


def load_config(domain: str, config_path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults for the domain, then the JSON file, then explicit overrides."""
    cfg = default_config(domain)
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {config_path} must hold a JSON object")
        apply_overrides(cfg, doc)
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg
