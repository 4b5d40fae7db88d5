"""Benchmark domains with hidden-parameter instances.

Dispatch layer over the three domains. Step functions are pure; model
rollouts reuse the same collision/reward resolution through
:func:`simulate_transition` so fictional transitions obey the known
reward machinery.
"""

from __future__ import annotations

import numpy as np

from . import acrobot, hiv, nav2d
from .core import (
    ACTION_COUNTS,
    DOMAINS,
    EPISODE_CAPS,
    STATE_DIMS,
    EnvInstance,
    StepResult,
    load_instances,
    rk4_step,
    save_instances,
)

_MODULES = {"nav2d": nav2d, "acrobot": acrobot, "hiv": hiv}


def action_count(domain: str) -> int:
    return ACTION_COUNTS[domain]


def state_dim(domain: str) -> int:
    return STATE_DIMS[domain]


def episode_cap(domain: str) -> int:
    return EPISODE_CAPS[domain]


def state_scale(domain: str) -> np.ndarray:
    """Fixed per-domain magnitude scale used to normalize network inputs
    and prediction errors. Deterministic constants, not fitted."""
    if domain == "nav2d":
        return np.array([2.0, 2.0])
    if domain == "acrobot":
        return np.array([np.pi, np.pi, acrobot.VEL1_MAX, acrobot.VEL2_MAX])
    if domain == "hiv":
        return np.maximum(hiv.INITIAL_STATE, 1.0)
    raise ValueError(f"unknown domain {domain!r}")


def sample_instance(domain: str, rng: np.random.Generator) -> EnvInstance:
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}")
    seed = int(rng.integers(2 ** 31))
    params = _MODULES[domain].sample_hidden_params(rng)
    return EnvInstance(domain, params, seed)


def reset(instance: EnvInstance, rng: np.random.Generator) -> np.ndarray:
    return _MODULES[instance.domain].reset(instance, rng)


def step(instance: EnvInstance, state, action: int) -> StepResult:
    return _MODULES[instance.domain].step(instance, state, action)


def simulate_transition(instance: EnvInstance, state, action: int, proposed_next) -> StepResult:
    """Resolve a model-predicted move with the domain's known geometry and
    reward function. The returned next state is always valid."""
    if instance.domain == "nav2d":
        theta = int(instance.hidden_params[0])
        return nav2d.resolve_move(state, proposed_next, theta)
    if instance.domain == "acrobot":
        nxt = acrobot.sanitize(proposed_next)
        reward, done = acrobot.reward_done(nxt, instance.hidden_params)
        return StepResult(nxt, reward, done)
    nxt = hiv.sanitize(proposed_next)
    return StepResult(nxt, hiv.reward(instance, action, nxt), False)
