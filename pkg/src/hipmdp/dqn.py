"""Double Deep Q-Network policy learner.

Twin networks over one topology: a primary net that picks actions and a
slowly-mixed target net that evaluates them. Updates minimize the
importance-weighted squared temporal-difference error on the taken
action's Q-value only, with targets treated as constants (semi-gradient),
gradients L2-clipped, and minibatches drawn with TD-error prioritization.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nets
from .nets import AdamState, NetSpec


@dataclass(frozen=True)
class PolicyConfig:
    hidden: tuple[int, ...] = (256, 512)
    gamma: float = 0.99
    epsilon_start: float = 1.0
    epsilon_decay: float = 0.995  # per episode
    epsilon_min: float = 0.01
    update_period: int = 10  # primary-net update every N_pi steps
    tau: float = 0.005
    learning_rate: float = 5e-4
    grad_clip: float = 2.5
    minibatch: int = 32

    def decay(self, epsilon: float) -> float:
        return max(self.epsilon_min, epsilon * self.epsilon_decay)


@dataclass
class QNetworkPair:
    """Primary and target parameter vectors over one net topology."""

    spec: NetSpec
    primary: np.ndarray
    target: np.ndarray

    @property
    def action_count(self) -> int:
        return self.spec.out_width

    def copy(self) -> "QNetworkPair":
        return QNetworkPair(self.spec, self.primary.copy(), self.target.copy())


def init_pair(state_dim: int, action_count: int, hidden,
              rng: np.random.Generator) -> QNetworkPair:
    spec = NetSpec((state_dim, *tuple(int(h) for h in hidden), action_count))
    primary = nets.init_params(spec, rng)
    return QNetworkPair(spec, primary, primary.copy())


def q_values(pair: QNetworkPair, state) -> np.ndarray:
    return nets.forward(pair.spec, pair.primary, state)


def select_action(pair: QNetworkPair, state, epsilon: float,
                  rng: np.random.Generator) -> int:
    """Epsilon-greedy on the primary net; argmax ties break to the lowest
    action index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(pair.action_count))
    return int(np.argmax(q_values(pair, state)))


def ddqn_targets(pair: QNetworkPair, rewards, next_states, dones,
                 gamma: float) -> np.ndarray:
    """Batched Double-DQN targets: the primary net picks the next action,
    the target net prices it; terminal transitions return the reward."""
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    q_primary = nets.forward_batch(pair.spec, pair.primary, next_states)
    q_target = nets.forward_batch(pair.spec, pair.target, next_states)
    best = np.argmax(q_primary, axis=1)
    bootstrap = q_target[np.arange(len(rewards)), best]
    return rewards + gamma * bootstrap * ~dones


def ddqn_target(pair: QNetworkPair, transition, gamma: float) -> float:
    """Single-transition target for a replay record."""
    return float(
        ddqn_targets(pair, [transition.reward],
                     np.asarray(transition.next_state, dtype=np.float64)[None, :],
                     [transition.done], gamma)[0]
    )


def td_loss_gradient(spec: NetSpec, params, states, actions, targets, weights):
    """Gradient of (1/B) * sum_i w_i * (y_i - Q(s_i, a_i))^2 w.r.t. params,
    with y treated as constant. Only the taken action's output head carries
    gradient. Returns (grad, td_errors)."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    batch = states.shape[0]
    q = nets.forward_batch(spec, params, states)
    td = targets - q[np.arange(batch), actions]
    out_grad = np.zeros_like(q)
    out_grad[np.arange(batch), actions] = -2.0 * weights * td / batch
    grad, _ = nets.backward_batch(spec, params, states, out_grad)
    return grad, td


def policy_update(pair: QNetworkPair, adam: AdamState, buffer,
                  config: PolicyConfig, rng: np.random.Generator):
    """One prioritized minibatch update of the primary net.

    Samples with TD-error prioritization and importance weights, clips the
    gradient at config.grad_clip, refreshes the sampled records'
    priorities with |TD|, and returns (pair, adam, |TD| per record).
    """
    mb = min(config.minibatch, len(buffer))
    records, weights, idx = buffer.sample(mb, rng)
    states = np.stack([r.state for r in records])
    next_states = np.stack([r.next_state for r in records])
    actions = np.array([r.action for r in records])
    rewards = np.array([r.reward for r in records])
    dones = np.array([r.done for r in records])
    targets = ddqn_targets(pair, rewards, next_states, dones, config.gamma)
    grad, td = td_loss_gradient(pair.spec, pair.primary, states, actions, targets, weights)
    grad = nets.clip_gradient_l2(grad, config.grad_clip)
    primary, adam = nets.adam_step(adam, pair.primary, grad)
    buffer.update_priorities(idx, np.abs(td))
    return QNetworkPair(pair.spec, primary, pair.target), adam, np.abs(td)


def soft_update(pair: QNetworkPair, tau: float) -> QNetworkPair:
    """target <- tau * primary + (1 - tau) * target."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    target = tau * pair.primary + (1.0 - tau) * pair.target
    return QNetworkPair(pair.spec, pair.primary, target)


def save_pair(base, pair: QNetworkPair) -> None:
    nets.save_params(str(base) + ".primary", pair.spec, pair.primary,
                     extra={"role": "primary"})
    nets.save_params(str(base) + ".target", pair.spec, pair.target,
                     extra={"role": "target"})


def load_pair(base) -> QNetworkPair:
    spec, primary, header = nets.load_params(str(base) + ".primary")
    spec_t, target, header_t = nets.load_params(str(base) + ".target")
    if spec != spec_t or header.get("role") != "primary" or header_t.get("role") != "target":
        raise ValueError(f"inconsistent policy checkpoint at {base}")
    return QNetworkPair(spec, primary, target)
