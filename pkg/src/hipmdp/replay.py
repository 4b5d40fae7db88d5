"""Prioritized experience replay.

Proportional prioritization: record i is drawn with probability
p_i^a / sum_j p_j^a (a = priority exponent), importance weights
w_i = (N * P(i))^-b normalized by the largest weight in the draw.
Buffers never evict. A growable cumulative-sum tree keeps sampling
O(log n).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class TransitionRecord:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    instance_id: str
    done: bool = False
    priority: float = 1.0


class _SumTree:
    """Binary cumulative-sum tree over a growable leaf array."""

    def __init__(self, capacity: int = 64):
        self.capacity = capacity
        self.size = 0
        self.nodes = np.zeros(2 * capacity)

    def _grow(self):
        old = self.leaves().copy()
        self.capacity *= 2
        self.nodes = np.zeros(2 * self.capacity)
        self.nodes[self.capacity : self.capacity + len(old)] = old
        for i in range(self.capacity - 1, 0, -1):
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1]

    def leaves(self) -> np.ndarray:
        return self.nodes[self.capacity : self.capacity + self.size]

    def append(self, value: float):
        if self.size == self.capacity:
            self._grow()
        self.size += 1
        self.set(self.size - 1, value)

    def set(self, i: int, value: float):
        node = self.capacity + i
        self.nodes[node] = value
        node //= 2
        while node >= 1:
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1]
            node //= 2

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    def find(self, u: float) -> int:
        """Index of the leaf whose cumulative-sum interval contains u."""
        node = 1
        while node < self.capacity:
            left = 2 * node
            if u < self.nodes[left]:
                node = left
            else:
                u -= self.nodes[left]
                node = left + 1
        return min(node - self.capacity, self.size - 1)


class PrioritizedBuffer:
    """Unbounded prioritized replay buffer. Single writer."""

    def __init__(self, priority_exponent: float = 0.2,
                 importance_exponent: float = 0.1,
                 priority_floor: float = 1e-6):
        self.priority_exponent = priority_exponent
        self.importance_exponent = importance_exponent
        self.priority_floor = priority_floor
        self.records: list[TransitionRecord] = []
        self._tree = _SumTree()
        self._max_priority = 1.0

    def __len__(self) -> int:
        return len(self.records)

    def push(self, record: TransitionRecord) -> None:
        """Append with the running maximum priority so every record is
        sampled at least once before its own error takes over."""
        record.priority = self._max_priority
        self.records.append(record)
        self._tree.append(record.priority ** self.priority_exponent)

    def priorities(self) -> np.ndarray:
        return np.array([r.priority for r in self.records])

    def sampling_probabilities(self) -> np.ndarray:
        """p_i^a / sum p_j^a as the tree computes them."""
        if not self.records:
            raise RuntimeError("buffer is empty")
        leaves = self._tree.leaves()
        return leaves / self._tree.total

    def sample(self, n: int, rng: np.random.Generator):
        """Draw n records i.i.d. proportional to p^a.

        Returns (records, importance_weights, indices); weights are
        (N * P(i))^-b normalized by the max weight in this draw.
        """
        if not self.records:
            raise RuntimeError("cannot sample from an empty buffer")
        total = self._tree.total
        if total <= 0.0:
            raise RuntimeError("all priorities are zero")
        idx = np.array([self._tree.find(u) for u in rng.random(n) * total])
        leaves = self._tree.leaves()
        probs = leaves[idx] / total
        weights = (len(self.records) * probs) ** (-self.importance_exponent)
        weights = weights / weights.max()
        return [self.records[i] for i in idx], weights, idx

    def set_priorities(self, indices, priorities) -> None:
        """Raw priority assignment (no floor). Mostly for tests and export."""
        for i, p in zip(indices, priorities):
            if not 0 <= i < len(self.records):
                raise IndexError(f"index {i} out of range")
            p = float(p)
            if not np.isfinite(p) or p < 0:
                raise ValueError(f"priority must be finite and >= 0, got {p}")
            self.records[i].priority = p
            self._tree.set(int(i), p ** self.priority_exponent)
            self._max_priority = max(self._max_priority, p)

    def update_priorities(self, indices, errors) -> None:
        """Set priority |error| + floor for the given records."""
        self.set_priorities(indices, [abs(float(e)) + self.priority_floor for e in errors])

    def clone(self) -> "PrioritizedBuffer":
        """Same contents with fresh record objects and pushed-state
        priorities; state arrays are shared (they are never mutated)."""
        out = PrioritizedBuffer(self.priority_exponent, self.importance_exponent,
                                self.priority_floor)
        for r in self.records:
            out.push(TransitionRecord(r.state, r.action, r.reward, r.next_state,
                                      r.instance_id, done=r.done))
        return out

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            fh.write("# schema=replay-buffer-v1\n")
            writer = csv.writer(fh)
            if not self.records:
                return
            d = len(self.records[0].state)
            writer.writerow(
                ["instance_id"]
                + [f"s{i}" for i in range(d)]
                + ["action", "reward"]
                + [f"sn{i}" for i in range(d)]
                + ["done", "priority"]
            )
            for r in self.records:
                writer.writerow(
                    [r.instance_id]
                    + [repr(float(v)) for v in r.state]
                    + [r.action, repr(float(r.reward))]
                    + [repr(float(v)) for v in r.next_state]
                    + [int(r.done), repr(float(r.priority))]
                )
