"""Shared environment machinery: instances, step results, RK4 integration.

A task instance is a domain plus one draw of its hidden parameters; the
true dynamics of an instance are fixed for its lifetime. Step functions
are pure in (state, action, instance), so identical action sequences on
the same instance yield bitwise-identical trajectories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import NumericalError

DOMAINS = ("nav2d", "acrobot", "hiv")

ACTION_COUNTS = {"nav2d": 4, "acrobot": 3, "hiv": 4}
STATE_DIMS = {"nav2d": 2, "acrobot": 4, "hiv": 6}
EPISODE_CAPS = {"nav2d": 100, "acrobot": 400, "hiv": 200}


@dataclass(frozen=True)
class EnvInstance:
    """One member of a task family: a domain and its hidden parameters."""

    domain: str
    hidden_params: np.ndarray
    seed: int

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        object.__setattr__(
            self, "hidden_params", np.asarray(self.hidden_params, dtype=np.float64)
        )

    @property
    def instance_id(self) -> str:
        return f"{self.domain}:{self.seed}"

    def to_json(self) -> dict:
        return {
            "domain": self.domain,
            "hidden_params": [float(v) for v in self.hidden_params],
            "seed": int(self.seed),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EnvInstance":
        return cls(obj["domain"], np.array(obj["hidden_params"]), int(obj["seed"]))


@dataclass
class StepResult:
    next_state: np.ndarray
    reward: float
    done: bool
    wall_hit: bool = False


def rk4_step(derivs, state, dt: float, substeps: int = 1) -> np.ndarray:
    """Classical 4th-order Runge-Kutta, applied `substeps` times with step
    dt/substeps. `derivs(state) -> dstate/dt`."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    h = dt / substeps
    y = np.asarray(state, dtype=np.float64)
    for _ in range(substeps):
        k1 = derivs(y)
        k2 = derivs(y + 0.5 * h * k1)
        k3 = derivs(y + 0.5 * h * k2)
        k4 = derivs(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(y)):
        raise NumericalError("integration produced non-finite state")
    return y


def save_instances(path, instances) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([inst.to_json() for inst in instances], indent=2))


def load_instances(path):
    return [EnvInstance.from_json(obj) for obj in json.loads(Path(path).read_text())]
