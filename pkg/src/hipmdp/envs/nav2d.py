"""2D navigation with a class-dependent nonlinear wind.

State (x, y) in (-2, 2)^2, actions {N, E, S, W}. The hidden parameter is a
single class bit theta in {0, 1}. Ignoring collisions, a step moves

    dx = (-1)^theta * c * (a_x - (1 - theta) * beta * r)
    dy = (-1)^theta * c * (a_y - theta * beta * r)
    r  = sqrt((x + 1.5)^2 + (y + 1.5)^2)

with signed action components a_x (+1 for E, -1 for W) and a_y (+1 for N,
-1 for S), c = 0.3 and beta = 0.23. The wind grows with distance from the
start region and acts on x for class 0 and on y for class 1; class 1 also
flips the cardinal directions.

Geometry: the goal region is the square [1.0, 1.5]^2. For class 0 the wall
is the goal's bottom edge and entry is allowed only through its left edge;
for class 1 the wall is the left edge and entry only through the bottom.
Attempting to cross a wall, enter over a wrong boundary, or leave the
outer square blocks the move at a -5 penalty. Correct entry pays +1000 and
ends the episode; every other step costs -0.1.
"""

from __future__ import annotations

import math

import numpy as np

from .core import EnvInstance, StepResult

STEP_SCALE = 0.3  # c
WIND_SCALE = 0.23  # beta
BOUND = 2.0
GOAL_LO = 1.0
GOAL_HI = 1.5
START_LO = -1.75
START_HI = -1.25

REWARD_STEP = -0.1
REWARD_BLOCKED = -5.0
REWARD_GOAL = 1000.0

ACTIONS = ("N", "E", "S", "W")
_AX = {0: 0.0, 1: 1.0, 2: 0.0, 3: -1.0}  # E=+1, W=-1
_AY = {0: 1.0, 1: 0.0, 2: -1.0, 3: 0.0}  # N=+1, S=-1


def proposed_delta(state, action: int, theta: int) -> np.ndarray:
    """Free-space displacement before collision resolution."""
    x, y = float(state[0]), float(state[1])
    r = math.sqrt((x + 1.5) ** 2 + (y + 1.5) ** 2)
    sign = -1.0 if theta else 1.0
    dx = sign * STEP_SCALE * (_AX[action] - (1 - theta) * WIND_SCALE * r)
    dy = sign * STEP_SCALE * (_AY[action] - theta * WIND_SCALE * r)
    return np.array([dx, dy])


def _in_goal(p) -> bool:
    return GOAL_LO <= p[0] <= GOAL_HI and GOAL_LO <= p[1] <= GOAL_HI


def _crosses_vertical(p0, p1, x_line, y_lo, y_hi):
    """Does segment p0->p1 cross the vertical segment at x_line, y in [y_lo, y_hi]?"""
    if (p0[0] - x_line) * (p1[0] - x_line) >= 0:
        return False
    t = (x_line - p0[0]) / (p1[0] - p0[0])
    y_c = p0[1] + t * (p1[1] - p0[1])
    return y_lo <= y_c <= y_hi


def _crosses_horizontal(p0, p1, y_line, x_lo, x_hi):
    if (p0[1] - y_line) * (p1[1] - y_line) >= 0:
        return False
    t = (y_line - p0[1]) / (p1[1] - p0[1])
    x_c = p0[0] + t * (p1[0] - p0[0])
    return x_lo <= x_c <= x_hi


def _correct_entry(p0, p1, theta: int) -> bool:
    if theta == 0:
        # enter through the left edge, moving in +x
        return p0[0] < GOAL_LO and _crosses_vertical(p0, p1, GOAL_LO, GOAL_LO, GOAL_HI)
    # class 1: enter through the bottom edge, moving in +y
    return p0[1] < GOAL_LO and _crosses_horizontal(p0, p1, GOAL_LO, GOAL_LO, GOAL_HI)


def _touches_goal_boundary(p0, p1) -> bool:
    return (
        _crosses_vertical(p0, p1, GOAL_LO, GOAL_LO, GOAL_HI)
        or _crosses_vertical(p0, p1, GOAL_HI, GOAL_LO, GOAL_HI)
        or _crosses_horizontal(p0, p1, GOAL_LO, GOAL_LO, GOAL_HI)
        or _crosses_horizontal(p0, p1, GOAL_HI, GOAL_LO, GOAL_HI)
    )


def resolve_move(state, proposed, theta: int) -> StepResult:
    """Classify the motion segment state->proposed and resolve collisions.

    Used both by the real step (proposed = state + dynamics delta) and by
    model rollouts (proposed = model prediction), so fictional transitions
    see the same walls and rewards as real ones.
    """
    p0 = np.asarray(state, dtype=np.float64)
    p1 = np.asarray(proposed, dtype=np.float64)
    if _correct_entry(p0, p1, theta):
        landing = np.clip(p1, GOAL_LO, GOAL_HI)
        return StepResult(landing, REWARD_GOAL, True)
    if _touches_goal_boundary(p0, p1) or _in_goal(p1):
        return StepResult(p0.copy(), REWARD_BLOCKED, False, wall_hit=True)
    if np.max(np.abs(p1)) >= BOUND:
        return StepResult(p0.copy(), REWARD_BLOCKED, False, wall_hit=True)
    return StepResult(p1, REWARD_STEP, False)


def step(instance: EnvInstance, state, action: int) -> StepResult:
    theta = int(instance.hidden_params[0])
    return resolve_move(state, np.asarray(state) + proposed_delta(state, action, theta), theta)


def reset(instance: EnvInstance, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(START_LO, START_HI, size=2)


def sample_hidden_params(rng: np.random.Generator) -> np.ndarray:
    return np.array([float(rng.integers(0, 2))])
