"""Acrobot swing-up with perturbable link masses and lengths.

State (theta1, theta2, dtheta1, dtheta2); torque tau in {-1, 0, +1} on the
middle joint. Equations of motion:

    ddtheta1 = -(d2 * ddtheta2 + phi1) / d1
    ddtheta2 = (tau + (d2/d1) * phi1 - m2*l1*lc2*dtheta1^2*sin(theta2) - phi2)
               / (m2*lc2^2 + I2 - d2^2/d1)
    d1   = m1*lc1^2 + m2*(l1^2 + lc2^2 + 2*l1*lc2*cos(theta2)) + I1 + I2
    d2   = m2*(lc2^2 + l1*lc2*cos(theta2)) + I2
    phi1 = -m2*l1*lc2*dtheta2^2*sin(theta2) - 2*m2*l1*lc2*dtheta2*dtheta1*sin(theta2)
           + (m1*lc1 + m2*l1)*g*cos(theta1 - pi/2) + phi2
    phi2 = m2*lc2*g*cos(theta1 + theta2 - pi/2)

Hidden parameters are (l1, l2, m1, m2), each 1 + N(0, 0.25) per instance;
centers of mass (lc = 0.5), inertias (I = 1) and g = 9.8 stay fixed. The
tip height above the pivot is -l1*cos(theta1) - l2*cos(theta1 + theta2);
reaching height l1 pays 10 and ends the episode, otherwise the reward is
-0.05 * (height - l1)^2. One agent step integrates 0.2 s with four RK4
substeps, then wraps angles to (-pi, pi] and clamps angular velocities to
[-4pi, 4pi] and [-9pi, 9pi].
"""

from __future__ import annotations

import math

import numpy as np

from .core import EnvInstance, StepResult, rk4_step

LC1 = 0.5
LC2 = 0.5
I1 = 1.0
I2 = 1.0
GRAVITY = 9.8
DT = 0.2
SUBSTEPS = 4
VEL1_MAX = 4.0 * np.pi
VEL2_MAX = 9.0 * np.pi
PARAM_FLOOR = 0.1  # resample threshold for perturbed lengths/masses

REWARD_GOAL = 10.0

TORQUES = (-1.0, 0.0, 1.0)


def inertia_terms(state, params):
    """(d1, d2) inertia coefficients of the equations of motion."""
    l1, _, m1, m2 = (float(v) for v in params)
    cos2 = math.cos(float(state[1]))
    d1 = m1 * LC1 ** 2 + m2 * (l1 ** 2 + LC2 ** 2 + 2.0 * l1 * LC2 * cos2) + I1 + I2
    d2 = m2 * (LC2 ** 2 + l1 * LC2 * cos2) + I2
    return d1, d2


def derivs(state, torque: float, params) -> np.ndarray:
    """Time derivatives (dtheta1, dtheta2, ddtheta1, ddtheta2)."""
    l1, l2, m1, m2 = (float(v) for v in params)
    th1, th2, dth1, dth2 = (float(v) for v in state)
    cos2 = math.cos(th2)
    sin2 = math.sin(th2)
    d1 = m1 * LC1 ** 2 + m2 * (l1 ** 2 + LC2 ** 2 + 2.0 * l1 * LC2 * cos2) + I1 + I2
    d2 = m2 * (LC2 ** 2 + l1 * LC2 * cos2) + I2
    phi2 = m2 * LC2 * GRAVITY * math.cos(th1 + th2 - math.pi / 2.0)
    phi1 = (
        -m2 * l1 * LC2 * dth2 ** 2 * sin2
        - 2.0 * m2 * l1 * LC2 * dth2 * dth1 * sin2
        + (m1 * LC1 + m2 * l1) * GRAVITY * math.cos(th1 - math.pi / 2.0)
        + phi2
    )
    ddth2 = (
        torque + (d2 / d1) * phi1 - m2 * l1 * LC2 * dth1 ** 2 * sin2 - phi2
    ) / (m2 * LC2 ** 2 + I2 - d2 ** 2 / d1)
    ddth1 = -(d2 * ddth2 + phi1) / d1
    return np.array([dth1, dth2, ddth1, ddth2])


def _wrap_angle(a: float) -> float:
    """Map to (-pi, pi]."""
    w = (a + np.pi) % (2.0 * np.pi) - np.pi
    return np.pi if w == -np.pi else w


def sanitize(state) -> np.ndarray:
    """Wrap angles, clamp angular velocities; applied after every step and
    to model-predicted states."""
    s = np.asarray(state, dtype=np.float64)
    return np.array(
        [
            _wrap_angle(float(s[0])),
            _wrap_angle(float(s[1])),
            float(np.clip(s[2], -VEL1_MAX, VEL1_MAX)),
            float(np.clip(s[3], -VEL2_MAX, VEL2_MAX)),
        ]
    )


def tip_height(state, params) -> float:
    l1, l2 = float(params[0]), float(params[1])
    return -l1 * np.cos(state[0]) - l2 * np.cos(state[0] + state[1])


def reward_done(next_state, params):
    l1 = float(params[0])
    height = tip_height(next_state, params)
    if height >= l1:
        return REWARD_GOAL, True
    return -0.05 * (height - l1) ** 2, False


def step(instance: EnvInstance, state, action: int) -> StepResult:
    torque = TORQUES[action]
    raw = rk4_step(lambda s: derivs(s, torque, instance.hidden_params), state, DT, SUBSTEPS)
    nxt = sanitize(raw)
    reward, done = reward_done(nxt, instance.hidden_params)
    return StepResult(nxt, reward, done)


def reset(instance: EnvInstance, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-0.1, 0.1, size=4)


def sample_hidden_params(rng: np.random.Generator, variance: float = 0.25) -> np.ndarray:
    std = math.sqrt(variance)
    params = np.empty(4)
    for i in range(4):
        v = 1.0 + rng.normal(0.0, std)
        while v <= PARAM_FLOOR:
            v = 1.0 + rng.normal(0.0, std)
        params[i] = v
    return params
