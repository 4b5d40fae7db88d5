"""HIV treatment scheduling on the six-compartment clinical model.

State s = (T1, T2, T1s, T2s, V, E): healthy and infected CD4+
T-lymphocytes, healthy and infected macrophages (the `s` suffix marks the
infected compartments), free virus, and immune effector cells. Four
actions choose the active drug classes for the next 5 simulated days:
none, reverse-transcriptase inhibitor (eps1), protease inhibitor (eps2),
or both. The dynamics:

    dT1  = lambda1 - d1*T1 - (1 - eps1)*k1*V*T1
    dT2  = lambda2 - d2*T2 - (1 - f*eps1)*k2*V*T2
    dT1s = (1 - eps1)*k1*V*T1 - delta*T1s - m1*E*T1s
    dT2s = (1 - f*eps1)*k2*V*T2 - delta*T2s - m2*E*T2s
    dV   = (1 - eps2)*NT*delta*(T1s + T2s) - c*V
           - ((1 - eps1)*rho1*k1*T1 + (1 - f*eps1)*rho2*k2*T2)*V
    dE   = lambdaE + bE*(T1s + T2s)*E/((T1s + T2s) + Kb)
           - dE*(T1s + T2s)*E/((T1s + T2s) + Kd) - deltaE*E

Each instance perturbs all 22 baseline constants (including the drug
efficacies eps1/eps2 applied when the corresponding class is active) with
relative Gaussian noise, then must survive a 1000-day no-treatment
stability rollout. Reward per step:

    R = -0.1*V - 2e4*eps1^2 - 2e3*eps2^2 + 1e3*E

using the efficacies actually applied by the chosen action.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from ..errors import InstanceGenerationError, NumericalError
from .core import EnvInstance, StepResult, rk4_step

CONSTANTS_VERSION = "hiv-constants-v1"

# Baseline hidden parameters of the clinical simulation model. Order is
# load-bearing: instances store their perturbed values in this order.
PARAM_NAMES = (
    "lambda1", "d1", "eps1", "k1",
    "lambda2", "d2", "f", "k2",
    "delta", "m1", "m2", "eps2",
    "NT", "c", "rho1", "rho2",
    "lambdaE", "bE", "Kb", "dE", "Kd", "deltaE",
)

BASELINE = {
    "lambda1": 10_000.0,  # healthy T-cell production, cells/(ml day)
    "d1": 0.01,           # healthy T-cell death rate, 1/day
    "eps1": 0.7,          # RT-inhibitor efficacy when active
    "k1": 8.0e-7,         # T-cell infection rate, ml/(virions day)
    "lambda2": 31.98,     # healthy macrophage production
    "d2": 0.01,
    "f": 0.34,            # treatment efficacy reduction in macrophages
    "k2": 1.0e-4,
    "delta": 0.7,         # infected cell death rate
    "m1": 1.0e-5,         # immune-induced clearance, T-cells
    "m2": 1.0e-5,         # immune-induced clearance, macrophages
    "eps2": 0.3,          # protease-inhibitor efficacy when active
    "NT": 100.0,          # virions per infected cell
    "c": 13.0,            # virus clearance rate, 1/day
    "rho1": 1.0,
    "rho2": 1.0,
    "lambdaE": 1.0,       # effector production
    "bE": 0.3,            # effector birth rate
    "Kb": 100.0,          # birth saturation
    "dE": 0.25,           # effector death rate
    "Kd": 500.0,          # death saturation
    "deltaE": 0.1,        # natural effector decay
}

BASELINE_VECTOR = np.array([BASELINE[name] for name in PARAM_NAMES])

# Unhealthy steady state of the baseline system; every episode starts here.
INITIAL_STATE = np.array([163_573.0, 5.0, 11_945.0, 46.0, 63_919.0, 24.0])

DT_DAYS = 5.0
MIN_SUBSTEPS_PER_DAY = 10
STIFFNESS_TARGET = 1.0  # cap on |rate| * h per RK4 substep (stability limit 2.785)
STABILITY_DAYS = 1000.0
STABILITY_BLOWUP = 1e10
PERTURB_REL_STD = 0.25
MAX_SAMPLE_ATTEMPTS = 100

# (eps1 active, eps2 active) per action: none, drug 1, drug 2, both
ACTION_EFFICACY = ((0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0))

_IDX = {name: i for i, name in enumerate(PARAM_NAMES)}


def constants_hash() -> str:
    """Git-style blob hash of the versioned constants table."""
    payload = json.dumps(
        {"version": CONSTANTS_VERSION, "order": PARAM_NAMES,
         "baseline": {k: repr(v) for k, v in BASELINE.items()},
         "initial_state": [repr(float(v)) for v in INITIAL_STATE]},
        sort_keys=True,
    ).encode()
    blob = b"blob %d\0" % len(payload) + payload
    return hashlib.sha1(blob).hexdigest()


def applied_efficacies(instance: EnvInstance, action: int):
    p = instance.hidden_params
    on1, on2 = ACTION_EFFICACY[action]
    return on1 * float(p[_IDX["eps1"]]), on2 * float(p[_IDX["eps2"]])


def derivs(state, eps1: float, eps2: float, params) -> np.ndarray:
    (lambda1, d1, _, k1, lambda2, d2, f, k2, delta, m1, m2, _,
     NT, c, rho1, rho2, lambdaE, bE, Kb, dE, Kd, deltaE) = (float(v) for v in params)
    T1, T2, T1s, T2s, V, E = (float(v) for v in state)
    infect1 = (1.0 - eps1) * k1 * V * T1
    infect2 = (1.0 - f * eps1) * k2 * V * T2
    Ts = T1s + T2s
    return np.array(
        [
            lambda1 - d1 * T1 - infect1,
            lambda2 - d2 * T2 - infect2,
            infect1 - delta * T1s - m1 * E * T1s,
            infect2 - delta * T2s - m2 * E * T2s,
            (1.0 - eps2) * NT * delta * Ts
            - c * V
            - ((1.0 - eps1) * rho1 * k1 * T1 + (1.0 - f * eps1) * rho2 * k2 * T2) * V,
            lambdaE
            + bE * Ts * E / (Ts + Kb)
            - dE * Ts * E / (Ts + Kd)
            - deltaE * E,
        ]
    )


def reward(instance: EnvInstance, action: int, next_state) -> float:
    eps1, eps2 = applied_efficacies(instance, action)
    V = float(next_state[4])
    E = float(next_state[5])
    return -0.1 * V - 2e4 * eps1 ** 2 - 2e3 * eps2 ** 2 + 1e3 * E


def _dominant_rate(state, eps1: float, eps2: float, params) -> float:
    """Conservative bound on the fastest linear decay rate (1/day) at the
    current state. The macrophage infection rate k2*V and the virus
    clearance rate c dominate; both exceed the RK4 stability limit at
    coarse substeps once V grows, so the substep count must track them."""
    (_, d1, _, k1, _, d2, f, k2, delta, m1, m2, _,
     _, c, rho1, rho2, _, _, _, dE, _, deltaE) = (float(v) for v in params)
    T1, T2, _, _, V, E = (float(v) for v in state)
    return max(
        d1 + (1.0 - eps1) * k1 * V,
        d2 + (1.0 - f * eps1) * k2 * V,
        delta + max(m1, m2) * E,
        c + (1.0 - eps1) * rho1 * k1 * T1 + (1.0 - f * eps1) * rho2 * k2 * T2,
        deltaE + dE,
    )


def step(instance: EnvInstance, state, action: int) -> StepResult:
    """Integrate 5 days in 1-day chunks, scaling the RK4 substep count of
    each chunk to the current stiffness; floor the state at zero."""
    eps1, eps2 = applied_efficacies(instance, action)
    derivs_fn = lambda s: derivs(s, eps1, eps2, instance.hidden_params)
    y = np.asarray(state, dtype=np.float64)
    with np.errstate(over="raise", invalid="raise"):
        try:
            for _ in range(int(DT_DAYS)):
                rate = _dominant_rate(y, eps1, eps2, instance.hidden_params)
                substeps = max(MIN_SUBSTEPS_PER_DAY, int(np.ceil(rate / STIFFNESS_TARGET)))
                y = rk4_step(derivs_fn, y, 1.0, substeps)
        except FloatingPointError as exc:
            raise NumericalError(f"HIV integration diverged: {exc}") from exc
    nxt = np.maximum(y, 0.0)
    return StepResult(nxt, reward(instance, action, nxt), False)


def sanitize(state) -> np.ndarray:
    return np.maximum(np.asarray(state, dtype=np.float64), 0.0)


def reset(instance: EnvInstance, rng: np.random.Generator) -> np.ndarray:
    return INITIAL_STATE.copy()


def _stable(params) -> bool:
    """1000-day no-treatment rollout from the initial state must stay
    finite and bounded."""
    probe = EnvInstance("hiv", params, seed=0)
    state = INITIAL_STATE.copy()
    for _ in range(int(STABILITY_DAYS / DT_DAYS)):
        try:
            result = step(probe, state, action=0)
        except NumericalError:
            return False
        state = result.next_state
        if np.max(state) > STABILITY_BLOWUP:
            return False
    return True


def sample_hidden_params(rng: np.random.Generator) -> np.ndarray:
    """Perturb every baseline constant with relative N(0, 0.25^2) noise,
    redrawing non-positive values (and efficacies outside (0, 1)), until
    the stability filter accepts."""
    for _ in range(MAX_SAMPLE_ATTEMPTS):
        params = np.empty(len(PARAM_NAMES))
        for i, name in enumerate(PARAM_NAMES):
            base = BASELINE[name]
            v = base * (1.0 + PERTURB_REL_STD * rng.standard_normal())
            while v <= 0.0 or (name in ("eps1", "eps2", "f") and v >= 1.0):
                v = base * (1.0 + PERTURB_REL_STD * rng.standard_normal())
            params[i] = v
        if _stable(params):
            return params
    raise InstanceGenerationError(
        f"no stable HIV instance found in {MAX_SAMPLE_ATTEMPTS} attempts"
    )
