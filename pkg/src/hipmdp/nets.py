"""Dense feed-forward network primitives.

Fixed-topology MLPs with rectifier hidden layers and an identity output
layer. Parameters live in a single flat float64 vector whose layout is
described by :class:`NetSpec`; all operations are value-semantic (inputs
are never mutated) so they are safe to call concurrently on distinct data.

Flat layout, per affine layer in order: row-major weight matrix of shape
(fan_in, fan_out), then the bias of length fan_out.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import NumericalError


@dataclass(frozen=True)
class NetSpec:
    """Topology of a dense MLP (input width, hidden widths..., output width)."""

    layer_widths: tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("need at least an input and an output layer")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        slices = []
        offset = 0
        for fi, fo in zip(widths[:-1], widths[1:]):
            w_sl = slice(offset, offset + fi * fo)
            b_sl = slice(offset + fi * fo, offset + (fi + 1) * fo)
            slices.append((w_sl, b_sl, (fi, fo)))
            offset += (fi + 1) * fo
        object.__setattr__(self, "_slices", tuple(slices))
        object.__setattr__(self, "_count", offset)

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        """Number of affine maps."""
        return len(self.layer_widths) - 1

    @property
    def param_count(self) -> int:
        return self._count

    def layer_slices(self):
        """Per layer: (weight slice, bias slice, (fan_in, fan_out)) into the flat vector."""
        return self._slices


def _check_params(spec: NetSpec, params) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.param_count,):
        raise ValueError(
            f"parameter vector has shape {params.shape}, expected ({spec.param_count},)"
        )
    return params


def pack_layers(spec: NetSpec, layers) -> np.ndarray:
    """Build a flat parameter vector from [(W, b), ...] arrays."""
    if len(layers) != spec.n_layers:
        raise ValueError(f"expected {spec.n_layers} layers, got {len(layers)}")
    params = np.zeros(spec.param_count)
    for (w_sl, b_sl, (fi, fo)), (w, b) in zip(spec.layer_slices(), layers):
        w = np.asarray(w, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if w.shape != (fi, fo) or b.shape != (fo,):
            raise ValueError(f"layer shapes {w.shape}/{b.shape} do not match ({fi},{fo})")
        params[w_sl] = w.ravel()
        params[b_sl] = b
    return params


def layer_arrays(spec: NetSpec, params):
    """Inverse of :func:`pack_layers`: views [(W, b), ...] into the flat vector."""
    params = _check_params(spec, params)
    return [
        (params[w_sl].reshape(fi, fo), params[b_sl])
        for w_sl, b_sl, (fi, fo) in spec.layer_slices()
    ]


def init_params(spec: NetSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform fan-scaled weight init (+/- sqrt(6/(fan_in+fan_out))), zero biases."""
    params = np.zeros(spec.param_count)
    for w_sl, _, (fi, fo) in spec.layer_slices():
        bound = np.sqrt(6.0 / (fi + fo))
        params[w_sl] = rng.uniform(-bound, bound, size=fi * fo)
    return params


def init_gaussian_means(spec: NetSpec, rng: np.random.Generator) -> np.ndarray:
    """Gaussian weight init with per-layer scale 1/sqrt(fan_in+1); used for
    posterior means of variational nets. Biases start at zero."""
    params = np.zeros(spec.param_count)
    for w_sl, _, (fi, fo) in spec.layer_slices():
        params[w_sl] = rng.normal(0.0, 1.0 / np.sqrt(fi + 1), size=fi * fo)
    return params


def forward_batch(spec: NetSpec, params, inputs) -> np.ndarray:
    """Evaluate the net on a (batch, in_width) array -> (batch, out_width)."""
    params = _check_params(spec, params)
    h = np.asarray(inputs, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != spec.in_width:
        raise ValueError(f"inputs have shape {h.shape}, expected (batch, {spec.in_width})")
    last = spec.n_layers - 1
    for i, (w_sl, b_sl, (fi, fo)) in enumerate(spec.layer_slices()):
        h = h @ params[w_sl].reshape(fi, fo) + params[b_sl]
        if i != last:
            h = np.maximum(h, 0.0)
    return h


def forward(spec: NetSpec, params, x) -> np.ndarray:
    """Evaluate the net on a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.in_width,):
        raise ValueError(f"input has shape {x.shape}, expected ({spec.in_width},)")
    return forward_batch(spec, params, x[None, :])[0]


def backward_batch(spec: NetSpec, params, inputs, out_grads):
    """Reverse-mode gradients for a batch.

    Returns (param_grad, input_grads): the gradient of
    sum_b out_grads[b] . net(inputs[b]) with respect to the flat parameters
    (summed over the batch) and with respect to each input row.
    """
    params = _check_params(spec, params)
    x = np.asarray(inputs, dtype=np.float64)
    g = np.asarray(out_grads, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.in_width:
        raise ValueError(f"inputs have shape {x.shape}, expected (batch, {spec.in_width})")
    if g.shape != (x.shape[0], spec.out_width):
        raise ValueError(
            f"out_grads have shape {g.shape}, expected ({x.shape[0]}, {spec.out_width})"
        )

    slices = spec.layer_slices()
    last = spec.n_layers - 1
    # Forward trace: post-activation inputs to each layer, pre-activations of hidden layers.
    hs = [x]
    zs = []
    h = x
    for i, (w_sl, b_sl, (fi, fo)) in enumerate(slices):
        z = h @ params[w_sl].reshape(fi, fo) + params[b_sl]
        if i != last:
            zs.append(z)
            h = np.maximum(z, 0.0)
            hs.append(h)

    grad = np.zeros_like(params)
    for i in range(last, -1, -1):
        w_sl, b_sl, (fi, fo) = slices[i]
        h_prev = hs[i]
        grad[w_sl] = (h_prev.T @ g).ravel()
        grad[b_sl] = g.sum(axis=0)
        g = g @ params[w_sl].reshape(fi, fo).T
        if i > 0:
            g = g * (zs[i - 1] > 0.0)
    return grad, g


def backward(spec: NetSpec, params, x, out_grad):
    """Single-input gradients: (param_grad, input_grad)."""
    x = np.asarray(x, dtype=np.float64)
    out_grad = np.asarray(out_grad, dtype=np.float64)
    if x.shape != (spec.in_width,):
        raise ValueError(f"input has shape {x.shape}, expected ({spec.in_width},)")
    if out_grad.shape != (spec.out_width,):
        raise ValueError(f"out_grad has shape {out_grad.shape}, expected ({spec.out_width},)")
    grad, in_grads = backward_batch(spec, params, x[None, :], out_grad[None, :])
    return grad, in_grads[0]


@dataclass(frozen=True)
class AdamState:
    """Adam accumulator; step_count increments by exactly one per update."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def init(cls, n: int, learning_rate: float, beta1: float = 0.9,
             beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        if learning_rate <= 0 or epsilon <= 0:
            raise ValueError("learning_rate and epsilon must be positive")
        return cls(np.zeros(n), np.zeros(n), 0, learning_rate, beta1, beta2, epsilon)


def adam_step(state: AdamState, params, gradient):
    """One bias-corrected Adam update. Returns (new_params, new_state)."""
    params = np.asarray(params, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != params.shape:
        raise ValueError(f"gradient shape {gradient.shape} != params shape {params.shape}")
    bad = np.flatnonzero(~np.isfinite(gradient))
    if bad.size:
        raise NumericalError(f"non-finite gradient entry at index {bad[0]}")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * gradient
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * gradient ** 2
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, replace(state, first_moment=m, second_moment=v, step_count=t)


def clip_gradient_l2(gradient, max_norm: float):
    """Rescale so the L2 norm is at most max_norm; direction is preserved."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    gradient = np.asarray(gradient, dtype=np.float64)
    norm = float(np.linalg.norm(gradient))
    if norm <= max_norm:
        return gradient
    return gradient * (max_norm / norm)


def save_params(base, spec: NetSpec, params, extra: dict | None = None) -> None:
    """Write `<base>.json` (header) plus `<base>.bin` (little-endian float64).

    The round trip through :func:`load_params` is bit-exact.
    """
    params = _check_params(spec, params)
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "schema": "net-params-v1",
        "layer_widths": list(spec.layer_widths),
        "count": spec.param_count,
    }
    if extra:
        header.update(extra)
    Path(str(base) + ".json").write_text(json.dumps(header, indent=2, sort_keys=True))
    params.astype("<f8").tofile(str(base) + ".bin")


def load_params(base):
    """Read a checkpoint written by :func:`save_params` -> (spec, params, header)."""
    header = json.loads(Path(str(base) + ".json").read_text())
    spec = NetSpec(tuple(header["layer_widths"]))
    params = np.fromfile(str(base) + ".bin", dtype="<f8").astype(np.float64)
    if header["count"] != spec.param_count or params.shape != (spec.param_count,):
        raise ValueError(f"corrupt checkpoint at {base}: expected {spec.param_count} values")
    return spec, params, header
