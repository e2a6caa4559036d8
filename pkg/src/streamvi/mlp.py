"""Small dense networks with hand-rolled backward passes.

Hidden layers use tanh (or relu); the last layer is linear.  Besides the
plain forward pass, the module provides the three backward variants the
estimators need:

- ``vjp_params``: gradient of <cot, f(x)> in the parameters, one input;
- ``vjp_params_batched``: per-sample parameter gradients for a batch of
  inputs with per-sample output cotangents (each row is an independent
  gradient, nothing is summed over the batch);
- ``rows_backward``: full Jacobian rows of the output w.r.t. parameters
  and input, for chaining into recurrent backpropagation.

Weights are stored (out, in); forward computes W x + b.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MLPParams:
    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        for i in range(len(self.layers) - 1):
            w_next = self.layers[i + 1][0]
            w_cur = self.layers[i][0]
            if w_next.shape[1] != w_cur.shape[0]:
                raise ValueError("consecutive layer shapes do not chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def pack(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    def unpack(self, flat: np.ndarray) -> "MLPParams":
        layers = []
        off = 0
        for w, b in self.layers:
            nw, nb = w.size, b.size
            layers.append(
                (flat[off:off + nw].reshape(w.shape).copy(), flat[off + nw:off + nw + nb].copy())
            )
            off += nw + nb
        assert off == flat.size
        return MLPParams(layers=layers, activation=self.activation)


def init_mlp(rng: np.random.Generator, sizes: list[int], scale: float = 1.0,
             activation: str = "tanh") -> MLPParams:
    """Random init with std scale/sqrt(fan_in) weights and zero biases."""
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.standard_normal((fan_out, fan_in)) * (scale / np.sqrt(fan_in))
        layers.append((w, np.zeros(fan_out)))
    return MLPParams(layers=layers, activation=activation)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _act_deriv_from_out(a: np.ndarray, kind: str) -> np.ndarray:
    # both tanh' and relu' are recoverable from the post-activation value
    return 1.0 - a * a if kind == "tanh" else (a > 0.0).astype(np.float64)


def forward(params: MLPParams, x: np.ndarray) -> np.ndarray:
    """Apply the network; x may be (in,) or (n, in)."""
    out, _ = forward_cached(params, x)
    return out


def forward_cached(params: MLPParams, x: np.ndarray):
    """Forward pass returning (output, per-layer input activations)."""
    x = np.asarray(x, dtype=np.float64)
    acts = [x]
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        z = h @ w.T + b
        h = z if i == last else _act(z, params.activation)
        acts.append(h)
    return h, acts


def vjp_params(params: MLPParams, x: np.ndarray, cot: np.ndarray,
               acts=None) -> np.ndarray:
    """Flat gradient of <cot, f(x)> w.r.t. the parameters (single input)."""
    g = vjp_params_batched(params, np.asarray(x)[None, :], np.asarray(cot)[None, :],
                           acts=None if acts is None else acts)
    return g[0]


def vjp_params_batched(params: MLPParams, xs: np.ndarray | None, cots: np.ndarray,
                       acts=None) -> np.ndarray:
    """Per-sample parameter gradients; xs (n, in), cots (n, out) -> (n, n_params).

    xs may be None when cached activations are supplied.
    """
    if acts is None:
        _, acts = forward_cached(params, xs)
    n = cots.shape[0]
    grads = [None] * len(params.layers)
    delta = np.asarray(cots, dtype=np.float64)
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        a_in = acts[i]
        gw = np.einsum("no,ni->noi", delta, a_in)
        grads[i] = (gw.reshape(n, -1), delta)
        if i > 0:
            delta = (delta @ w) * _act_deriv_from_out(acts[i], params.activation)
    return np.concatenate([np.concatenate([gw, gb], axis=1) for gw, gb in grads], axis=1)


def vjp_params_cross(params: MLPParams, xs: np.ndarray, cots: np.ndarray) -> np.ndarray:
    """Weighted sums of per-sample gradients.

    xs (m, in), cots (k, m, out); row k of the result is
    sum_j d<cots[k,j], f(xs[j])>/d params, shape (k, n_params).
    """
    _, acts = forward_cached(params, xs)
    k = cots.shape[0]
    grads = [None] * len(params.layers)
    delta = np.asarray(cots, dtype=np.float64)
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        gw = np.einsum("kmo,mi->koi", delta, acts[i])
        gb = delta.sum(axis=1)
        grads[i] = (gw.reshape(k, -1), gb)
        if i > 0:
            delta = np.einsum("kmo,oi->kmi", delta, w) * _act_deriv_from_out(
                acts[i], params.activation)[None, :, :]
    return np.concatenate([np.concatenate([gw, gb], axis=1) for gw, gb in grads], axis=1)


def rows_backward(params: MLPParams, x: np.ndarray, acts=None):
    """All Jacobian rows at a single input.

    Returns (J_params, J_input) with shapes (out, n_params) and (out, in):
    the full Jacobians of the output w.r.t. the flat parameters and the
    input.  J_input is what chains into recurrent backpropagation.
    """
    x = np.asarray(x, dtype=np.float64)
    if acts is None:
        _, acts = forward_cached(params, x)
    out_dim = params.out_dim
    delta = np.eye(out_dim)
    grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        gw = np.einsum("ko,i->koi", delta, acts[i])
        grads[i] = (gw.reshape(out_dim, -1), delta)
        delta = (delta @ w)
        if i > 0:
            delta = delta * _act_deriv_from_out(acts[i], params.activation)[None, :]
    j_params = np.concatenate([np.concatenate([gw, gb], axis=1) for gw, gb in grads], axis=1)
    return j_params, delta
