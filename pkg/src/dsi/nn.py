"""Feedforward networks with hand-written backprop, Adam, and seeded RNG streams.

Every trained model in the package is an :class:`Mlp`: a stack of dense
layers with a shared hidden activation and a linear output layer.  When a
time embedding is configured, the sinusoidal features of the integer time
index are concatenated to the input before the first layer.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError, TrainingError

MAGIC = b"DSI1"
FORMAT_VERSION = 1

_ACTIVATIONS = ("tanh", "relu", "linear")


def rng_stream(seed, stream_id=0):
    """Counter-based generator for the ``(seed, stream_id)`` pair.

    Philox is keyed through a SeedSequence, so distinct stream ids give
    statistically independent streams and the same pair always replays
    the same draws.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, *keys):
    """Deterministic 32-bit child seed for ``(seed, *keys)``."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


def as_matrix(x, cols=None, name="x"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None] if cols in (None, 1) else x[None, :]
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.shape}")
    if cols is not None and x.shape[1] != cols:
        raise ShapeError(f"{name} has {x.shape[1]} columns, expected {cols}")
    return x


def sinusoidal_embedding(t, dim=16, max_period=10000.0):
    """Sin/cos features of integer time indices, shape ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


@dataclass
class Mlp:
    """Dense network ``W_i: (fan_in, fan_out)``; hidden activation, linear output."""

    weights: list
    biases: list
    activation: str = "tanh"
    time_dim: int = 0
    max_period: float = 10000.0

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i} fan-in does not match previous fan-out")
        if self.weights[0].shape[0] <= self.time_dim:
            raise ShapeError("first layer narrower than the time embedding")

    @classmethod
    def init(cls, layer_dims, rng, activation="tanh", time_dim=0, max_period=10000.0):
        """Glorot-style init; ``layer_dims[0]`` excludes the time embedding."""
        dims = list(layer_dims)
        dims[0] += time_dim
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            weights.append(rng.standard_normal((fan_in, fan_out)) * scale)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, activation, time_dim, max_period)

    @property
    def input_dim(self):
        return self.weights[0].shape[0] - self.time_dim

    @property
    def output_dim(self):
        return self.weights[-1].shape[1]

    @property
    def layer_dims(self):
        return [self.input_dim] + [w.shape[1] for w in self.weights]

    @property
    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def n_params(self):
        return sum(p.size for p in self.params)

    def copy(self):
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.activation, self.time_dim, self.max_period)

    def _input(self, x, t):
        x = as_matrix(x, self.input_dim)
        if not self.time_dim:
            return x
        if t is None:
            raise ShapeError("network has a time embedding; t is required")
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        return np.concatenate([x, sinusoidal_embedding(t, self.time_dim, self.max_period)], axis=1)

    def forward(self, x, t=None, return_cache=False):
        h = self._input(x, t)
        cache = [(h, None)]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else _act(self.activation, z)
            cache.append((h, z))
        if return_cache:
            return h, cache
        return h

    __call__ = forward

    def backward(self, x, grad_out, t=None, cache=None):
        """Gradients of a loss w.r.t. every parameter, in :attr:`params` order.

        ``grad_out`` is dLoss/dOutput for the batch.  Pass ``cache`` from
        ``forward(..., return_cache=True)`` to skip the recomputation.
        """
        if cache is None:
            _, cache = self.forward(x, t, return_cache=True)
        out = cache[-1][0]
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != out.shape:
            raise ShapeError(f"loss gradient {grad_out.shape} does not match output {out.shape}")
        grads = [None] * (2 * len(self.weights))
        delta = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            h_in = cache[i][0]
            grads[2 * i] = h_in.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i:
                a, z = cache[i]
                delta = (delta @ self.weights[i].T) * _act_grad(self.activation, z, a)
        return grads


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kw):
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kw)


def adam_step(state, params, grads):
    """In-place Adam update with bias correction.

    ``weight_decay`` is applied decoupled from the gradient (AdamW style).
    Params are assumed to come in (weight, bias) pairs, so the layer
    index reported on failure is ``param_index // 2``.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer moments differ in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, expected {params[i].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in layer {i // 2}", layer=i // 2, step=state.step)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p -= state.learning_rate * state.weight_decay * p
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params


# -- checkpoint block -------------------------------------------------------

def write_network(fh, net):
    """Write ``net`` in the shared binary layout (little-endian).

    Layout: magic, version u16, layer count u16, then per layer rows u32,
    cols u32, row-major f64 weights, f64 biases; followed by activation
    tag u8, time-embedding dim u16 and max period f64.
    """
    fh.write(MAGIC)
    fh.write(struct.pack("<HH", FORMAT_VERSION, len(net.weights)))
    for w, b in zip(net.weights, net.biases):
        fh.write(struct.pack("<II", *w.shape))
        fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    fh.write(struct.pack("<BHd", _ACTIVATIONS.index(net.activation), net.time_dim, net.max_period))


def _read(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint")
    return buf


def read_network(fh):
    if _read(fh, 4) != MAGIC:
        raise ValueError("not a DSI1 checkpoint")
    version, n_layers = struct.unpack("<HH", _read(fh, 4))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    weights, biases = [], []
    for _ in range(n_layers):
        rows, cols = struct.unpack("<II", _read(fh, 8))
        w = np.frombuffer(_read(fh, 8 * rows * cols), dtype="<f8").reshape(rows, cols)
        b = np.frombuffer(_read(fh, 8 * cols), dtype="<f8")
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    act, time_dim, max_period = struct.unpack("<BHd", _read(fh, 11))
    return Mlp(weights, biases, _ACTIVATIONS[act], time_dim, max_period)
