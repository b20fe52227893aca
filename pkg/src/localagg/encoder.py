"""Small feedforward encoder with hand-written backprop and SGD with momentum.

Hidden layers are affine followed by a rectifier; the output layer is
affine only. Everything is float64. Inputs may be a single vector or a
(B, input_dim) batch; parameter gradients are summed over the batch.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .errors import DimensionMismatchError, FormatError

MAGIC = b"LAEN"
VERSION = 1


@dataclass
class EncoderParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionMismatchError("need one bias per weight matrix and at least one layer")
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionMismatchError(f"layer {li}: weight {w.shape} and bias {b.shape} disagree")
            if li and w.shape[1] != self.weights[li - 1].shape[0]:
                raise DimensionMismatchError(f"layer {li} input width {w.shape[1]} does not chain")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        """Weights and biases interleaved; the order matches gradient lists."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "EncoderParams":
        return EncoderParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def save(self, path: str | os.PathLike) -> None:
        save_encoder(self, path)


@dataclass
class Grads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_params(sizes: list[int], seed: int) -> EncoderParams:
    """Fan-in scaled uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return EncoderParams(weights, biases)


def forward(params: EncoderParams, x):
    """Return the raw output ``z`` and a cache of (inputs, pre-activations) per layer."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != params.input_dim:
        raise DimensionMismatchError(f"input has width {h.shape[1]}, encoder expects {params.input_dim}")
    cache = []
    last = len(params.weights) - 1
    for li, (w, b) in enumerate(zip(params.weights, params.biases)):
        pre = h @ w.T + b
        cache.append((h, pre))
        h = pre if li == last else np.maximum(pre, 0.0)
    return (h[0] if single else h), {"cache": cache, "single": single}


def backward(params: EncoderParams, cache, g_z) -> Grads:
    layers = cache["cache"]
    g = np.atleast_2d(np.asarray(g_z, dtype=np.float64))
    if g.shape != layers[-1][1].shape:
        raise DimensionMismatchError(f"output gradient {g.shape} does not match forward output {layers[-1][1].shape}")
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for li in range(len(params.weights) - 1, -1, -1):
        h_in, pre = layers[li]
        if li != len(params.weights) - 1:
            g = g * (pre > 0.0)
        gw[li] = g.T @ h_in
        gb[li] = g.sum(axis=0)
        if li:
            g = g @ params.weights[li]
    return Grads(gw, gb)


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr < 0 or not 0.0 <= self.momentum < 1.0 or self.weight_decay < 0:
            raise ValueError("need lr >= 0, momentum in [0, 1), weight_decay >= 0")


def sgd_step(params: EncoderParams, grads: Grads, state: OptimizerState) -> EncoderParams:
    """In-place momentum step; decay ``2 * weight_decay * w`` is added for weights only."""
    if not state.velocity:
        state.velocity = [np.zeros_like(a) for a in params.arrays()]
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if len(p_arrays) != len(g_arrays) or any(p.shape != g.shape for p, g in zip(p_arrays, g_arrays)):
        raise DimensionMismatchError("gradient shapes do not match parameters")
    for j, (p, g, vel) in enumerate(zip(p_arrays, g_arrays, state.velocity)):
        step = g
        if j % 2 == 0 and state.weight_decay:
            step = g + 2.0 * state.weight_decay * p
        vel *= state.momentum
        vel += step
        p -= state.lr * vel
    return params


def save_encoder(params: EncoderParams, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        binio.write_header(fh, MAGIC, VERSION)
        binio.write_u32(fh, len(params.weights))
        for w, b in zip(params.weights, params.biases):
            binio.write_u32(fh, w.shape[0], w.shape[1])
            binio.write_array(fh, w, "<f4")
            binio.write_array(fh, b, "<f4")


def load_encoder(path: str | os.PathLike) -> EncoderParams:
    with open(path, "rb") as fh:
        binio.read_header(fh, MAGIC, VERSION)
        count = binio.read_u32(fh)
        weights, biases = [], []
        for _ in range(count):
            out_dim = binio.read_u32(fh)
            in_dim = binio.read_u32(fh)
            weights.append(binio.read_array(fh, out_dim * in_dim, "<f4").reshape(out_dim, in_dim).astype(np.float64))
            biases.append(binio.read_array(fh, out_dim, "<f4").astype(np.float64))
        binio.expect_eof(fh)
    try:
        return EncoderParams(weights, biases)
    except DimensionMismatchError as exc:
        raise FormatError(str(exc)) from exc


def round_to_f32(params: EncoderParams) -> EncoderParams:
    """Copy with every value rounded through float32, matching a save/load round trip."""
    return EncoderParams(
        [w.astype(np.float32).astype(np.float64) for w in params.weights],
        [b.astype(np.float32).astype(np.float64) for b in params.biases],
    )
