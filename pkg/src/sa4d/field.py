"""Temporal identity feature field: fourier positional encoding, a 3-layer
ReLU MLP producing 32-dim identity encodings from (canonical position, time),
a per-pixel affine classifier over 256 identity classes, and Adam.

All math is plain float64 numpy with hand-derived backprop; no autograd.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

ENCODING_DIM = 32
NUM_CLASSES = 256
HIDDEN_WIDTH = 256
DEFAULT_LX = 10
DEFAULT_LT = 6
DEFAULT_LR = 5e-4

CHECKPOINT_MAGIC = b"SA4D"
CHECKPOINT_VERSION = 1


class FieldNumericalError(RuntimeError):
    """Raised when parameters or activations become non-finite."""


@dataclass(frozen=True)
class PositionalEncodingConfig:
    l_x: int = DEFAULT_LX
    l_t: int = DEFAULT_LT
    zero_time: bool = False  # ablation: zero the time encoding (static field)

    @property
    def input_dim(self) -> int:
        return 6 * self.l_x + 2 * self.l_t


def encode_scalar(v: np.ndarray, n_freq: int) -> np.ndarray:
    """(sin(2^k pi v), cos(2^k pi v)) for k < n_freq, per input component.

    v has shape (..., C); output shape (..., C * 2 * n_freq) with the
    component as the outer loop and the frequency as the inner one.
    """
    v = np.asarray(v, dtype=float)
    if n_freq == 0:
        return np.zeros(v.shape[:-1] + (0,))
    freqs = (2.0 ** np.arange(n_freq)) * np.pi
    phase = v[..., :, None] * freqs                     # (..., C, L)
    enc = np.stack([np.sin(phase), np.cos(phase)], axis=-1)  # (..., C, L, 2)
    return enc.reshape(v.shape[:-1] + (-1,))


def encode(x: np.ndarray, t: float, cfg: PositionalEncodingConfig) -> np.ndarray:
    """Concatenated positional encoding of positions (N, 3) and scalar time."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    ex = encode_scalar(x, cfg.l_x)
    et = encode_scalar(np.full((x.shape[0], 1), float(t)), cfg.l_t)
    if cfg.zero_time:
        et = np.zeros_like(et)
    return np.concatenate([ex, et], axis=1)


PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4", "wc", "bc")


@dataclass
class IdentityFieldParams:
    """MLP weights (3 hidden ReLU layers of 256, output 32) plus the
    32 -> 256 per-pixel affine classifier."""

    cfg: PositionalEncodingConfig
    weights: dict  # name -> ndarray, keys PARAM_NAMES

    @staticmethod
    def init(cfg: PositionalEncodingConfig = None, seed: int = 0) -> "IdentityFieldParams":
        cfg = cfg or PositionalEncodingConfig()
        rng = np.random.Generator(np.random.Philox(seed))

        def glorot(fan_in, fan_out, gain=1.0):
            bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, size=(fan_out, fan_in))

        d_in = cfg.input_dim
        weights = {
            "w1": glorot(d_in, HIDDEN_WIDTH), "b1": np.zeros(HIDDEN_WIDTH),
            "w2": glorot(HIDDEN_WIDTH, HIDDEN_WIDTH), "b2": np.zeros(HIDDEN_WIDTH),
            "w3": glorot(HIDDEN_WIDTH, HIDDEN_WIDTH), "b3": np.zeros(HIDDEN_WIDTH),
            # output layer scaled down so class probabilities start near uniform
            "w4": glorot(HIDDEN_WIDTH, ENCODING_DIM, gain=0.1), "b4": np.zeros(ENCODING_DIM),
            "wc": glorot(ENCODING_DIM, NUM_CLASSES, gain=0.1), "bc": np.zeros(NUM_CLASSES),
        }
        return IdentityFieldParams(cfg=cfg, weights=weights)

    def copy(self) -> "IdentityFieldParams":
        return IdentityFieldParams(cfg=self.cfg,
                                   weights={k: v.copy() for k, v in self.weights.items()})

    def check_finite(self):
        for name, w in self.weights.items():
            if not np.all(np.isfinite(w)):
                raise FieldNumericalError(f"non-finite values in parameter {name}")


@dataclass
class FieldActivations:
    """Intermediates retained by field_forward for the backward pass."""

    z: np.ndarray    # encoded input (N, d_in)
    h1: np.ndarray
    h2: np.ndarray
    h3: np.ndarray


def field_forward(params: IdentityFieldParams, positions: np.ndarray, t: float,
                  return_activations: bool = False):
    """Per-Gaussian 32-dim identity encodings e_i = MLP(encode(x_i, t))."""
    params.check_finite()
    w = params.weights
    z = encode(positions, t, params.cfg)
    h1 = np.maximum(0.0, z @ w["w1"].T + w["b1"])
    h2 = np.maximum(0.0, h1 @ w["w2"].T + w["b2"])
    h3 = np.maximum(0.0, h2 @ w["w3"].T + w["b3"])
    e = h3 @ w["w4"].T + w["b4"]
    if not np.all(np.isfinite(e)):
        raise FieldNumericalError("non-finite identity encodings")
    if return_activations:
        return e, FieldActivations(z=z, h1=h1, h2=h2, h3=h3)
    return e


def field_backward(params: IdentityFieldParams, acts: FieldActivations,
                   grad_e: np.ndarray) -> dict:
    """Gradients of a scalar loss w.r.t. every MLP weight given dL/de."""
    w = params.weights
    grads = {}
    grads["w4"] = grad_e.T @ acts.h3
    grads["b4"] = grad_e.sum(axis=0)
    g3 = (grad_e @ w["w4"]) * (acts.h3 > 0)
    grads["w3"] = g3.T @ acts.h2
    grads["b3"] = g3.sum(axis=0)
    g2 = (g3 @ w["w3"]) * (acts.h2 > 0)
    grads["w2"] = g2.T @ acts.h1
    grads["b2"] = g2.sum(axis=0)
    g1 = (g2 @ w["w2"]) * (acts.h1 > 0)
    grads["w1"] = g1.T @ acts.z
    grads["b1"] = g1.sum(axis=0)
    return grads


def classifier_logits(params: IdentityFieldParams, features: np.ndarray) -> np.ndarray:
    """Affine 32 -> 256 map applied along the last axis (pixels or Gaussians)."""
    w = params.weights
    return features @ w["wc"].T + w["bc"]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def classify(params: IdentityFieldParams, features: np.ndarray) -> np.ndarray:
    """Per-row class probabilities f = softmax(affine(feature))."""
    return softmax(classifier_logits(params, features))


@dataclass
class AdamState:
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @staticmethod
    def init(params: IdentityFieldParams, lr: float = DEFAULT_LR) -> "AdamState":
        return AdamState(lr=lr,
                         m={k: np.zeros_like(w) for k, w in params.weights.items()},
                         v={k: np.zeros_like(w) for k, w in params.weights.items()})


def adam_step(params: IdentityFieldParams, grads: dict, state: AdamState):
    """One bias-corrected Adam update, in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, w in params.weights.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name} shape {w.shape}")
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        w -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# --- checkpoint I/O ----------------------------------------------------------

class CheckpointError(ValueError):
    """Raised on bad magic, version, or truncated checkpoint files."""


def save_checkpoint(path, params: IdentityFieldParams, state: AdamState = None):
    """Versioned little-endian binary: header, float64 weights, Adam state."""
    w = params.weights
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIII", CHECKPOINT_VERSION, params.cfg.l_x,
                             params.cfg.l_t, 1 if params.cfg.zero_time else 0))
        fh.write(struct.pack("<I", len(PARAM_NAMES)))
        for name in PARAM_NAMES:
            shape = w[name].shape
            fh.write(struct.pack("<II", len(shape), 0))
            fh.write(struct.pack(f"<{len(shape)}I", *shape))
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(w[name], dtype="<f8").tobytes())
        has_state = state is not None
        fh.write(struct.pack("<I", 1 if has_state else 0))
        if has_state:
            fh.write(struct.pack("<Qdddd", state.step, state.lr, state.beta1,
                                 state.beta2, state.eps))
            for name in PARAM_NAMES:
                fh.write(np.ascontiguousarray(state.m[name], dtype="<f8").tobytes())
            for name in PARAM_NAMES:
                fh.write(np.ascontiguousarray(state.v[name], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (params, adam_state_or_None)."""
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError("truncated checkpoint file")
        chunk = data[off:off + n]
        off += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, l_x, l_t, zero_time = struct.unpack("<IIII", take(16))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_params,) = struct.unpack("<I", take(4))
    if n_params != len(PARAM_NAMES):
        raise CheckpointError("unexpected parameter count")
    shapes = []
    for _ in range(n_params):
        ndim, _pad = struct.unpack("<II", take(8))
        shapes.append(struct.unpack(f"<{ndim}I", take(4 * ndim)))

    def read_arrays():
        out = {}
        for name, shape in zip(PARAM_NAMES, shapes):
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
            out[name] = arr
        return out

    cfg = PositionalEncodingConfig(l_x=l_x, l_t=l_t, zero_time=bool(zero_time))
    params = IdentityFieldParams(cfg=cfg, weights=read_arrays())
    (has_state,) = struct.unpack("<I", take(4))
    state = None
    if has_state:
        step, lr, b1, b2, eps = struct.unpack("<Qdddd", take(40))
        state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step,
                          m=read_arrays(), v=read_arrays())
    return params, state
