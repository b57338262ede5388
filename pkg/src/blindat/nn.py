"""Dense feed-forward networks with hand-written reverse-mode gradients.

Everything is float64. A :class:`Model` is an immutable tuple of layers; the
optimizer helpers return new models instead of mutating in place, so a model
can be handed to an attack or an evaluator without defensive copies.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("sigmoid", "relu", "identity")
LOSS_KINDS = ("squared-error", "cross-entropy")


class ShapeError(ValueError):
    """Raised when an array does not fit the layer it is fed to."""


def sigmoid(z):
    # split by sign so neither branch overflows
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(kind, z):
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(kind, z, a):
    if kind == "sigmoid":
        return a * (1.0 - a)
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


@dataclass(frozen=True)
class Layer:
    W: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ShapeError(f"weight {self.W.shape} and bias {self.b.shape} do not compose")


@dataclass(frozen=True)
class Model:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        for i in range(1, len(self.layers)):
            prev, cur = self.layers[i - 1], self.layers[i]
            if prev.W.shape[1] != cur.W.shape[0]:
                raise ShapeError(
                    f"layer {i} expects {cur.W.shape[0]} inputs but layer {i - 1} "
                    f"produces {prev.W.shape[1]}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].W.shape[1]

    @property
    def n_classes(self) -> int:
        # one sigmoid unit is a binary classifier
        return 2 if self.output_dim == 1 else self.output_dim

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.W, layer.b))
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "Model":
        if len(params) != 2 * len(self.layers):
            raise ValueError("parameter count does not match the layer count")
        layers = []
        for i, layer in enumerate(self.layers):
            W, b = params[2 * i], params[2 * i + 1]
            if W.shape != layer.W.shape or b.shape != layer.b.shape:
                raise ShapeError(f"parameter shape mismatch in layer {i}")
            layers.append(Layer(np.asarray(W, np.float64), np.asarray(b, np.float64), layer.activation))
        return Model(tuple(layers))

    def describe(self) -> str:
        sizes = [self.input_dim] + [l.W.shape[1] for l in self.layers]
        acts = ",".join(l.activation for l in self.layers)
        return f"{'-'.join(map(str, sizes))} [{acts}]"


def init_model(sizes: Sequence[int], activations: Sequence[str], rng) -> Model:
    """Glorot-uniform weights, zero biases. ``sizes`` includes the input width."""
    if len(activations) != len(sizes) - 1:
        raise ValueError("need one activation per layer")
    rng = np.random.default_rng(rng)
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append(Layer(W, np.zeros(fan_out), act))
    return Model(tuple(layers))


def _check_batch(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"layer 0 expects batches of shape (n, {model.input_dim}), got {x.shape}")
    return x


def _forward_cache(model: Model, x):
    pres, posts = [], [x]
    a = x
    for layer in model.layers:
        z = a @ layer.W + layer.b
        a = _activate(layer.activation, z)
        pres.append(z)
        posts.append(a)
    return pres, posts


def forward(model: Model, x) -> np.ndarray:
    """Network output for a batch ``x`` of shape (n, input_dim)."""
    x = _check_batch(model, x)
    return _forward_cache(model, x)[1][-1]


def scores(model: Model, x) -> np.ndarray:
    """Per-class scores before the output squashing, shape (n, n_classes).

    A single sigmoid output z is expanded to the two-class scores (-z, z), so
    index 1 wins exactly when the sigmoid exceeds 1/2.
    """
    x = _check_batch(model, x)
    z = _forward_cache(model, x)[0][-1]
    if model.output_dim == 1:
        return np.concatenate([-z, z], axis=1)
    return z


def predict(model: Model, x) -> np.ndarray:
    return np.argmax(scores(model, x), axis=1)


def accuracy(model: Model, x, y) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(predict(model, x) == labels_of(y)))


def labels_of(y) -> np.ndarray:
    """Integer class labels from integer or one-hot/probability targets."""
    y = np.asarray(y)
    if y.ndim == 2 and y.shape[1] > 1:
        return np.argmax(y, axis=1)
    return np.rint(y.reshape(len(y))).astype(np.int64)


def _backward(model: Model, pres, posts, dout):
    """Pull ``dout`` (dL/d output) back through the network."""
    grads = [None] * (2 * len(model.layers))
    g = dout
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        g = g * _activation_grad(layer.activation, pres[i], posts[i + 1])
        grads[2 * i] = posts[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ layer.W.T
    return grads, g


def score_jacobian(model: Model, x) -> tuple[np.ndarray, np.ndarray]:
    """Scores (n, k) and their input gradients (k, n, d) in one sweep."""
    x = _check_batch(model, x)
    pres, posts = _forward_cache(model, x)
    n = x.shape[0]
    k_out = model.output_dim
    # seed every output unit at once; the leading axis indexes the unit
    g = np.broadcast_to(np.eye(k_out)[:, None, :], (k_out, n, k_out)).copy()
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if i < len(model.layers) - 1:
            g = g * _activation_grad(layer.activation, pres[i], posts[i + 1])
        g = g @ layer.W.T
    z = pres[-1]
    if k_out == 1:
        return np.concatenate([-z, z], axis=1), np.concatenate([-g, g], axis=0)
    return z, g


# ---------------------------------------------------------------- losses


@dataclass(frozen=True)
class LossSpec:
    kind: str = "cross-entropy"
    label_smoothing: float = 0.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise ValueError("label_smoothing must lie in [0, 0.5)")
        if self.kind == "squared-error" and self.label_smoothing != 0.0:
            raise ValueError("label smoothing only applies to cross-entropy")


def default_loss(model: Model) -> LossSpec:
    if model.output_dim == 1:
        return LossSpec("squared-error")
    return LossSpec("cross-entropy")


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def target_matrix(targets, width: int, spec: LossSpec) -> np.ndarray:
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim == 1:
        if spec.kind == "cross-entropy" or width > 1:
            t = np.eye(width)[t.astype(np.int64)]
        else:
            t = t[:, None]
    if spec.kind == "cross-entropy" and spec.label_smoothing:
        t = (1.0 - spec.label_smoothing) * t + spec.label_smoothing / width
    return t


def _loss_and_dout(outputs, targets, spec: LossSpec):
    outputs = np.asarray(outputs, dtype=np.float64)
    t = target_matrix(targets, outputs.shape[1], spec)
    if t.shape != outputs.shape:
        raise ShapeError(f"targets {t.shape} do not match outputs {outputs.shape}")
    n = outputs.shape[0]
    if spec.kind == "squared-error":
        r = outputs - t
        return float(np.sum(r * r) / n), 2.0 * r / n
    z = outputs - outputs.max(axis=1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    loss = float(-np.sum(t * logp) / n)
    return loss, (np.exp(logp) - t) / n


def loss_value(outputs, targets, spec: LossSpec) -> float:
    """Mean loss over the batch.

    For ``squared-error`` the outputs are the network outputs themselves and
    the per-example loss is the squared residual summed over units; for
    ``cross-entropy`` they are logits fed through a softmax.
    """
    return _loss_and_dout(outputs, targets, spec)[0]


def _check_loss_model(model: Model, spec: LossSpec):
    last = model.layers[-1].activation
    if spec.kind == "cross-entropy" and last != "identity":
        raise ValueError("cross-entropy expects an identity output layer (softmax is in the loss)")


def loss_and_grads(model: Model, x, targets, spec: LossSpec):
    """Loss, parameter gradients and input gradient from one backward pass."""
    x = _check_batch(model, x)
    _check_loss_model(model, spec)
    pres, posts = _forward_cache(model, x)
    loss, dout = _loss_and_dout(posts[-1], targets, spec)
    grads, gx = _backward(model, pres, posts, dout)
    return loss, grads, gx


def grad_params(model: Model, x, targets, spec: LossSpec) -> list[np.ndarray]:
    return loss_and_grads(model, x, targets, spec)[1]


def grad_input(model: Model, x, targets, spec: LossSpec) -> np.ndarray:
    """Gradient of the *mean* batch loss with respect to each input row."""
    return loss_and_grads(model, x, targets, spec)[2]


def model_loss(model: Model, x, targets, spec: LossSpec) -> float:
    _check_loss_model(model, spec)
    return loss_value(forward(model, x), targets, spec)


def finite_diff_check(model: Model, x, targets, spec: LossSpec, h: float = 1e-6) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    Covers every parameter entry and every input entry.
    """
    if not 1e-8 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-8, 1e-3]")
    x = _check_batch(model, x).copy()
    _, grads, gx = loss_and_grads(model, x, targets, spec)
    worst = 0.0
    params = [p.copy() for p in model.params()]
    for pi, p in enumerate(params):
        flat = p.reshape(-1)
        gflat = grads[pi].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = model_loss(model.with_params(params), x, targets, spec)
            flat[j] = orig - h
            down = model_loss(model.with_params(params), x, targets, spec)
            flat[j] = orig
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(gflat[j] - fd) / (abs(gflat[j]) + 1e-12))
    flat = x.reshape(-1)
    gflat = gx.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        up = model_loss(model, x, targets, spec)
        flat[j] = orig - h
        down = model_loss(model, x, targets, spec)
        flat[j] = orig
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(gflat[j] - fd) / (abs(gflat[j]) + 1e-12))
    return worst


# ------------------------------------------------------------- optimizers


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def _check_finite(grads):
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {i} (layer {i // 2})")


def adam_step(model: Model, grads, state: OptimizerState):
    """One bias-corrected Adam update. Returns ``(new_model, new_state)``."""
    _check_finite(grads)
    params = model.params()
    if len(grads) != len(params):
        raise ValueError("gradient list does not match the parameters")
    m = state.m or [np.zeros_like(p) for p in params]
    v = state.v or [np.zeros_like(p) for p in params]
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} vs parameter {p.shape}")
        mi = b1 * mi + (1.0 - b1) * g
        vi = b2 * vi + (1.0 - b2) * (g * g)
        m_hat = mi / (1.0 - b1**t)
        v_hat = vi / (1.0 - b2**t)
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(mi)
        new_v.append(vi)
    new_state = OptimizerState(state.lr, b1, b2, state.eps, t, new_m, new_v)
    return model.with_params(new_params), new_state


def sgd_step(model: Model, grads, state: OptimizerState):
    """Plain step ``theta - lr * grad``; the state only counts steps."""
    _check_finite(grads)
    new_params = [p - state.lr * g for p, g in zip(model.params(), grads)]
    new_state = OptimizerState(state.lr, state.beta1, state.beta2, state.eps, state.step + 1)
    return model.with_params(new_params), new_state


# ------------------------------------------------------------ checkpoints

CHECKPOINT_MAGIC = b"BATM"
CHECKPOINT_VERSION = 1
_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}


def save_model(model: Model, path) -> None:
    """Flat little-endian checkpoint.

    Layout: magic ``BATM``, uint32 version, uint32 layer count, uint32 input
    width, then per layer uint32 output width and uint32 activation code,
    then every W (row-major) and b as float64 in declaration order.
    """
    header = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, len(model.layers), model.input_dim)]
    for layer in model.layers:
        header.append(struct.pack("<II", layer.W.shape[1], _ACT_CODES[layer.activation]))
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params())
    Path(path).write_bytes(b"".join(header) + payload)


def load_model(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, n_layers, width = struct.unpack_from("<III", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    dims, acts = [width], []
    for _ in range(n_layers):
        out, code = struct.unpack_from("<II", raw, off)
        off += 8
        dims.append(out)
        acts.append(ACTIVATIONS[code])
    layers = []
    for i in range(n_layers):
        nw = dims[i] * dims[i + 1]
        W = np.frombuffer(raw, dtype="<f8", count=nw, offset=off).reshape(dims[i], dims[i + 1])
        off += 8 * nw
        b = np.frombuffer(raw, dtype="<f8", count=dims[i + 1], offset=off)
        off += 8 * dims[i + 1]
        layers.append(Layer(W.astype(np.float64), b.astype(np.float64), acts[i]))
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after payload")
    return Model(tuple(layers))
