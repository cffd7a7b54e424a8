"""A small ReLU MLP with softmax output, hand-written backprop, the loss
family used for LLP training, mixup and Adam."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

PROB_FLOOR = 1e-7
RCE_LOG_ZERO = -4.0
CHECKPOINT_MAGIC = b"PLOT"
CHECKPOINT_VERSION = 1


class MlpClassifier:
    """Fully connected ReLU network ending in a softmax.

    ``layer_dims`` lists the input width, hidden widths and the number of
    classes. Weights are He-uniform, biases zero.
    """

    def __init__(self, layer_dims, seed: int = 0):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or min(layer_dims) < 1:
            raise ValueError(f"invalid layer_dims {layer_dims}")
        self.layer_dims = layer_dims
        rng = np.random.default_rng(seed)
        self.params = []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            limit = np.sqrt(6.0 / fan_in)
            self.params.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    def param_names(self):
        names = []
        for layer in range(self.num_layers):
            names += [f"layer{layer}.weight", f"layer{layer}.bias"]
        return names

    def copy(self) -> MlpClassifier:
        clone = object.__new__(MlpClassifier)
        clone.layer_dims = list(self.layer_dims)
        clone.params = [p.copy() for p in self.params]
        return clone

    def _check_input(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.layer_dims[0]:
            raise ValueError(f"expected inputs of shape (N, {self.layer_dims[0]}), got {X.shape}")
        return X

    def forward_with_cache(self, X):
        X = self._check_input(X)
        acts = [X]
        h = X
        for layer in range(self.num_layers):
            W, b = self.params[2 * layer], self.params[2 * layer + 1]
            z = h @ W + b
            h = np.maximum(z, 0.0) if layer < self.num_layers - 1 else z
            acts.append(h)
        z = acts[-1]
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
        return probs, acts

    def forward(self, X) -> np.ndarray:
        return self.forward_with_cache(X)[0]

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.forward(X), axis=1)

    def backward(self, acts, dlogits):
        """Gradients of the parameters and of the input, given dL/dlogits."""
        grads = [None] * len(self.params)
        delta = dlogits
        for layer in reversed(range(self.num_layers)):
            W = self.params[2 * layer]
            h_in = acts[layer]
            grads[2 * layer] = h_in.T @ delta
            grads[2 * layer + 1] = delta.sum(axis=0)
            delta = delta @ W.T
            if layer > 0:
                delta = delta * (acts[layer] > 0)
        return grads, delta


@dataclass
class LossValueWithGrad:
    value: float
    grads: list
    input_grad: np.ndarray | None = None


def _backprop_probs(model, acts, probs, dprobs):
    # softmax Jacobian-vector product
    dlogits = probs * (dprobs - np.sum(probs * dprobs, axis=1, keepdims=True))
    grads, dX = model.backward(acts, dlogits)
    return grads, dX


def _safe_log(p):
    return np.log(np.clip(p, PROB_FLOOR, 1.0))


def _dsafe_log(p):
    return np.where(p >= PROB_FLOOR, 1.0 / np.maximum(p, PROB_FLOOR), 0.0)


def _check_targets(targets, shape):
    T = np.asarray(targets, dtype=float)
    if T.shape != shape:
        raise ValueError(f"targets shape {T.shape} does not match predictions {shape}")
    if np.any(T < -1e-12) or np.max(np.abs(T.sum(axis=1) - 1.0)) > 1e-6:
        raise ValueError("each target row must be a probability distribution")
    return T


def _ce_parts(probs, T):
    n = probs.shape[0]
    value = -np.sum(T * _safe_log(probs)) / n
    dprobs = -T * _dsafe_log(probs) / n
    return value, dprobs


def _rce_parts(probs, T, log_zero):
    n = probs.shape[0]
    with np.errstate(divide="ignore"):
        log_t = np.maximum(np.log(T), log_zero)
    value = -np.sum(probs * log_t) / n
    return value, -log_t / n


def ce_loss(model: MlpClassifier, X, targets) -> LossValueWithGrad:
    """Mean cross-entropy against soft targets, ``-sum t log p``."""
    probs, acts = model.forward_with_cache(X)
    T = _check_targets(targets, probs.shape)
    value, dprobs = _ce_parts(probs, T)
    grads, dX = _backprop_probs(model, acts, probs, dprobs)
    return LossValueWithGrad(float(value), grads, dX)


def rce_loss(model: MlpClassifier, X, targets, log_zero: float = RCE_LOG_ZERO) -> LossValueWithGrad:
    """Mean reverse cross-entropy ``-sum p log t``.

    ``log t`` is floored at ``log_zero`` so that zero target entries cost a
    finite amount.
    """
    probs, acts = model.forward_with_cache(X)
    T = _check_targets(targets, probs.shape)
    value, dprobs = _rce_parts(probs, T, log_zero)
    grads, dX = _backprop_probs(model, acts, probs, dprobs)
    return LossValueWithGrad(float(value), grads, dX)


def sce_loss(
    model: MlpClassifier, X, targets, alpha: float = 1.0, beta: float = 1.0, log_zero: float = RCE_LOG_ZERO
) -> LossValueWithGrad:
    """``alpha * CE + beta * RCE`` from a single forward pass."""
    if alpha < 0 or beta < 0 or (alpha == 0 and beta == 0):
        raise ValueError("alpha and beta must be nonnegative and not both zero")
    probs, acts = model.forward_with_cache(X)
    T = _check_targets(targets, probs.shape)
    ce, dce = _ce_parts(probs, T)
    rce, drce = _rce_parts(probs, T, log_zero)
    grads, dX = _backprop_probs(model, acts, probs, alpha * dce + beta * drce)
    return LossValueWithGrad(float(alpha * ce + beta * rce), grads, dX)


def dllp_loss(model: MlpClassifier, bags, proportions) -> LossValueWithGrad:
    """Mean over bags of ``KL(p_i || mean posterior of bag i)``.

    ``bags`` is a sequence of feature arrays, one per bag.
    """
    sizes = [len(b) for b in bags]
    if not sizes or min(sizes) == 0:
        raise ValueError("dllp_loss needs at least one bag and no empty bags")
    props = np.asarray(proportions, dtype=float)
    if props.shape != (len(bags), model.num_classes):
        raise ValueError("proportions must be (n_bags, K)")
    X = np.concatenate([np.asarray(b, dtype=float) for b in bags], axis=0)
    probs, acts = model.forward_with_cache(X)
    bag_id = np.repeat(np.arange(len(bags)), sizes)
    sizes = np.asarray(sizes, dtype=float)
    mean = np.zeros_like(props)
    np.add.at(mean, bag_id, probs)
    mean /= sizes[:, None]

    nz = props > 0
    value = np.sum(props[nz] * (np.log(props[nz]) - _safe_log(mean)[nz])) / len(bags)
    dmean = -props * _dsafe_log(mean) / len(bags)
    dprobs = dmean[bag_id] / sizes[bag_id, None]
    grads, dX = _backprop_probs(model, acts, probs, dprobs)
    return LossValueWithGrad(float(value), grads, dX)


def mixup(x1, y1, x2, y2, alpha: float = 1.0, rng=None, lam=None):
    """Convex combinations ``lam * (x1, y1) + (1 - lam) * (x2, y2)``.

    One ``lam ~ Beta(alpha, alpha)`` per pair unless ``lam`` is given.
    """
    x1, x2 = np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)
    y1, y2 = np.asarray(y1, dtype=float), np.asarray(y2, dtype=float)
    if x1.shape != x2.shape or y1.shape != y2.shape or x1.shape[0] != y1.shape[0]:
        raise ValueError("mixup pair members must have matching shapes")
    if lam is None:
        if not alpha > 0:
            raise ValueError("mixup alpha must be positive")
        rng = rng if rng is not None else np.random.default_rng()
        lam = rng.beta(alpha, alpha, size=x1.shape[0])
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (x1.shape[0],))[:, None]
    return lam * x1 + (1 - lam) * x2, lam * y1 + (1 - lam) * y2


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(model: MlpClassifier, grads, state: AdamState):
    """One bias-corrected Adam update, in place. Returns ``(model, state)``."""
    if len(grads) != len(model.params):
        raise ValueError("gradient list does not match model parameters")
    names = model.param_names()
    for name, p, g in zip(names, model.params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in model.params]
        state.v = [np.zeros_like(p) for p in model.params]
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(model.params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return model, state


def save_checkpoint(model: MlpClassifier, path) -> None:
    """Header ``PLOT``, version, layer count and dims (uint32 LE), then float64 LE blocks."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(model.layer_dims)))
        fh.write(struct.pack(f"<{len(model.layer_dims)}I", *model.layer_dims))
        for p in model.params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> MlpClassifier:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a PLOT checkpoint")
    version, n_dims = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    dims = list(struct.unpack_from(f"<{n_dims}I", data, 12))
    offset = 12 + 4 * n_dims
    model = MlpClassifier(dims)
    for i, p in enumerate(model.params):
        count = p.size
        block = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        model.params[i] = block.reshape(p.shape).astype(float)
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after parameter blocks")
    return model
