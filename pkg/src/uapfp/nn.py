"""Small dense softmax classifiers with hand-written backpropagation."""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .numcore import RandomStream, as_stream

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "elu", "tanh", "identity")
OPTIMIZERS = ("sgd", "adam", "rmsprop")
LOSSES = ("hard_ce", "soft_ce")
MODEL_SCHEMA_VERSION = 1


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray
    activation: str = "relu"
    dropout: float = 0.0

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).ravel()
        if self.weight.ndim != 2 or self.bias.shape[0] != self.weight.shape[1]:
            raise ValueError(f"bad layer shapes {self.weight.shape} / {self.bias.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class DenseNet:
    """Feedforward net; the last layer's output is passed through softmax."""

    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a DenseNet needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ValueError(
                    f"layer dimensions do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def n_classes(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def n_weights(self) -> int:
        return sum(layer.weight.size for layer in self.layers)

    def copy(self) -> "DenseNet":
        return DenseNet(
            [replace(layer, weight=layer.weight.copy(), bias=layer.bias.copy()) for layer in self.layers]
        )

    def params(self):
        for layer in self.layers:
            yield layer.weight
            yield layer.bias

    def __call__(self, x):
        return forward(self, x)


def init_dense_net(
    input_dim, hidden, n_classes, activation="relu", dropout=0.0, rng=None
) -> DenseNet:
    """Glorot-uniform weights, zero biases; the output layer is linear."""
    rng = as_stream(rng)
    sizes = [int(input_dim), *[int(h) for h in hidden], int(n_classes)]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        last = i == len(sizes) - 2
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = (2.0 * rng.uniform(fan_in * fan_out) - 1.0).reshape(fan_in, fan_out) * a
        layers.append(
            Layer(
                weight=w,
                bias=np.zeros(fan_out),
                activation="identity" if last else activation,
                dropout=0.0 if last else dropout,
            )
        )
    return DenseNet(layers)


# ------------------------------------------------------------ forward pass


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "elu":
        return np.where(z > 0, 1.0, a + 1.0)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_inputs(net, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.ndim != 2 or x2.shape[1] != net.input_dim:
        raise ValueError(f"expected inputs of length {net.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x2)):
        raise ValueError("inputs contain non-finite values")
    return x2, single


def _forward_cache(net, x, rng: RandomStream | None = None):
    """Forward pass keeping what backprop needs.  Dropout only when ``rng`` is given."""
    pre, post, masks = [], [x], []
    h = x
    for layer in net.layers:
        z = h @ layer.weight + layer.bias
        a = _act(layer.activation, z)
        mask = None
        if rng is not None and layer.dropout > 0.0:
            keep = 1.0 - layer.dropout
            mask = (rng.uniform(a.size).reshape(a.shape) < keep) / keep
            a = a * mask
        pre.append(z)
        masks.append(mask)
        post.append(a)
        h = a
    return pre, post, masks


def logits(net: DenseNet, x) -> np.ndarray:
    x2, single = _check_inputs(net, x)
    out = _forward_cache(net, x2)[1][-1]
    return out[0] if single else out


def forward(net: DenseNet, x) -> np.ndarray:
    """Class probabilities (dropout off)."""
    return softmax(logits(net, x))


def hidden_representation(net: DenseNet, x) -> np.ndarray:
    """Activations of the final hidden layer (the input to the output layer)."""
    if len(net.layers) < 2:
        raise ValueError("network has no hidden layer")
    x2, single = _check_inputs(net, x)
    rep = _forward_cache(net, x2)[1][-2]
    return rep[0] if single else rep


def predict(net: DenseNet, x) -> np.ndarray:
    # np.argmax breaks ties by lowest index
    return np.argmax(logits(net, np.atleast_2d(x)), axis=1)


# ----------------------------------------------------------- backward pass


@dataclass
class GradientBundle:
    weights: list
    biases: list

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for pair in zip(self.weights, self.biases) for g in pair])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))


def _backward(net, cache, g_out, need_params=True):
    """Backprop ``g_out`` = dL/d(last-layer output) through the cached pass."""
    pre, post, masks = cache
    gw = [None] * len(net.layers)
    gb = [None] * len(net.layers)
    g = g_out
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if masks[i] is not None:
            g = g * masks[i]
        a = post[i + 1] if masks[i] is None else _act(layer.activation, pre[i])
        g = g * _act_grad(layer.activation, pre[i], a)
        if need_params:
            gw[i] = post[i].T @ g
            gb[i] = g.sum(axis=0)
        g = g @ layer.weight.T
    return GradientBundle(gw, gb), g


def _ce_targets(net, targets, loss, n):
    t = np.asarray(targets, dtype=np.float64)
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    if t.ndim == 1 and loss == "hard_ce":
        if np.any(t < 0) or np.any(t >= net.n_classes) or np.any(t != np.round(t)):
            raise ValueError("hard labels must be integers in [0, N)")
        t = np.eye(net.n_classes)[t.astype(int)]
    if t.shape != (n, net.n_classes):
        raise ValueError(f"targets must have shape {(n, net.n_classes)}, got {t.shape}")
    if loss == "hard_ce" and not (np.all((t == 0) | (t == 1)) and np.all(t.sum(axis=1) == 1)):
        raise ValueError("hard_ce targets must be one-hot")
    if loss == "soft_ce" and (np.any(t < 0) or not np.allclose(t.sum(axis=1), 1.0, atol=1e-6)):
        raise ValueError("soft_ce targets must be probability vectors")
    return t


def batch_loss(net, x, targets, loss="hard_ce") -> float:
    x2, _ = _check_inputs(net, x)
    t = _ce_targets(net, targets, loss, x2.shape[0])
    z = logits(net, x2)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-(t * logp).sum() / x2.shape[0])


def param_gradients(net: DenseNet, x, targets, loss="hard_ce", rng=None) -> GradientBundle:
    """Exact gradient of the mean batch cross-entropy."""
    x2, _ = _check_inputs(net, x)
    t = _ce_targets(net, targets, loss, x2.shape[0])
    cache = _forward_cache(net, x2, rng)
    probs = softmax(cache[1][-1])
    grads, _ = _backward(net, cache, (probs - t) / x2.shape[0])
    return grads


def _objective_output_grad(net, objective, n):
    kind = objective[0] if isinstance(objective, tuple) else objective
    g = np.zeros((n, net.n_classes))
    if kind == "logit" and len(objective) == 2:
        g[:, int(objective[1])] = 1.0
        return g, None
    if kind == "logit_diff" and len(objective) == 3:
        g[:, int(objective[1])] += 1.0
        g[:, int(objective[2])] -= 1.0
        return g, None
    if kind == "loss" and len(objective) == 2:
        return None, objective[1]
    raise ValueError(
        f"unsupported objective {objective!r}; use ('logit', i), ('logit_diff', i, j) or ('loss', target)"
    )


def input_gradient(net: DenseNet, x, objective) -> np.ndarray:
    """d(objective)/dx for a scalar of the output.

    ``objective`` is ``("logit", i)``, ``("logit_diff", i, j)`` or
    ``("loss", target)`` with a class index or probability vector target.
    """
    x2, single = _check_inputs(net, x)
    g_out, target = _objective_output_grad(net, objective, x2.shape[0])
    cache = _forward_cache(net, x2)
    if g_out is None:
        t = np.asarray(target, dtype=np.float64)
        if t.ndim == 0:
            t = np.eye(net.n_classes)[int(t)]
        t = np.broadcast_to(t, (x2.shape[0], net.n_classes))
        g_out = softmax(cache[1][-1]) - t
    _, gx = _backward(net, cache, g_out, need_params=False)
    return gx[0] if single else gx


def logit_jacobian(net: DenseNet, x) -> tuple[np.ndarray, np.ndarray]:
    """Logits (B, N) and their input Jacobian (B, N, M)."""
    x2, _ = _check_inputs(net, x)
    cache = _forward_cache(net, x2)
    out = cache[1][-1]
    jac = np.empty((x2.shape[0], net.n_classes, x2.shape[1]))
    for c in range(net.n_classes):
        g = np.zeros_like(out)
        g[:, c] = 1.0
        jac[:, c, :] = _backward(net, cache, g, need_params=False)[1]
    return out, jac


# --------------------------------------------------------------- training


SCHEDULES = ("constant", "cosine")
DEFAULT_LR = {"sgd": 0.03, "adam": 2e-3, "rmsprop": 1e-3}


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float | None = None
    batch_size: int = 64
    epochs: int = 30
    loss: str = "hard_ce"
    seed: int = 0
    max_steps: int | None = None  # stop after this many mini-batch updates
    schedule: str = "constant"  # or "cosine": per-epoch cosine decay of the step size

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LR[self.optimizer]
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class Optimizer:
    """SGD / Adam / RMSprop over a flat list of parameter arrays (updated in place)."""

    def __init__(self, kind, lr, params, beta1=0.9, beta2=0.999, decay=0.99, eps=1e-8, momentum=0.9):
        self.kind = kind
        self.momentum = momentum
        self.lr = lr
        self.beta1, self.beta2, self.decay, self.eps = beta1, beta2, decay, eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        self.t += 1
        for i, (p, g) in enumerate(zip(params, grads)):
            if self.kind == "sgd":
                self.m[i] = self.momentum * self.m[i] + g
                p -= self.lr * self.m[i]
            elif self.kind == "adam":
                self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
                self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
                mhat = self.m[i] / (1 - self.beta1**self.t)
                vhat = self.v[i] / (1 - self.beta2**self.t)
                p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            else:
                self.v[i] = self.decay * self.v[i] + (1 - self.decay) * g * g
                p -= self.lr * g / (np.sqrt(self.v[i]) + self.eps)


def train(net: DenseNet, x, targets, cfg: TrainConfig, callback=None):
    """Mini-batch training; returns ``(new_net, per_epoch_mean_loss)``.

    The input net is left untouched.  ``callback(epoch, net)`` runs after
    every epoch.
    """
    x2, _ = _check_inputs(net, x)
    t = _ce_targets(net, targets, cfg.loss, x2.shape[0])
    if x2.shape[0] == 0:
        raise ValueError("training data is empty")
    net = net.copy()
    rng = RandomStream(cfg.seed)
    params = list(net.params())
    opt = Optimizer(cfg.optimizer, cfg.learning_rate, params)
    trace = []
    steps = 0
    n = x2.shape[0]
    for epoch in range(cfg.epochs):
        if cfg.schedule == "cosine":
            opt.lr = cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * epoch / cfg.epochs))
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            cache = _forward_cache(net, x2[idx], rng)
            z = cache[1][-1]
            probs = softmax(z)
            zs = z - z.max(axis=1, keepdims=True)
            logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
            loss = -(t[idx] * logp).sum()
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became non-finite in epoch {epoch}", trace)
            grads, _ = _backward(net, cache, (probs - t[idx]) / idx.size)
            opt.step(params, [g for pair in zip(grads.weights, grads.biases) for g in pair])
            total += float(loss)
            seen += idx.size
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        trace.append(total / seen)
        if not all(np.all(np.isfinite(p)) for p in params):
            raise TrainingDivergedError(f"parameters became non-finite in epoch {epoch}", trace)
        if callback is not None:
            callback(epoch, net)
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    return net, trace


def accuracy(net: DenseNet, x, labels) -> float:
    labels = np.asarray(labels).ravel()
    if labels.size == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(net, x) == labels))


def snap_float32(net: DenseNet) -> DenseNet:
    """Round every parameter to the nearest float32 (what the model file stores)."""
    out = net.copy()
    for p in out.params():
        p[...] = p.astype(np.float32).astype(np.float64)
    return out


# --------------------------------------------------------------- file I/O


def encode_f32(a) -> str:
    return base64.b64encode(np.asarray(a, dtype="<f4").tobytes()).decode("ascii")


def decode_f32(s: str, shape=None) -> np.ndarray:
    a = np.frombuffer(base64.b64decode(s), dtype="<f4").astype(np.float64)
    return a.reshape(shape) if shape is not None else a


def net_to_dict(net: DenseNet) -> dict:
    return {
        "schema_version": MODEL_SCHEMA_VERSION,
        "M": net.input_dim,
        "N": net.n_classes,
        "layers": [
            {
                "rows": layer.weight.shape[0],
                "cols": layer.weight.shape[1],
                "weights_b64": encode_f32(layer.weight),
                "bias_b64": encode_f32(layer.bias),
                "activation": layer.activation,
                "dropout": layer.dropout,
            }
            for layer in net.layers
        ],
    }


def net_from_dict(doc: dict) -> DenseNet:
    if doc.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema_version {doc.get('schema_version')!r}")
    layers = [
        Layer(
            weight=decode_f32(d["weights_b64"], (d["rows"], d["cols"])),
            bias=decode_f32(d["bias_b64"]),
            activation=d["activation"],
            dropout=float(d["dropout"]),
        )
        for d in doc["layers"]
    ]
    net = DenseNet(layers)
    if net.input_dim != doc["M"] or net.n_classes != doc["N"]:
        raise ValueError("model file M/N disagree with its layers")
    return net


def dump_json(doc, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def save_model(net: DenseNet, path, extra: dict | None = None):
    doc = net_to_dict(net)
    if extra:
        doc.update(extra)
    dump_json(doc, path)


def load_model(path) -> DenseNet:
    return net_from_dict(json.loads(Path(path).read_text()))


# ------------------------------------------------------ estimator wrapper


class DenseClassifier(ClassifierMixin, BaseEstimator):
    """sklearn-compatible wrapper around :func:`train`.

    ``fit(X, y)`` uses hard cross-entropy for a label vector and soft
    cross-entropy when ``y`` is a matrix of probability vectors (the
    label format of a soft-label extraction attack).
    """

    def __init__(
        self,
        hidden_layer_sizes=(64, 64),
        activation="relu",
        dropout=0.0,
        optimizer="adam",
        learning_rate=None,
        batch_size=64,
        epochs=30,
        schedule="constant",
        n_classes=None,
        seed=0,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.dropout = dropout
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.schedule = schedule
        self.n_classes = n_classes
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        soft = y.ndim == 2
        n_classes = self.n_classes or (y.shape[1] if soft else int(y.max()) + 1)
        rng = RandomStream(self.seed)
        net = init_dense_net(
            X.shape[1], self.hidden_layer_sizes, n_classes, self.activation, self.dropout, rng.spawn(0)
        )
        cfg = TrainConfig(
            optimizer=self.optimizer,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            loss="soft_ce" if soft else "hard_ce",
            seed=rng.spawn(1).seed,
            schedule=self.schedule,
        )
        self.net_, self.loss_curve_ = train(net, X, y, cfg)
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        return forward(self.net_, np.atleast_2d(X))

    def predict(self, X):
        check_is_fitted(self, "net_")
        return predict(self.net_, X)
