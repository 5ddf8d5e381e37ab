"""Feedforward multi-label predictor with sigmoid heads.

Single-vector evaluation goes through :mod:`mladv.kernels`; training works on
mini-batches in numpy and minimises the combined pairwise loss::

    J = lam * mean_i [ mean_{p in Y_i+, q in Y_i-} exp(f_q(x_i) - f_p(x_i)) ]
          + mean_j [ mean_{p in Y_.j+, q in Y_.j-} exp(f_j(x_q) - f_j(x_p)) ]

An instance or label with an empty positive or negative set contributes
nothing and is left out of its mean.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import kernels
from .errors import ParseError, UsageError

ACTIVATIONS = {
    "identity": kernels.ACT_IDENTITY,
    "sigmoid": kernels.ACT_SIGMOID,
    "relu": kernels.ACT_RELU,
    "tanh": kernels.ACT_TANH,
}

MODEL_HEADER = "MLADV-MODEL v1"


@dataclass(frozen=True)
class Instance:
    features: np.ndarray
    labels: np.ndarray
    uid: int = -1

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        if x.ndim != 1 or x.size < 1:
            raise UsageError("features must be a non-empty vector")
        if y.ndim != 1 or y.size < 2:
            raise UsageError("need at least two labels")
        if not np.all(np.abs(y) == 1):
            raise UsageError("labels must be -1 or +1")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def check_box(self, box=(0.0, 1.0)):
        lo, hi = box
        if np.any(self.features < lo) or np.any(self.features > hi):
            raise UsageError(f"features outside box [{lo}, {hi}]")


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray
    activation: str


@dataclass(frozen=True)
class Predictor:
    """Immutable stack of dense layers; the last one is a sigmoid head."""

    layers: tuple

    def __post_init__(self):
        if not self.layers:
            raise UsageError("predictor needs at least one layer")
        frozen = []
        prev = None
        for layer in self.layers:
            if isinstance(layer, Layer):
                W, b, act = layer.weight, layer.bias, layer.activation
            else:
                W, b, act = layer
            W = np.array(W, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise UsageError("layer weight/bias shapes are inconsistent")
            if prev is not None and W.shape[1] != prev:
                raise UsageError(f"layer expects {W.shape[1]} inputs, previous layer gives {prev}")
            if act not in ACTIVATIONS:
                raise UsageError(f"unknown activation {act!r}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise UsageError("parameters must be finite")
            W.setflags(write=False)
            b.setflags(write=False)
            frozen.append(Layer(W, b, act))
            prev = W.shape[0]
        if frozen[-1].activation != "sigmoid":
            raise UsageError("the output layer must be sigmoid")
        if prev < 2:
            raise UsageError("need at least two outputs")
        object.__setattr__(self, "layers", tuple(frozen))

    @property
    def input_dim(self):
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self):
        return self.layers[-1].weight.shape[0]

    @property
    def dims(self):
        return [self.input_dim] + [layer.weight.shape[0] for layer in self.layers]

    @cached_property
    def packed(self):
        """``(dims, acts, params)`` arrays in the layout the kernels expect."""
        dims = np.array(self.dims, dtype=np.int64)
        acts = np.array([ACTIVATIONS[layer.activation] for layer in self.layers], dtype=np.int32)
        params = np.concatenate([np.concatenate([layer.weight.ravel(), layer.bias])
                                 for layer in self.layers])
        for arr in (dims, acts, params):
            arr.setflags(write=False)
        return dims, acts, params

    def flat_params(self):
        return self.packed[2].copy()

    def with_params(self, flat):
        """New predictor with the same architecture and the given flat parameters."""
        flat = np.asarray(flat, dtype=np.float64)
        layers, off = [], 0
        for layer in self.layers:
            n_out, n_in = layer.weight.shape
            W = flat[off:off + n_out * n_in].reshape(n_out, n_in)
            off += n_out * n_in
            b = flat[off:off + n_out]
            off += n_out
            layers.append((W, b, layer.activation))
        if off != flat.size:
            raise UsageError("flat parameter vector has the wrong length")
        return Predictor(tuple(layers))


@dataclass(frozen=True)
class TrainConfig:
    lambda_tradeoff: float = 0.5
    batch_size: int = 100
    learning_rate: float = 2.0
    epochs: int = 20
    rng_seed: int = 0
    hidden: tuple = (64,)
    hidden_activation: str = "relu"

    def __post_init__(self):
        if self.lambda_tradeoff < 0:
            raise UsageError("lambda_tradeoff must be nonnegative")
        if self.batch_size < 1:
            raise UsageError("batch_size must be positive")
        if self.learning_rate <= 0 or self.epochs < 1:
            raise UsageError("learning_rate and epochs must be positive")


def _check_input(p, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.input_dim,):
        raise UsageError(f"expected a feature vector of length {p.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise UsageError("features must be finite")
    return x


def forward(p, x):
    """Relevance scores ``F(x)`` in (0, 1)."""
    return kernels.forward(*p.packed, _check_input(p, x))


def classify(p, x, threshold=0.5):
    """+1 where the score is strictly above ``threshold``, -1 otherwise."""
    return np.where(forward(p, x) > threshold, 1, -1)


def input_jacobian(p, x, indices):
    """Columns are the input gradients of the scores listed in ``indices``."""
    x = _check_input(p, x)
    indices = [int(i) for i in indices]
    if len(set(indices)) != len(indices):
        raise UsageError("indices must be distinct")
    l = p.output_dim
    J = np.empty((p.input_dim, len(indices)))
    for col, j in enumerate(indices):
        if not 0 <= j < l:
            raise UsageError(f"label index {j} out of range [0, {l})")
        e = np.zeros(l)
        e[j] = 1.0
        J[:, col] = kernels.input_vjp(*p.packed, x, e)[1]
    return J


def init_predictor(d, l, hidden=(64,), hidden_activation="relu", seed=0):
    """Uniform Glorot initialisation, zero biases."""
    rng = np.random.default_rng(seed)
    sizes = [d, *hidden, l]
    layers = []
    for k in range(len(sizes) - 1):
        a = np.sqrt(6.0 / (sizes[k] + sizes[k + 1]))
        W = rng.uniform(-a, a, size=(sizes[k + 1], sizes[k]))
        act = "sigmoid" if k == len(sizes) - 2 else hidden_activation
        layers.append((W, np.zeros(sizes[k + 1]), act))
    return Predictor(tuple(layers))


def predict_batch(p, X):
    return _forward_batch(p, np.asarray(X, dtype=np.float64))[-1]


def _act(z, name):
    if name == "sigmoid":
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _dact(a, name):
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "relu":
        return (a > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(a)


def _forward_batch(p, X):
    outs = [X]
    for layer in p.layers:
        outs.append(_act(outs[-1] @ layer.weight.T + layer.bias, layer.activation))
    return outs


def pairwise_loss(S, Y, lam):
    """Combined instance/label pairwise loss of scores ``S`` (n, l); returns ``(J, dJ/dS)``."""
    S = np.asarray(S, dtype=np.float64)
    pos = np.asarray(Y) == 1
    neg = ~pos
    Ep = np.exp(S)
    En = np.exp(-S)
    grad = np.zeros_like(S)
    J = 0.0

    # instance term: rows
    n_pos = pos.sum(axis=1)
    n_neg = neg.sum(axis=1)
    valid = (n_pos > 0) & (n_neg > 0)
    if valid.any():
        pairs = np.where(valid, n_pos * n_neg, 1)
        sum_neg = (Ep * neg).sum(axis=1)
        sum_pos = (En * pos).sum(axis=1)
        w = np.where(valid, lam / (valid.sum() * pairs), 0.0)
        J += float(np.sum(w * sum_neg * sum_pos))
        grad += (w * sum_pos)[:, None] * Ep * neg
        grad -= (w * sum_neg)[:, None] * En * pos

    # label term: columns
    n_pos = pos.sum(axis=0)
    n_neg = neg.sum(axis=0)
    valid = (n_pos > 0) & (n_neg > 0)
    if valid.any():
        pairs = np.where(valid, n_pos * n_neg, 1)
        sum_neg = (Ep * neg).sum(axis=0)
        sum_pos = (En * pos).sum(axis=0)
        w = np.where(valid, 1.0 / (valid.sum() * pairs), 0.0)
        J += float(np.sum(w * sum_neg * sum_pos))
        grad += (w * sum_pos)[None, :] * Ep * neg
        grad -= (w * sum_neg)[None, :] * En * pos
    return J, grad


def loss_and_grad(p, X, Y, lam):
    """Pairwise loss of predictor ``p`` on a batch and its flat parameter gradient."""
    outs = _forward_batch(p, np.asarray(X, dtype=np.float64))
    J, g = pairwise_loss(outs[-1], Y, lam)
    grads = []
    delta = g * _dact(outs[-1], p.layers[-1].activation)
    for k in range(len(p.layers) - 1, -1, -1):
        layer = p.layers[k]
        grads.append((delta.T @ outs[k], delta.sum(axis=0)))
        if k > 0:
            delta = (delta @ layer.weight) * _dact(outs[k], p.layers[k - 1].activation)
    flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in reversed(grads)])
    return J, flat


def train(data, cfg=None, predictor=None, log=None):
    """Mini-batch gradient descent on the pairwise loss.

    ``log``, if given, is called as ``log(epoch, mean_batch_loss)``.
    """
    cfg = cfg or TrainConfig()
    if not data:
        raise UsageError("training data is empty")
    X = np.stack([inst.features for inst in data])
    Y = np.stack([inst.labels for inst in data])
    if predictor is None:
        predictor = init_predictor(X.shape[1], Y.shape[1], cfg.hidden, cfg.hidden_activation,
                                   seed=cfg.rng_seed)
    rng = np.random.default_rng(cfg.rng_seed + 1)
    theta = predictor.flat_params()
    n = len(X)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            J, g = loss_and_grad(predictor.with_params(theta), X[idx], Y[idx], cfg.lambda_tradeoff)
            theta = theta - cfg.learning_rate * g
            total += J
            batches += 1
        if log is not None:
            log(epoch, total / batches)
    return predictor.with_params(theta)


def train_val_split(data, fraction, seed):
    if not 0.0 < fraction < 1.0:
        raise UsageError("fraction must lie strictly between 0 and 1")
    n = len(data)
    n_train = int(round(fraction * n))
    if n_train == 0 or n_train == n:
        raise UsageError(f"split of {n} instances at {fraction} leaves an empty side")
    order = np.random.default_rng(seed).permutation(n)
    return [data[i] for i in order[:n_train]], [data[i] for i in order[n_train:]]


def save_model(p, path):
    lines = [MODEL_HEADER,
             "dims: " + " ".join(str(d) for d in p.dims),
             "activations: " + " ".join(layer.activation for layer in p.layers)]
    for layer in p.layers:
        lines.append(" ".join(f"{v:.17g}" for v in layer.weight.ravel()))
        lines.append(" ".join(f"{v:.17g}" for v in layer.bias))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != MODEL_HEADER:
        raise ParseError(f"expected header {MODEL_HEADER!r}", 1)
    if len(lines) < 3 or not lines[1].startswith("dims:"):
        raise ParseError("expected 'dims:' line", 2)
    if not lines[2].startswith("activations:"):
        raise ParseError("expected 'activations:' line", 3)
    try:
        dims = [int(t) for t in lines[1][5:].split()]
    except ValueError:
        raise ParseError("dims must be integers", 2) from None
    acts = lines[2][12:].split()
    if len(acts) != len(dims) - 1:
        raise ParseError("activation count does not match dims", 3)
    layers = []
    lineno = 3
    for k, act in enumerate(acts):
        tensors = []
        for size in (dims[k] * dims[k + 1], dims[k + 1]):
            if lineno >= len(lines):
                raise ParseError("missing parameter line", lineno + 1)
            try:
                vals = np.array([float(t) for t in lines[lineno].split()])
            except ValueError:
                raise ParseError("non-numeric parameter", lineno + 1) from None
            if vals.size != size:
                raise ParseError(f"expected {size} values, found {vals.size}", lineno + 1)
            tensors.append(vals)
            lineno += 1
        layers.append((tensors[0].reshape(dims[k + 1], dims[k]), tensors[1], act))
    try:
        return Predictor(tuple(layers))
    except UsageError as exc:
        raise ParseError(str(exc)) from None
