"""
The error-estimation network: a fully connected 32-64-1 perceptron with a
sigmoid hidden layer and linear output, trained on mean-square error with
Adam, plus checkpointing and indicator prediction.

Parameters live in a single flat vector ordered ``W1 (64x32, row-major),
b1 (64), W2 (1x64), b2 (1)``; the checkpoint file uses the same order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatchError, InvalidArgumentError, ParseError
from .features import N_FEATURES, Dataset, extract_features, preprocess

__all__ = [
    "MLP",
    "TrainConfig",
    "AdamState",
    "TrainResult",
    "init",
    "forward",
    "gradient",
    "adam_step",
    "train",
    "save",
    "load",
    "predict_indicator",
    "predict_values",
]

log = logging.getLogger(__name__)

DEFAULT_DIMS = (N_FEATURES, 64, 1)


def _sigmoid(z):
    # expit never overflows
    return expit(z)


@dataclass
class MLP:
    """
    :arg dims: ``(n_in, n_hidden, n_out)``
    :arg params: flat parameter vector
    :arg arctan_targets: whether the network was trained on arctan-compressed
        targets (predictions are then mapped back with tan)
    """

    dims: tuple
    params: np.ndarray
    arctan_targets: bool = True

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3:
            raise InvalidArgumentError("MLP needs exactly one hidden layer")
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (self.n_params,):
            raise DimensionMismatchError(f"expected {self.n_params} parameters, got {self.params.size}")

    @property
    def n_params(self) -> int:
        n, h, o = self.dims
        return h * n + h + o * h + o

    def unpack(self, p=None):
        """Views ``(W1, b1, W2, b2)`` into a flat vector (default: own params)."""
        p = self.params if p is None else p
        n, h, o = self.dims
        i = 0
        W1 = p[i:i + h * n].reshape(h, n); i += h * n
        b1 = p[i:i + h]; i += h
        W2 = p[i:i + o * h].reshape(o, h); i += o * h
        b2 = p[i:i + o]
        return W1, b1, W2, b2

    @property
    def W1(self):
        return self.unpack()[0]

    @property
    def b1(self):
        return self.unpack()[1]

    @property
    def W2(self):
        return self.unpack()[2]

    @property
    def b2(self):
        return self.unpack()[3]

    def copy(self) -> "MLP":
        return MLP(self.dims, self.params.copy(), self.arctan_targets)


def init(seed: int = 0, dims: Sequence[int] = DEFAULT_DIMS, arctan_targets: bool = True) -> MLP:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    n, h, o = dims
    mlp = MLP(tuple(dims), np.zeros(h * n + h + o * h + o), arctan_targets)
    W1, _, W2, _ = mlp.unpack()
    a1 = np.sqrt(6.0 / (n + h))
    a2 = np.sqrt(6.0 / (h + o))
    W1[...] = rng.uniform(-a1, a1, size=W1.shape)
    W2[...] = rng.uniform(-a2, a2, size=W2.shape)
    return mlp


def _check_input(mlp, X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != mlp.dims[0]:
        raise InvalidArgumentError(f"inputs must have width {mlp.dims[0]}")
    return X


def _forward(mlp, X, p=None):
    W1, b1, W2, b2 = mlp.unpack(p)
    A = _sigmoid(X @ W1.T + b1)
    return A, A @ W2.T + b2


def forward(mlp: MLP, X) -> np.ndarray:
    """Network output ``W2 sigmoid(W1 x + b1) + b2`` for each row of ``X``."""
    X = _check_input(mlp, X)
    out = _forward(mlp, X)[1]
    return out[:, 0] if mlp.dims[2] == 1 else out


def _loss_grad(mlp, X, y, p=None):
    A, out = _forward(mlp, X, p)
    r = out - y.reshape(out.shape)
    N = len(X)
    loss = float(np.sum(r * r) / N)
    W1, b1, W2, b2 = mlp.unpack(p)
    dout = 2.0 * r / N
    dA = dout @ W2
    dZ = dA * A * (1.0 - A)
    g = np.concatenate([(dZ.T @ X).ravel(), dZ.sum(axis=0), (dout.T @ A).ravel(), dout.sum(axis=0)])
    return loss, g


def mse(mlp: MLP, X, y, chunk: int = 8192) -> float:
    X = _check_input(mlp, X)
    y = np.asarray(y, dtype=float).reshape(len(X), -1)
    if not len(X):
        return float("nan")
    # chunked so that large sets do not allocate large temporaries
    total = 0.0
    for start in range(0, len(X), chunk):
        r = _forward(mlp, X[start:start + chunk])[1] - y[start:start + chunk]
        total += float(np.sum(r * r))
    return total / y.size


def gradient(mlp: MLP, X, y) -> np.ndarray:
    """Backpropagated gradient of ``mean((f(x) - y)^2)`` as a flat vector."""
    X = _check_input(mlp, X)
    return _loss_grad(mlp, X, np.asarray(y, dtype=float))[1]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **kwargs):
        return cls(np.zeros(n), np.zeros(n), 0, **kwargs)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    """One bias-corrected Adam update; ``state`` is advanced in place."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionMismatchError("parameter, gradient and moment shapes disagree")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    mhat = state.m / (1.0 - state.beta1 ** state.t)
    vhat = state.v / (1.0 - state.beta2 ** state.t)
    return params - lr * mhat / (np.sqrt(vhat) + state.eps)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 2000
    batch_size: int = 500
    train_fraction: float = 0.7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    arctan_targets: bool = True
    magnitude_targets: bool = True
    hidden: int = 64

    def validate(self):
        if not (self.learning_rate > 0 and self.epochs >= 0 and self.batch_size > 0 and self.hidden > 0):
            raise InvalidArgumentError("training hyperparameters must be positive")
        if not 0 < self.train_fraction < 1:
            raise InvalidArgumentError("train fraction must lie in (0, 1)")
        return self


@dataclass
class TrainResult:
    mlp: MLP
    train_loss: np.ndarray
    val_loss: np.ndarray
    train_index: np.ndarray
    val_index: np.ndarray


def _as_arrays(dataset):
    if isinstance(dataset, Dataset):
        return dataset.features, dataset.targets
    X, y = dataset
    return np.asarray(X, dtype=float), np.asarray(y, dtype=float)


def split_indices(n: int, train_fraction: float, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    n_train = min(max(n_train, 1), n - 1) if n > 1 else n
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def train(dataset, config: Optional[TrainConfig] = None) -> TrainResult:
    """
    Minibatch Adam on mean-square error with a seeded train/validation
    split. Inputs are arctan-compressed; targets too when
    ``config.arctan_targets`` is set.

    With ``config.magnitude_targets`` (the default) the network learns
    ``|E_K|``. The signs of the enriched contributions vary between
    neighbouring elements with no pattern a per-element regression can
    follow, so a signed fit averages them towards zero exactly where the
    error is large. The metric only consumes magnitudes.

    ``train_loss[0]`` and ``val_loss[0]`` are the losses of the initial
    network. For ``e >= 1``, ``val_loss[e]`` is the validation loss after
    epoch ``e`` and ``train_loss[e]`` the mean minibatch loss seen during it.
    """
    config = (config or TrainConfig()).validate()
    X, y = _as_arrays(dataset)
    if len(y) == 0:
        raise InvalidArgumentError("empty dataset")
    X = preprocess(X)
    t = np.abs(y) if config.magnitude_targets else y
    t = np.arctan(t) if config.arctan_targets else t
    tr, va = split_indices(len(y), config.train_fraction, config.seed)
    mlp = init(config.seed, (X.shape[1], config.hidden, 1), config.arctan_targets)
    rng = np.random.default_rng(config.seed + 1)
    state = AdamState.zeros(mlp.n_params, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    Xtr, ttr, Xva, tva = X[tr], t[tr], X[va], t[va]
    train_hist = [mse(mlp, Xtr, ttr)]
    val_hist = [mse(mlp, Xva, tva) if len(va) else float("nan")]
    p = mlp.params
    for epoch in range(config.epochs):
        # one gather per epoch; minibatches are then contiguous slices
        order = rng.permutation(len(tr))
        Xe, te = Xtr[order], ttr[order]
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            sl = slice(start, start + config.batch_size)
            loss, g = _loss_grad(mlp, Xe[sl], te[sl], p)
            epoch_loss += loss * len(te[sl])
            p = adam_step(state, p, g, config.learning_rate)
        mlp.params = p
        train_hist.append(epoch_loss / len(tr))
        val_hist.append(mse(mlp, Xva, tva) if len(va) else float("nan"))
        if (epoch + 1) % 200 == 0:
            log.info("epoch %d: train %.4e  val %.4e", epoch + 1, train_hist[-1], val_hist[-1])
    return TrainResult(mlp, np.array(train_hist), np.array(val_hist), tr, va)


def predict_values(mlp: MLP, features) -> np.ndarray:
    """Indicator values from raw features (inverse target transform applied)."""
    out = forward(mlp, preprocess(np.asarray(features, dtype=float)))
    if mlp.arctan_targets:
        out = np.tan(np.clip(out, -0.5 * np.pi + 1e-12, 0.5 * np.pi - 1e-12))
    return out


def predict_indicator(mlp: MLP, scenario, mesh, u_h, u_star_h, problem=None):
    """
    Network replacement for the enriched indicator. Only base-mesh
    quantities are used: no refined mesh or enriched solve is built.
    """
    from .dwr import IndicatorField, coarse_indicator

    coarse = coarse_indicator(scenario, u_h, u_star_h, problem)
    X = extract_features(scenario, mesh, u_h, u_star_h, coarse, problem)
    return IndicatorField(predict_values(mlp, X), mesh)


def save(mlp: MLP, path):
    W1, b1, W2, b2 = mlp.unpack()
    with open(path, "w") as f:
        f.write("E2NNET 1\n")
        f.write("dims " + " ".join(str(d) for d in mlp.dims) + "\n")
        f.write(f"arctan_targets {int(mlp.arctan_targets)}\n")
        for name, arr in (("W1", W1), ("b1", b1), ("W2", W2), ("b2", b2)):
            f.write(f"{name} " + " ".join(str(s) for s in arr.shape) + "\n")
            for row in arr if arr.ndim == 2 else arr[None, :]:
                f.write(" ".join(repr(float(v)) for v in row) + "\n")


def load(path, dims: Optional[Sequence[int]] = None) -> MLP:
    """
    Read a checkpoint written by :func:`save`.

    :kwarg dims: expected layer dimensions; a checkpoint with different
        dimensions raises :class:`DimensionMismatchError`
    """
    with open(path) as f:
        lines = f.read().splitlines()

    def line(i):
        if i >= len(lines):
            raise ParseError("unexpected end of file", i + 1)
        return lines[i].split()

    if line(0) != ["E2NNET", "1"]:
        raise ParseError("expected header 'E2NNET 1'", 1)
    head = line(1)
    if len(head) != 4 or head[0] != "dims":
        raise ParseError("expected 'dims n_in n_hidden n_out'", 2)
    try:
        file_dims = tuple(int(v) for v in head[1:])
    except ValueError:
        raise ParseError("malformed dimensions", 2) from None
    expected = tuple(DEFAULT_DIMS if dims is None else dims)
    if file_dims != expected:
        raise DimensionMismatchError(f"checkpoint dims {file_dims} differ from expected {expected}")
    flag = line(2)
    if len(flag) != 2 or flag[0] != "arctan_targets" or flag[1] not in ("0", "1"):
        raise ParseError("expected 'arctan_targets 0|1'", 3)
    mlp = MLP(file_dims, np.zeros(_count(file_dims)), flag[1] == "1")
    i = 3
    for name, arr in zip(("W1", "b1", "W2", "b2"), mlp.unpack()):
        tag = line(i)
        shape = tuple(int(s) for s in tag[1:]) if tag and tag[0] == name and all(s.isdigit() for s in tag[1:]) else None
        if shape != arr.shape:
            raise ParseError(f"expected block '{name}' of shape {arr.shape}", i + 1)
        i += 1
        rows = arr.reshape(-1, arr.shape[-1]) if arr.ndim == 2 else arr.reshape(1, -1)
        for r in range(rows.shape[0]):
            vals = line(i)
            if len(vals) != rows.shape[1]:
                raise ParseError(f"expected {rows.shape[1]} values", i + 1)
            try:
                rows[r] = [float(v) for v in vals]
            except ValueError:
                raise ParseError("malformed number", i + 1) from None
            i += 1
    if not np.all(np.isfinite(mlp.params)):
        raise ParseError("non-finite parameter values")
    return mlp


def _count(dims):
    n, h, o = dims
    return h * n + h + o * h + o
