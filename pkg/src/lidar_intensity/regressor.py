"""Fully-connected incidence-angle regressor, written directly in numpy.

Input rows are six features (sensor-facing normal, beam direction); the
output is squashed into ``[0, pi/2]`` with a scaled sigmoid. Training
minimises mean absolute error with plain mini-batch gradient descent.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._io import atomic_write
from .errors import (
    ContractError,
    FileFormatError,
    InsufficientDataError,
    ModelCorruptError,
    TrainingDivergedError,
)

HALF_PI = np.pi / 2
N_FEATURES = 6
MIN_TRAIN_SAMPLES = 100

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a**2),
}


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class MlpModel:
    """Layer sizes plus weights ``W[k]`` of shape ``(in, out)`` and biases ``b[k]``."""

    dims: tuple
    weights: list
    biases: list
    activation: str = "tanh"
    seed: int = 0

    @classmethod
    def init(cls, dims=(6, 64, 64, 1), seed=0, activation="tanh"):
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(tuple(dims), weights, biases, activation, seed)

    @classmethod
    def zeros(cls, dims=(6, 64, 64, 1)):
        return cls(
            tuple(dims),
            [np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])],
            [np.zeros(b) for b in dims[1:]],
        )

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.dims, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
            self.activation, self.seed,
        )

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b]
        return np.concatenate(parts)

    def set_flat(self, theta):
        theta = np.asarray(theta, dtype=float)
        pos = 0
        for k, (a, b) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            self.weights[k] = theta[pos:pos + a * b].reshape(a, b).copy()
            pos += a * b
            self.biases[k] = theta[pos:pos + b].copy()
            pos += b
        if pos != theta.size:
            raise ValueError(f"expected {pos} parameters, got {theta.size}")

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.dims[:-1], self.dims[1:]))


def _check_features(X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != N_FEATURES:
        raise ContractError(f"expected {N_FEATURES} features per row, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ContractError("features must be finite")
    return X


def _forward_cache(model: MlpModel, X):
    act, _ = _ACTIVATIONS[model.activation]
    layers = [X]
    h = X
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = act(h @ w + b)
        layers.append(h)
    z = (h @ model.weights[-1] + model.biases[-1])[:, 0]
    return layers, z


def forward(model: MlpModel, X) -> np.ndarray:
    """Predicted incidence angles for each feature row."""
    if not np.all(np.isfinite(model.flat())):
        raise ModelCorruptError("model has non-finite parameters")
    _, z = _forward_cache(model, _check_features(X))
    return HALF_PI * _sigmoid(z)


def mae_loss(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=float).ravel()
    t = np.asarray(targets, dtype=float).ravel()
    if p.size == 0 or p.size != t.size:
        raise ContractError(f"need equal non-empty lengths, got {p.size} and {t.size}")
    return float(np.mean(np.abs(p - t)))


def backward(model: MlpModel, X, y):
    """Reverse-mode gradient of the batch MAE.

    The subgradient of ``|e|`` at ``e == 0`` is taken as 0.

    Returns ``(loss, grad_weights, grad_biases)``.
    """
    X = _check_features(X)
    y = np.asarray(y, dtype=float).ravel()
    if len(X) == 0 or len(X) != len(y):
        raise ContractError("batch must be non-empty with one target per row")
    _, dact = _ACTIVATIONS[model.activation]
    layers, z = _forward_cache(model, X)
    s = _sigmoid(z)
    pred = HALF_PI * s
    err = pred - y
    loss = float(np.mean(np.abs(err)))

    delta = (np.sign(err) / len(y) * HALF_PI * s * (1.0 - s))[:, None]
    grad_w = [None] * len(model.weights)
    grad_b = [None] * len(model.biases)
    for k in range(len(model.weights) - 1, -1, -1):
        grad_w[k] = layers[k].T @ delta
        grad_b[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ model.weights[k].T) * dact(layers[k])
    return loss, grad_w, grad_b


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 16
    epochs: int = 200
    seed: int = 0
    validation_fraction: float = 0.1
    hidden: tuple = (64, 64)

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.epochs) <= 0:
            raise ValueError("learning_rate, batch_size and epochs must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")


@dataclass
class TrainResult:
    model: MlpModel
    train_loss: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)

    @property
    def final_val_mae(self) -> float:
        return self.val_mae[-1]


def split_train_validation(n, fraction, seed):
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(fraction * n)))
    return order[n_val:], order[:n_val]


def train(X, y, config: TrainConfig = TrainConfig(), model: MlpModel | None = None) -> TrainResult:
    X = _check_features(X)
    y = np.asarray(y, dtype=float).ravel()
    if len(X) != len(y):
        raise ContractError("one target per feature row required")
    if len(X) < MIN_TRAIN_SAMPLES:
        raise InsufficientDataError(f"need at least {MIN_TRAIN_SAMPLES} samples, got {len(X)}")
    if np.any((y < 0) | (y > HALF_PI)) or not np.all(np.isfinite(y)):
        raise ContractError("targets must lie in [0, pi/2]")

    train_idx, val_idx = split_train_validation(len(X), config.validation_fraction, config.seed)
    model = model.copy() if model is not None else MlpModel.init(
        (N_FEATURES, *config.hidden, 1), seed=config.seed
    )
    rng = np.random.default_rng(config.seed + 1)
    result = TrainResult(model)
    for epoch in range(config.epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        total = 0.0
        for start in range(0, order.size, config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, gw, gb = backward(model, X[batch], y[batch])
            total += loss * batch.size
            for k in range(len(gw)):
                model.weights[k] -= config.learning_rate * gw[k]
                model.biases[k] -= config.learning_rate * gb[k]
        epoch_loss = total / order.size
        if not np.isfinite(epoch_loss) or not np.all(np.isfinite(model.flat())):
            raise TrainingDivergedError(epoch)
        result.train_loss.append(epoch_loss)
        result.val_mae.append(mae_loss(forward(model, X[val_idx]), y[val_idx]))
    return result


_MAGIC = "# lidar_intensity alpha-regressor v1"


def save_model(model: MlpModel, path, extra_header: dict | None = None):
    lines = [_MAGIC]
    for key, value in (extra_header or {}).items():
        lines.append(f"# {key} = {value}")
    lines += [
        "dims " + " ".join(str(d) for d in model.dims),
        f"activation {model.activation}",
        f"seed {model.seed}",
        f"params {model.n_params}",
    ]
    lines += [repr(float(v)) for v in model.flat()]
    atomic_write(path, "\n".join(lines) + "\n")


def load_model(path) -> MlpModel:
    header, values = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            if key in ("dims", "activation", "seed", "params"):
                header[key] = rest
            else:
                values.append(line)
    try:
        dims = tuple(int(v) for v in header["dims"].split())
        activation = header["activation"].strip()
        seed = int(header["seed"])
        theta = np.array([float(v) for v in values])
    except (KeyError, ValueError) as exc:
        raise FileFormatError(f"{path}: malformed model file ({exc})") from None
    if activation not in _ACTIVATIONS:
        raise FileFormatError(f"{path}: unknown activation {activation!r}")
    model = MlpModel.zeros(dims)
    model.activation, model.seed = activation, seed
    if theta.size != model.n_params or int(header.get("params", theta.size)) != theta.size:
        raise FileFormatError(
            f"{path}: header dims {dims} need {model.n_params} parameters, file has {theta.size}"
        )
    model.set_flat(theta)
    return model


class IncidenceAngleRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn wrapper around :func:`train` and :func:`forward`."""

    def __init__(
        self,
        hidden=(64, 64),
        learning_rate=1e-2,
        batch_size=16,
        epochs=200,
        validation_fraction=0.1,
        seed=0,
    ):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.validation_fraction = validation_fraction
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        config = TrainConfig(
            self.learning_rate, self.batch_size, self.epochs, self.seed,
            self.validation_fraction, tuple(self.hidden),
        )
        result = train(X, y, config)
        self.model_ = result.model
        self.train_loss_ = result.train_loss
        self.val_mae_ = result.val_mae
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_model(cls, model: MlpModel) -> "IncidenceAngleRegressor":
        est = cls(hidden=tuple(model.dims[1:-1]), seed=model.seed)
        est.model_ = model
        est.n_features_in_ = model.dims[0]
        return est

    def predict(self, X):
        check_is_fitted(self, "model_")
        return forward(self.model_, check_array(X))

    def score(self, X, y, sample_weight=None):
        """Negative mean absolute error (higher is better)."""
        return -mae_loss(self.predict(X), y)
