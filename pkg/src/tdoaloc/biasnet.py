"""Feed-forward network for TDOA bias prediction.

Plain numpy implementation sized for MCU-class deployment studies: dense
layers, relu/tanh activations, mini-batch gradient descent with early
stopping, and a little-endian binary model file (magic ``TDOANN1``).

Model file layout, in order, all little-endian:

* magic, 7 bytes: ``TDOANN1`` (the trailing ``1`` is the format version)
* activation, u8: 0 = relu, 1 = tanh
* layer count L, u32
* widths, (L+1) x u32: input width, hidden widths..., output width
* output scale, f64
* per layer: weights row-major f64 (out x in), then biases f64 (out)
* input normalization: means f64 (input width), then stds f64 (input width)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

MODEL_MAGIC = b"TDOANN1"

_ACTIVATIONS = ("relu", "tanh")


class ModelFileError(ValueError):
    """Raised when a model file cannot be parsed."""


@dataclass
class MlpModel:
    """Dense network parameters plus input-normalization statistics.

    ``weights[k]`` has shape (out_k, in_k); prediction is
    ``output_scale * net((x - input_mean) / input_std)``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"
    input_mean: np.ndarray = None
    input_std: np.ndarray = None
    output_scale: float = 1.0

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty and parallel")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {k}: weight/bias shapes inconsistent")
            if k > 0 and W.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k}: input width does not match layer {k-1}")
        if self.weights[-1].shape[0] != 1:
            raise ValueError("output layer must have width 1")
        d = self.input_dim
        if self.input_mean is None:
            self.input_mean = np.zeros(d)
        if self.input_std is None:
            self.input_std = np.ones(d)
        self.input_mean = np.asarray(self.input_mean, dtype=float)
        self.input_std = np.asarray(self.input_std, dtype=float)
        if self.input_mean.shape != (d,) or self.input_std.shape != (d,):
            raise ValueError("normalization stats must match the input width")
        if np.any(self.input_std <= 0.0):
            raise ValueError("input_std entries must be positive")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim] + [W.shape[0] for W in self.weights]

    def copy(self) -> "MlpModel":
        return replace(
            self,
            weights=[W.copy() for W in self.weights],
            biases=[b.copy() for b in self.biases],
            input_mean=self.input_mean.copy(),
            input_std=self.input_std.copy(),
        )


@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch gradient-descent settings."""

    batch_size: int = 256
    learning_rate: float = 0.05
    max_epochs: int = 200
    patience: int = 5
    rng_seed: int = 0
    halve_lr_on_increase: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TrainResult:
    """Best model snapshot plus the per-epoch loss trace."""

    model: MlpModel
    train_mse: list[float]
    val_mse: list[float]
    best_epoch: int
    stopped_epoch: int


def init_model(
    input_dim: int,
    hidden=(30, 30, 30),
    activation: str = "relu",
    rng=None,
) -> MlpModel:
    """Glorot-uniform initialization, deterministic for a seeded ``rng``."""
    rng = np.random.default_rng(rng)
    dims = [input_dim] + list(hidden) + [1]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights=weights, biases=biases, activation=activation)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(float)
    t = np.tanh(z)
    return 1.0 - t * t


def _as_batch(chi) -> tuple[np.ndarray, bool]:
    """Accept a FeatureVector, flat vector, or (N, d) matrix."""
    if hasattr(chi, "as_array"):
        chi = chi.as_array()
    X = np.asarray(chi, dtype=float)
    if X.ndim == 1:
        return X[None, :], True
    if X.ndim == 2:
        return X, False
    raise ValueError("feature input must be a vector or a 2-D batch")


def _forward_cached(model: MlpModel, X: np.ndarray):
    """Forward pass keeping pre-activations for backprop."""
    if X.shape[1] != model.input_dim:
        raise ValueError(
            f"feature width {X.shape[1]} does not match model input {model.input_dim}"
        )
    h = (X - model.input_mean) / model.input_std
    inputs = [h]
    pre = []
    n = len(model.weights)
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W.T + b
        pre.append(z)
        h = _activate(z, model.activation) if k < n - 1 else z
        if k < n - 1:
            inputs.append(h)
    return model.output_scale * h[:, 0], inputs, pre


def forward(model: MlpModel, chi):
    """Predicted bias in meters; scalar for a single feature vector."""
    X, single = _as_batch(chi)
    out, _, _ = _forward_cached(model, X)
    return float(out[0]) if single else out


def _batch_gradients(model: MlpModel, X: np.ndarray, y: np.ndarray):
    """Mean over the batch of d(0.5 * (forward - target)^2)/d(theta)."""
    pred, inputs, pre = _forward_cached(model, X)
    n = X.shape[0]
    # d loss / d raw network output, including the output scaling
    delta = ((pred - y) * model.output_scale)[:, None] / n
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.weights)
    for k in range(len(model.weights) - 1, -1, -1):
        grads_w[k] = delta.T @ inputs[k]
        grads_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ model.weights[k]) * _activate_grad(
                pre[k - 1], model.activation
            )
    return float(np.mean((pred - y) ** 2)), list(zip(grads_w, grads_b))


def backward(model: MlpModel, chi, target: float):
    """Per-parameter gradient of 0.5*(forward(chi) - target)^2.

    Returns one (dW, db) pair per layer, in layer order.
    """
    X, single = _as_batch(chi)
    if not single:
        raise ValueError("backward expects a single feature vector")
    _, grads = _batch_gradients(model, X, np.array([float(target)]))
    return grads


def mse(model: MlpModel, X: np.ndarray, y: np.ndarray) -> float:
    pred, _, _ = _forward_cached(model, np.asarray(X, dtype=float))
    return float(np.mean((pred - np.asarray(y, dtype=float)) ** 2))


def fit_normalization(model: MlpModel, X: np.ndarray) -> None:
    """Set the model's input standardization from a feature matrix.

    Constant features get unit scale so standardization stays well defined.
    """
    X = np.asarray(X, dtype=float)
    model.input_mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0.0] = 1.0
    model.input_std = std


def train(
    train_set,
    val_set,
    config: TrainConfig,
    hidden=(30, 30, 30),
    activation: str = "relu",
) -> TrainResult:
    """Mini-batch gradient descent with early stopping on validation MSE.

    ``train_set`` and ``val_set`` are (features, labels) pairs. Training
    halts once validation MSE has increased over ``patience`` consecutive
    epochs (or at ``max_epochs``); the returned model is the snapshot with
    the lowest validation MSE seen.
    """
    X_tr, y_tr = (np.asarray(a, dtype=float) for a in train_set)
    X_val, y_val = (np.asarray(a, dtype=float) for a in val_set)
    if X_tr.size == 0 or X_val.size == 0:
        raise ValueError("training and validation sets must be non-empty")
    if not (np.all(np.isfinite(X_tr)) and np.all(np.isfinite(y_tr))):
        raise ValueError("training data must be finite")

    rng = np.random.default_rng(config.rng_seed)
    model = init_model(X_tr.shape[1], hidden=hidden, activation=activation, rng=rng)
    fit_normalization(model, X_tr)

    lr = config.learning_rate
    n = X_tr.shape[0]
    train_hist: list[float] = []
    val_hist: list[float] = []
    best = model.copy()
    best_val = np.inf
    best_epoch = -1
    prev_val = np.inf
    prev_train = np.inf
    rises = 0
    epoch = 0

    while epoch < config.max_epochs:
        snapshot = model.copy() if config.halve_lr_on_increase else None
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            _, grads = _batch_gradients(model, X_tr[idx], y_tr[idx])
            for (W, b), (dW, db) in zip(zip(model.weights, model.biases), grads):
                W -= lr * dW
                b -= lr * db
        train_loss = mse(model, X_tr, y_tr)
        val_loss = mse(model, X_val, y_val)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise RuntimeError(f"training diverged at epoch {epoch}")

        if config.halve_lr_on_increase and train_loss > prev_train:
            # Revert the epoch and retry with a smaller step.
            model = snapshot
            lr *= 0.5
            if lr < 1e-12:
                break
            continue

        train_hist.append(train_loss)
        val_hist.append(val_loss)
        prev_train = train_loss
        if val_loss < best_val:
            best_val = val_loss
            best = model.copy()
            best_epoch = epoch
        rises = rises + 1 if val_loss > prev_val else 0
        prev_val = val_loss
        epoch += 1
        if rises >= config.patience:
            break

    return TrainResult(
        model=best,
        train_mse=train_hist,
        val_mse=val_hist,
        best_epoch=best_epoch,
        stopped_epoch=len(train_hist) - 1,
    )


def save_model(model: MlpModel, path) -> None:
    """Write the versioned binary model file."""
    parts = [MODEL_MAGIC]
    parts.append(struct.pack("<B", _ACTIVATIONS.index(model.activation)))
    dims = model.layer_dims
    parts.append(struct.pack("<I", len(model.weights)))
    parts.append(struct.pack(f"<{len(dims)}I", *dims))
    parts.append(struct.pack("<d", model.output_scale))
    for W, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(model.input_mean, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(model.input_std, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise ModelFileError("truncated model file")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def f64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").copy()


def load_model(path) -> MlpModel:
    """Read a model file; inverse of :func:`save_model` bit for bit."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    magic = r.take(len(MODEL_MAGIC))
    if magic != MODEL_MAGIC:
        if magic[:6] == MODEL_MAGIC[:6]:
            raise ModelFileError(f"unsupported model version {magic[6:]!r}")
        raise ModelFileError("unrecognized model file")
    act_id = struct.unpack("<B", r.take(1))[0]
    if act_id >= len(_ACTIVATIONS):
        raise ModelFileError(f"unknown activation id {act_id}")
    n_layers = struct.unpack("<I", r.take(4))[0]
    if n_layers < 1 or n_layers > 1024:
        raise ModelFileError(f"dimension mismatch: implausible layer count {n_layers}")
    dims = struct.unpack(f"<{n_layers + 1}I", r.take(4 * (n_layers + 1)))
    if any(d < 1 or d > 1 << 20 for d in dims) or dims[-1] != 1:
        raise ModelFileError(f"dimension mismatch: bad layer widths {dims}")
    output_scale = struct.unpack("<d", r.take(8))[0]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(r.f64(fan_out * fan_in).reshape(fan_out, fan_in))
        biases.append(r.f64(fan_out))
    mean = r.f64(dims[0])
    std = r.f64(dims[0])
    if r.off != len(blob):
        raise ModelFileError("dimension mismatch: trailing bytes after model data")
    try:
        return MlpModel(
            weights=weights,
            biases=biases,
            activation=_ACTIVATIONS[act_id],
            input_mean=mean,
            input_std=std,
            output_scale=output_scale,
        )
    except ValueError as exc:
        raise ModelFileError(f"dimension mismatch: {exc}") from exc
