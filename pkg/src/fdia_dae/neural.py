"""LSTM denoising autoencoder in plain numpy.

Graph: LSTM(u1, sequences) -> LSTM(u2, last state) -> repeat w times ->
LSTM(u3, sequences) -> per-timestep dense head back to n_states.

Gates use the i, f, g, o ordering with sigmoid gates and a tanh candidate.
The cell-output activation is configurable (`relu` by default, `tanh` for the
textbook cell).

Weight file layout (little-endian)::

    header  "<8sHIIIIIBII" magic b"FDIADAE\\0", version, w, n_states,
                           u1, u2, u3, activation code, epochs_trained,
                           slack_index
    float64 tensors in `_TENSOR_ORDER`, then normalizer mean and std
    32-byte SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

from .dataset import DatasetSplit, Normalizer
from .errors import (
    ChecksumError,
    ConfigError,
    DimensionError,
    ModelFileError,
    ModelVersionError,
    TrainingDivergedError,
)
from .log import get_logger

logger = get_logger("neural")

MODEL_MAGIC = b"FDIADAE\0"
MODEL_VERSION = 2
_HEADER = struct.Struct("<8sHIIIIIBII")
_ACTIVATIONS = {"relu": 0, "tanh": 1}
_TENSOR_ORDER = (
    "enc1.w_in",
    "enc1.w_rec",
    "enc1.bias",
    "enc2.w_in",
    "enc2.w_rec",
    "enc2.bias",
    "dec1.w_in",
    "dec1.w_rec",
    "dec1.bias",
    "head.w",
    "head.b",
)
DESK_UNITS = (32, 16, 32)
FULL_UNITS = (128, 64, 128)
UNIT_PRESETS = {"desk": DESK_UNITS, "full": FULL_UNITS}
EVAL_CHUNK = 2048

Params = Dict[str, np.ndarray]


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


@dataclass(eq=False)
class LstmLayerParams:
    w_in: np.ndarray
    w_rec: np.ndarray
    bias: np.ndarray
    units: int
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown cell activation {self.activation!r}")
        u = self.units
        if self.w_rec.shape != (4 * u, u) or self.bias.shape != (4 * u,):
            raise DimensionError(f"LSTM tensors inconsistent with {u} units")
        if self.w_in.ndim != 2 or self.w_in.shape[0] != 4 * u:
            raise DimensionError(f"input weights must have {4 * u} rows")

    @property
    def input_dim(self) -> int:
        return int(self.w_in.shape[1])

    @classmethod
    def init(
        cls, rng: np.random.Generator, input_dim: int, units: int, activation: str = "relu"
    ) -> "LstmLayerParams":
        # One Glorot draw per gate block.
        w_in = np.concatenate([_glorot(rng, units, input_dim) for _ in range(4)])
        w_rec = np.concatenate([_glorot(rng, units, units) for _ in range(4)])
        bias = np.zeros(4 * units)
        bias[units : 2 * units] = 1.0
        return cls(w_in=w_in, w_rec=w_rec, bias=bias, units=units, activation=activation)

    @classmethod
    def zeros(cls, input_dim: int, units: int, activation: str = "relu") -> "LstmLayerParams":
        return cls(
            w_in=np.zeros((4 * units, input_dim)),
            w_rec=np.zeros((4 * units, units)),
            bias=np.zeros(4 * units),
            units=units,
            activation=activation,
        )


@dataclass
class _LayerCache:
    x: np.ndarray
    gates: List[Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list)
    cells: List[np.ndarray] = field(default_factory=list)
    hiddens: List[np.ndarray] = field(default_factory=list)


def _cell_out(c: np.ndarray, activation: str) -> np.ndarray:
    return np.maximum(c, 0.0) if activation == "relu" else np.tanh(c)


def _cell_out_grad(c: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (c > 0.0).astype(float)
    t = np.tanh(c)
    return 1.0 - t * t


def lstm_forward(layer: LstmLayerParams, x: np.ndarray) -> Tuple[np.ndarray, _LayerCache]:
    """Run a layer over (B, T, d) from zero state; returns hidden states (B, T, u)."""

    batch, steps, _ = x.shape
    u = layer.units
    h = np.zeros((batch, u))
    c = np.zeros((batch, u))
    cache = _LayerCache(x=x, cells=[c], hiddens=[h])
    out = np.empty((batch, steps, u))
    x_proj = x @ layer.w_in.T + layer.bias
    for t in range(steps):
        a = x_proj[:, t] + h @ layer.w_rec.T
        i = expit(a[:, :u])
        f = expit(a[:, u : 2 * u])
        g = np.tanh(a[:, 2 * u : 3 * u])
        o = expit(a[:, 3 * u :])
        c = f * c + i * g
        h = o * _cell_out(c, layer.activation)
        cache.gates.append((i, f, g, o))
        cache.cells.append(c)
        cache.hiddens.append(h)
        out[:, t] = h
    return out, cache


def lstm_backward(
    layer: LstmLayerParams, cache: _LayerCache, d_out: np.ndarray
) -> Tuple[np.ndarray, Params]:
    """Backpropagation through time for one layer.

    `d_out` is dL/dh for every timestep (B, T, u). Returns dL/dx and the
    parameter gradients keyed `w_in`, `w_rec`, `bias`.
    """

    x = cache.x
    _, steps, _ = x.shape
    u = layer.units
    dw_in = np.zeros_like(layer.w_in)
    dw_rec = np.zeros_like(layer.w_rec)
    dbias = np.zeros_like(layer.bias)
    dx = np.zeros_like(x)
    dh_next = np.zeros_like(cache.hiddens[0])
    dc_next = np.zeros_like(cache.cells[0])
    da = np.empty((x.shape[0], 4 * u))

    for t in reversed(range(steps)):
        i, f, g, o = cache.gates[t]
        c = cache.cells[t + 1]
        c_prev = cache.cells[t]
        h_prev = cache.hiddens[t]
        dh = d_out[:, t] + dh_next
        act = _cell_out(c, layer.activation)
        do = dh * act
        dc = dc_next + dh * o * _cell_out_grad(c, layer.activation)
        da[:, :u] = dc * g * i * (1.0 - i)
        da[:, u : 2 * u] = dc * c_prev * f * (1.0 - f)
        da[:, 2 * u : 3 * u] = dc * i * (1.0 - g * g)
        da[:, 3 * u :] = do * o * (1.0 - o)
        dc_next = dc * f
        dw_in += da.T @ x[:, t]
        dw_rec += da.T @ h_prev
        dbias += da.sum(axis=0)
        dx[:, t] = da @ layer.w_in
        dh_next = da @ layer.w_rec
    return dx, {"w_in": dw_in, "w_rec": dw_rec, "bias": dbias}


@dataclass(eq=False)
class DaeModel:
    enc1: LstmLayerParams
    enc2: LstmLayerParams
    dec1: LstmLayerParams
    head_w: np.ndarray
    head_b: np.ndarray
    w: int
    normalizer: Optional[Normalizer] = None
    epochs_trained: int = 0
    # Angle coordinate of the reference bus; corrections pin it to 0.
    slack_index: int = 0

    def __post_init__(self) -> None:
        n = self.n_states
        if not 0 <= self.slack_index < max(1, n // 2):
            raise DimensionError(f"slack_index {self.slack_index} is not an angle coordinate")
        if self.enc1.input_dim != n:
            raise DimensionError("encoder input width must equal n_states")
        if self.enc2.input_dim != self.enc1.units or self.dec1.input_dim != self.enc2.units:
            raise DimensionError("layer widths do not chain")
        if self.head_w.shape != (n, self.dec1.units):
            raise DimensionError("head weights do not match the decoder width")
        if self.w < 2:
            raise ConfigError("window size must be at least 2")
        if self.normalizer is not None and self.normalizer.n_states != n:
            raise DimensionError("normalizer width does not match the model")

    @property
    def n_states(self) -> int:
        return int(self.head_b.size)

    @property
    def units(self) -> Tuple[int, int, int]:
        return self.enc1.units, self.enc2.units, self.dec1.units

    @property
    def activation(self) -> str:
        return self.enc1.activation

    @classmethod
    def init(
        cls,
        n_states: int,
        w: int,
        *,
        units: Tuple[int, int, int] = DESK_UNITS,
        activation: str = "relu",
        seed: int = 0,
        normalizer: Optional[Normalizer] = None,
        slack_index: int = 0,
    ) -> "DaeModel":
        rng = np.random.default_rng(seed)
        u1, u2, u3 = units
        return cls(
            enc1=LstmLayerParams.init(rng, n_states, u1, activation),
            enc2=LstmLayerParams.init(rng, u1, u2, activation),
            dec1=LstmLayerParams.init(rng, u2, u3, activation),
            head_w=_glorot(rng, n_states, u3),
            head_b=np.zeros(n_states),
            w=w,
            normalizer=normalizer,
            slack_index=slack_index,
        )

    def parameters(self) -> Params:
        """Live references to every trainable tensor."""

        return {
            "enc1.w_in": self.enc1.w_in,
            "enc1.w_rec": self.enc1.w_rec,
            "enc1.bias": self.enc1.bias,
            "enc2.w_in": self.enc2.w_in,
            "enc2.w_rec": self.enc2.w_rec,
            "enc2.bias": self.enc2.bias,
            "dec1.w_in": self.dec1.w_in,
            "dec1.w_rec": self.dec1.w_rec,
            "dec1.bias": self.dec1.bias,
            "head.w": self.head_w,
            "head.b": self.head_b,
        }

    def reconstruct(self, windows: np.ndarray) -> np.ndarray:
        return reconstruct(self, windows)

    def snapshot(self) -> Params:
        return {name: value.copy() for name, value in self.parameters().items()}

    def restore(self, params: Params) -> None:
        for name, value in self.parameters().items():
            value[...] = params[name]


@dataclass
class _ForwardCache:
    enc1: _LayerCache
    enc2: _LayerCache
    dec1: _LayerCache
    dec_out: np.ndarray


def _check_batch(model: DaeModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 3 or batch.shape[1:] != (model.w, model.n_states):
        raise DimensionError(
            f"batch shape {batch.shape} does not match (B, {model.w}, {model.n_states})"
        )
    return batch


def _forward(model: DaeModel, batch: np.ndarray) -> Tuple[np.ndarray, _ForwardCache]:
    h1, c1 = lstm_forward(model.enc1, batch)
    h2, c2 = lstm_forward(model.enc2, h1)
    bridge = np.repeat(h2[:, -1:, :], model.w, axis=1)
    h3, c3 = lstm_forward(model.dec1, bridge)
    out = h3 @ model.head_w.T + model.head_b
    return out, _ForwardCache(enc1=c1, enc2=c2, dec1=c3, dec_out=h3)


def forward(model: DaeModel, batch: np.ndarray) -> np.ndarray:
    """Normalized (B, w, n) windows in, reconstructed (B, w, n) windows out."""

    batch = _check_batch(model, batch)
    if batch.shape[0] <= EVAL_CHUNK:
        return _forward(model, batch)[0]
    return np.concatenate(
        [_forward(model, batch[s : s + EVAL_CHUNK])[0] for s in range(0, batch.shape[0], EVAL_CHUNK)]
    )


def reconstruct(model: DaeModel, windows: np.ndarray) -> np.ndarray:
    """Forward pass in physical units through the model's normalizer."""

    if model.normalizer is None:
        raise ModelFileError("model has no normalizer; train it before reconstructing")
    normalized = model.normalizer.apply(windows)
    return model.normalizer.invert(forward(model, normalized))


def mse(outputs: np.ndarray, targets: np.ndarray) -> float:
    outputs = np.asarray(outputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if outputs.shape != targets.shape:
        raise DimensionError(f"outputs {outputs.shape} and targets {targets.shape} differ")
    if outputs.size == 0:
        raise DimensionError("empty batch")
    diff = outputs - targets
    return float(np.mean(diff * diff))


def loss(outputs: np.ndarray, targets: np.ndarray) -> float:
    """RMSE over every element."""

    return math.sqrt(mse(outputs, targets))


def backward(model: DaeModel, batch: np.ndarray, targets: np.ndarray) -> Tuple[float, Params]:
    """Mean squared error of the batch and its exact gradients."""

    batch = _check_batch(model, batch)
    out, cache = _forward(model, batch)
    value = mse(out, targets)
    d_out = 2.0 * (out - targets) / out.size

    grads: Params = {}
    grads["head.w"] = np.einsum("btn,btu->nu", d_out, cache.dec_out)
    grads["head.b"] = d_out.sum(axis=(0, 1))
    d_h3 = d_out @ model.head_w

    d_bridge, g3 = lstm_backward(model.dec1, cache.dec1, d_h3)
    d_h2 = np.zeros((batch.shape[0], model.w, model.enc2.units))
    d_h2[:, -1] = d_bridge.sum(axis=1)
    d_h1, g2 = lstm_backward(model.enc2, cache.enc2, d_h2)
    _, g1 = lstm_backward(model.enc1, cache.enc1, d_h1)

    for prefix, layer_grads in (("enc1", g1), ("enc2", g2), ("dec1", g3)):
        for key, grad in layer_grads.items():
            grads[f"{prefix}.{key}"] = grad
    return value, grads


def clip_gradients(grads: Params, clip_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most clip_norm."""

    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if clip_norm > 0.0 and norm > clip_norm:
        scale = clip_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


class Adam:
    def __init__(
        self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
    ) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Params = {}
        self.v: Params = {}

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class Sgd:
    def __init__(self, lr: float = 1e-2) -> None:
        self.lr = lr

    def step(self, params: Params, grads: Params) -> None:
        for name, p in params.items():
            p -= self.lr * grads[name]


@dataclass
class TrainConfig:
    """Minibatch schedule.

    The step size of epoch k (counted across resumes) is
    `learning_rate * lr_decay ** (k - 1)`.
    """

    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 5e-3
    optimizer: str = "adam"
    seed: int = 0
    clip_norm: float = 5.0
    patience: int = 8
    lr_decay: float = 0.92

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if not self.learning_rate > 0.0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.clip_norm < 0.0:
            raise ConfigError("clip_norm must be non-negative")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("lr_decay must lie in (0, 1]")


@dataclass
class TrainReport:
    epochs: List[int] = field(default_factory=list)
    train_rmse: List[float] = field(default_factory=list)
    val_rmse: List[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_rmse: float = float("inf")
    stopped_early: bool = False

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"epoch": self.epochs, "train_rmse": self.train_rmse, "val_rmse": self.val_rmse}
        )


def train(model: DaeModel, split: DatasetSplit, cfg: TrainConfig) -> TrainReport:
    """Minibatch training on a normalized split; keeps the best-validation weights.

    Epoch numbering continues from `model.epochs_trained`. A non-finite loss
    restores the best weights seen so far and raises TrainingDivergedError.
    """

    data = split.train
    if len(data) == 0:
        raise ConfigError("training split is empty")
    if data.w != model.w or data.n_states != model.n_states:
        raise DimensionError(
            f"dataset windows ({data.w}, {data.n_states}) do not match model ({model.w}, {model.n_states})"
        )
    monitor = split.val if len(split.val) else data
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(cfg.learning_rate) if cfg.optimizer == "adam" else Sgd(cfg.learning_rate)
    params = model.parameters()

    report = TrainReport()
    best = model.snapshot()
    stale = 0
    first_epoch = model.epochs_trained + 1
    for epoch in range(first_epoch, first_epoch + cfg.epochs):
        optimizer.lr = cfg.learning_rate * cfg.lr_decay ** (epoch - 1)
        order = rng.permutation(len(data))
        total = 0.0
        for batch_index, start in enumerate(range(0, len(data), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            value, grads = backward(model, data.inputs[idx], data.targets[idx])
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                model.restore(best)
                logger.error(
                    "neural.train diverged epoch=%d batch=%d best_epoch=%d",
                    epoch,
                    batch_index,
                    report.best_epoch,
                )
                raise TrainingDivergedError(
                    "training loss became non-finite", epoch=epoch, batch=batch_index
                )
            clip_gradients(grads, cfg.clip_norm)
            optimizer.step(params, grads)
            total += value * idx.size

        train_rmse = math.sqrt(total / len(data))
        val_rmse = loss(forward(model, monitor.inputs), monitor.targets)
        report.epochs.append(epoch)
        report.train_rmse.append(train_rmse)
        report.val_rmse.append(val_rmse)
        model.epochs_trained = epoch
        logger.info(
            "neural.train epoch=%d lr=%.2e train_rmse=%.6f val_rmse=%.6f",
            epoch,
            optimizer.lr,
            train_rmse,
            val_rmse,
        )

        if val_rmse < report.best_val_rmse:
            report.best_val_rmse = val_rmse
            report.best_epoch = epoch
            best = model.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                report.stopped_early = True
                logger.info("neural.train early_stop epoch=%d best_epoch=%d", epoch, report.best_epoch)
                break

    model.restore(best)
    return report


def save_model(model: DaeModel, path: str | Path) -> None:
    normalizer = model.normalizer or Normalizer(
        mean=np.zeros(model.n_states), std=np.ones(model.n_states)
    )
    header = _HEADER.pack(
        MODEL_MAGIC,
        MODEL_VERSION,
        model.w,
        model.n_states,
        *model.units,
        _ACTIVATIONS[model.activation],
        model.epochs_trained,
        model.slack_index,
    )
    params = model.parameters()
    body = b"".join(params[name].astype("<f8").tobytes() for name in _TENSOR_ORDER)
    body += normalizer.mean.astype("<f8").tobytes() + normalizer.std.astype("<f8").tobytes()
    payload = header + body
    Path(path).write_bytes(payload + hashlib.sha256(payload).digest())


def _tensor_shapes(n: int, units: Tuple[int, int, int]) -> Dict[str, Tuple[int, ...]]:
    u1, u2, u3 = units
    return {
        "enc1.w_in": (4 * u1, n),
        "enc1.w_rec": (4 * u1, u1),
        "enc1.bias": (4 * u1,),
        "enc2.w_in": (4 * u2, u1),
        "enc2.w_rec": (4 * u2, u2),
        "enc2.bias": (4 * u2,),
        "dec1.w_in": (4 * u3, u2),
        "dec1.w_rec": (4 * u3, u3),
        "dec1.bias": (4 * u3,),
        "head.w": (n, u3),
        "head.b": (n,),
    }


def load_model(path: str | Path) -> DaeModel:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ModelFileError(f"cannot read model {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise ChecksumError(f"model file {path} is truncated")
    magic, version, w, n, u1, u2, u3, act_code, epochs, slack = _HEADER.unpack_from(raw)
    if magic != MODEL_MAGIC:
        raise ModelFileError(f"{path} is not a model file")
    if version != MODEL_VERSION:
        raise ModelVersionError(f"model file version {version}, expected {MODEL_VERSION}")
    activation = {code: name for name, code in _ACTIVATIONS.items()}.get(act_code)
    if activation is None:
        raise ModelFileError(f"unknown activation code {act_code}")
    if slack >= max(1, n // 2):
        raise ModelFileError(f"slack index {slack} is outside the {n}-state layout")

    shapes = _tensor_shapes(n, (u1, u2, u3))
    n_values = sum(int(np.prod(s)) for s in shapes.values()) + 2 * n
    expected = _HEADER.size + 8 * n_values + hashlib.sha256().digest_size
    if len(raw) != expected:
        raise ChecksumError(f"model file {path} has {len(raw)} bytes, expected {expected}")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumError(f"model file {path} failed its checksum")

    values = np.frombuffer(payload, dtype="<f8", offset=_HEADER.size).astype(float)
    tensors: Params = {}
    pos = 0
    for name in _TENSOR_ORDER:
        size = int(np.prod(shapes[name]))
        tensors[name] = values[pos : pos + size].reshape(shapes[name]).copy()
        pos += size
    mean, std = values[pos : pos + n].copy(), values[pos + n : pos + 2 * n].copy()

    def layer(prefix: str, units: int) -> LstmLayerParams:
        return LstmLayerParams(
            w_in=tensors[f"{prefix}.w_in"],
            w_rec=tensors[f"{prefix}.w_rec"],
            bias=tensors[f"{prefix}.bias"],
            units=units,
            activation=activation,
        )

    return DaeModel(
        enc1=layer("enc1", u1),
        enc2=layer("enc2", u2),
        dec1=layer("dec1", u3),
        head_w=tensors["head.w"],
        head_b=tensors["head.b"],
        w=w,
        normalizer=Normalizer(mean=mean, std=std),
        epochs_trained=epochs,
        slack_index=slack,
    )
