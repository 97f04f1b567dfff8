"""Adam + MSE training of the IRON network, dataset files and loss logs."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binio import Reader, header
from .errors import ConfigError, DivergenceError, EmptyInputError, FormatError, ShapeError
from .landscape import LABEL_SCALE, TrainingSample
from .network import IronModel, backward, forward

log = logging.getLogger(__name__)

DATASET_MAGIC = b"IRND"
DATASET_VERSION = 1
OUTPUT_DIM = 6


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 40
    batch_size: int = 64
    seed: int = 0
    val_fraction: float = 0.1
    precision: str = "float32"  # arithmetic used while fitting
    recalibrate_bn: bool = True  # exact batch-norm statistics after the last epoch

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError(f"epochs must be an integer >= 1, got {self.epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 2:
            raise ConfigError(f"batch_size must be an integer >= 2, got {self.batch_size}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be 'float32' or 'float64', got {self.precision!r}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if not isinstance(self.recalibrate_bn, bool):
            raise ConfigError(f"recalibrate_bn must be true or false, got {self.recalibrate_bn!r}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def mse_loss(prediction, target) -> tuple[float, np.ndarray]:
    """Mean squared error over batch and components, and its gradient."""
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction {prediction.shape} and target {target.shape} differ")
    diff = prediction - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig = TrainConfig()):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if params.keys() != grads.keys():
        raise ShapeError("parameter and gradient names differ")
    state.t += 1
    c1 = 1.0 - cfg.beta1**state.t
    c2 = 1.0 - cfg.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
    return params, state


# -- datasets -------------------------------------------------------------------

def stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    """Inputs ``(n, 9, 9, 9)`` and 3-component labels ``(n, 3)`` from samples."""
    samples = list(samples)
    if not samples:
        raise EmptyInputError("dataset is empty")
    x = np.stack([np.asarray(s.input, dtype=np.float64) for s in samples])
    y = np.stack([np.asarray(s.label, dtype=np.float64) for s in samples])
    return x, y


def pad_labels(labels: np.ndarray) -> np.ndarray:
    """Zero-fill label columns 4-6 (angle-offset slots)."""
    labels = np.asarray(labels, dtype=np.float64)
    out = np.zeros((labels.shape[0], OUTPUT_DIM))
    out[:, :labels.shape[1]] = labels
    return out


def _as_arrays(dataset):
    if isinstance(dataset, tuple):
        x, y = (np.asarray(a, dtype=np.float64) for a in dataset)
        if len(x) == 0:
            raise EmptyInputError("dataset is empty")
        return x, y
    return stack_samples(dataset)


def split_dataset(x, y, val_fraction: float, seed: int):
    """Seeded shuffle split into (train, validation) array pairs."""
    perm = np.random.default_rng(seed).permutation(len(x))
    n_val = int(round(len(x) * val_fraction))
    val, tr = perm[:n_val], perm[n_val:]
    return (x[tr], y[tr]), (x[val], y[val])


def _batches(perm: np.ndarray, size: int) -> list[np.ndarray]:
    chunks = [perm[i:i + size] for i in range(0, len(perm), size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate(chunks[-2:])
        chunks.pop()
    return chunks


def train(model: IronModel, dataset, cfg: TrainConfig = TrainConfig(), on_epoch=None):
    """Fit ``model`` in place; returns ``(model, history)`` of epoch-mean losses.

    ``dataset`` is a list of :class:`TrainingSample` or an ``(inputs, labels)``
    pair of arrays. Labels with three components are zero-padded to six. The
    model is first cast to ``cfg.precision``.
    """
    x, y = _as_arrays(dataset)
    if len(x) < cfg.batch_size:
        raise EmptyInputError(f"dataset has {len(x)} samples, fewer than batch_size {cfg.batch_size}")
    targets = pad_labels(y)
    model.cast(cfg.precision)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    params = model.parameters()
    history = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for b, idx in enumerate(_batches(rng.permutation(len(x)), cfg.batch_size)):
            out, cache = forward(model, x[idx], mode="train")
            loss, grad = mse_loss(out, targets[idx])
            if not np.isfinite(loss):
                raise DivergenceError(epoch, b, loss)
            grads, _ = backward(model, cache, grad)
            adam_step(params, grads, state, cfg)
            model.version += 1
            total += loss * len(idx)
        history.append(total / len(x))
        log.info("epoch %d/%d  loss %.6g", epoch + 1, cfg.epochs, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    if cfg.recalibrate_bn:
        recalibrate_batchnorm(model, x, cfg.batch_size, rng)
    return model, history


def recalibrate_batchnorm(model: IronModel, x: np.ndarray, batch_size: int, rng) -> IronModel:
    """Replace the running batch-norm statistics with their average over one
    shuffled pass of training-mode batches.

    The momentum-0.1 running averages mostly reflect the last few batches,
    taken while the weights were still moving; for these small windows that
    estimate is noisy enough to cost most of the inference accuracy.
    """
    blocks = [b.bn for b in model.conv_blocks]
    momenta = [bn.momentum for bn in blocks]
    try:
        for k, idx in enumerate(_batches(rng.permutation(len(x)), batch_size), start=1):
            for bn in blocks:
                bn.momentum = 1.0 / k  # cumulative mean over batches
            forward(model, x[idx], mode="train")
    finally:
        for bn, m in zip(blocks, momenta):
            bn.momentum = m
    model.version += 1
    return model


def predict_batches(predictor, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    return np.concatenate([np.asarray(predictor(x[i:i + chunk]), dtype=np.float64)
                           for i in range(0, len(x), chunk)])


def evaluate_split(predictor, dataset, threshold: float = 1.0 / LABEL_SCALE) -> tuple[float, float]:
    """Mean MSE over 6 padded outputs and the fraction of samples whose first
    three outputs all lie strictly within ``threshold`` of the label."""
    x, y = _as_arrays(dataset)
    pred = predict_batches(predictor, x)
    loss, _ = mse_loss(pred, pad_labels(y))
    within = np.all(np.abs(pred[:, :3] - y[:, :3]) < threshold, axis=1)
    return loss, float(within.mean())


def save_dataset(samples_or_arrays, path) -> None:
    x, y = _as_arrays(samples_or_arrays)
    if x.shape[1:] != (9, 9, 9) or y.shape[1:] != (3,):
        raise ShapeError(f"dataset arrays must be (n, 9, 9, 9) and (n, 3), got {x.shape} and {y.shape}")
    body = np.concatenate([x.reshape(len(x), -1), y], axis=1).astype("<f4")
    Path(path).write_bytes(header(DATASET_MAGIC, DATASET_VERSION)
                           + struct.pack("<QII", len(x), 9, 3) + body.tobytes())


def load_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IRND file into float64 ``(inputs, labels)`` arrays."""
    r = Reader(Path(path).read_bytes(), f"dataset file {path}")
    r.expect_magic(DATASET_MAGIC, DATASET_VERSION)
    n, edge, arity = r.unpack("QII")
    if edge != 9 or arity != 3:
        raise FormatError(f"dataset file {path}: unsupported edge {edge} / label arity {arity}")
    width = edge**3 + arity
    body = np.frombuffer(r.take(4 * n * width), dtype="<f4").reshape(n, width).astype(np.float64)
    r.finish()
    return body[:, :edge**3].reshape(n, edge, edge, edge), body[:, edge**3:]


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(history, start=1):
            w.writerow([epoch, repr(float(loss))])
