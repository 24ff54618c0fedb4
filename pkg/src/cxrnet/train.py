"""Seeded data splits, the Adam optimiser, the training loop and evaluation."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError, InvalidArgumentError, NumericError, ShapeError
from .layers import softmax_xent
from .metrics import EvalReport, build_report
from .model import ModelGraph, save_weights
from .tensor import Rng, Tensor, no_grad


@dataclass
class TrainConfig:
    learning_rate: float = 4e-4
    epochs: int = 10
    batch_size: int = 16
    seed: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {k: v for k, v in values.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


def split_dataset(n: int, fractions=(0.68, 0.16, 0.16), seed: int = 3):
    """Shuffle ``range(n)`` and cut it into train/val/test index arrays.

    Sizes are ``floor(n*train)``, ``floor(n*val)`` and the remainder.
    """
    if n <= 0:
        raise InvalidArgumentError("cannot split an empty dataset")
    f_train, f_val, f_test = (float(f) for f in fractions)
    if min(f_train, f_val, f_test) < 0 or f_train + f_val + f_test > 1 + 1e-9:
        raise InvalidArgumentError(f"invalid split fractions {fractions}")
    # guard against n*f landing a hair below an integer
    n_train = min(n, math.floor(n * f_train + 1e-9))
    n_val = min(n - n_train, math.floor(n * f_val + 1e-9))
    order = Rng(seed).permutation(n)
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), 0)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, cfg: TrainConfig,
              name: str = "param") -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns the new parameter and state."""
    if grad.shape != param.shape:
        raise ShapeError(f"gradient for {name} has shape {grad.shape}, expected {param.shape}")
    if not np.isfinite(grad).all():
        raise NumericError(f"non-finite gradient for parameter {name}")
    b1, b2 = cfg.beta1, cfg.beta2
    t = state.t + 1
    m = b1 * state.m
    m += (1 - b1) * grad
    v = grad * grad
    v *= 1 - b2
    v += b2 * state.v
    # m_hat = m / (1 - b1^t), v_hat = v / (1 - b2^t); temporaries reused in place
    denom = v / (1 - b2 ** t)
    np.sqrt(denom, out=denom)
    denom += cfg.epsilon
    step = m / (1 - b1 ** t)
    step *= cfg.learning_rate
    step /= denom
    return (param - step).astype(param.dtype, copy=False), AdamState(m, v, t)


class Adam:
    def __init__(self, named_params, cfg: TrainConfig):
        self.params = list(named_params)
        self.cfg = cfg
        self.state = {name: AdamState.zeros_like(p.data) for name, p in self.params}

    def step(self) -> None:
        for name, p in self.params:
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self.state[name] = adam_step(p.data, grad, self.state[name], self.cfg, name)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    @property
    def accuracies(self) -> list[float]:
        return [r.train_accuracy for r in self.records]

    def to_csv(self) -> str:
        lines = ["epoch,loss,train_accuracy"]
        lines += [f"{r.epoch},{r.loss!r},{r.train_accuracy!r}" for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def _check_data(g: ModelGraph, x: np.ndarray, y: np.ndarray) -> None:
    if x.shape[1:] != g.input_shape:
        raise ShapeError(f"{g.name}: samples have shape {x.shape[1:]}, model expects {g.input_shape}")
    if y.shape != (x.shape[0], g.classes):
        raise ShapeError(f"{g.name}: labels have shape {y.shape}, expected {(x.shape[0], g.classes)}")


def _per_sample_xent(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -log_probs[np.arange(len(y)), y.argmax(axis=1)]


def fit(g: ModelGraph, data, cfg: TrainConfig | None = None, initialize: bool = True,
        weights_path=None, log_path=None) -> TrainLog:
    """Mini-batch Adam on mean categorical cross-entropy.

    With ``initialize`` the graph is first re-initialised from the seed.  The
    seed also drives the per-epoch shuffle, so identical inputs give
    bit-identical logs and weights.  ``train_accuracy`` counts correct argmax
    predictions made during the epoch's (training-mode) forward passes.  The
    logged loss is the mean of per-sample losses taken in sample order, so it
    does not depend on how the shuffle grouped the samples.
    """
    cfg = cfg or TrainConfig()
    x, y = (np.asarray(a) for a in data)
    _check_data(g, x, y)
    n = x.shape[0]
    if cfg.batch_size > n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds the {n} available samples")
    root = Rng(cfg.seed)
    init_rng, shuffle_rng = root.split(), root.split()
    dtype = np.float32
    if initialize:
        g.initialize(init_rng, dtype=dtype)
    opt = Adam(g.named_parameters(), cfg)
    log = TrainLog()
    with threadpool_limits(limits=1):
        for epoch in range(1, cfg.epochs + 1):
            g.train()
            order = shuffle_rng.permutation(n)
            sample_loss, correct = np.empty(n), 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                xb = Tensor(x[idx].astype(dtype))
                g.zero_grad()
                logits = g(xb)
                loss, probs = softmax_xent(logits, y[idx])
                sample_loss[idx] = _per_sample_xent(logits.data, y[idx])
                loss.backward()
                opt.step()
                correct += int((probs.argmax(axis=1) == y[idx].argmax(axis=1)).sum())
            log.records.append(EpochRecord(epoch, float(sample_loss.mean()), correct / n))
    g.eval()
    if weights_path is not None:
        save_weights(g, weights_path)
    if log_path is not None:
        log.write(log_path)
    return log


def predict_proba(g: ModelGraph, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    g.eval()
    out = []
    with no_grad(), threadpool_limits(limits=1):
        for start in range(0, x.shape[0], batch_size):
            out.append(g.predict_proba(Tensor(np.asarray(x[start:start + batch_size], dtype=np.float32))))
    return np.concatenate(out, axis=0)


def evaluate(g: ModelGraph, data, classes: list[str] | None = None, batch_size: int = 16) -> EvalReport:
    """Inference-mode predictions scored against one-hot labels."""
    x, y = (np.asarray(a) for a in data)
    _check_data(g, x, y)
    classes = list(classes) if classes is not None else [str(i) for i in range(g.classes)]
    return build_report(y.argmax(axis=1), predict_proba(g, x, batch_size), classes)
