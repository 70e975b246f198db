"""Training loop, optimizer, initialization and corruption-aware evaluation."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .corruptions import CorruptionSpec, corrupt_batch
from .data import Dataset, batches
from .models import ModelConfig, ModelState, forward, parameter_shapes

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "EpochRecord",
    "TrainingLog",
    "EvalResult",
    "cross_entropy",
    "xavier_init",
    "init_state",
    "adam_step",
    "train",
    "evaluate",
    "write_log_csv",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 150
    batch_size: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l2: float = 5e-4
    patience: int = 10
    seed: int = 0
    recurrent_dropout: float = 0.2
    dtype: str = "float32"

    def __post_init__(self):
        if self.max_epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("max_epochs >= 0, batch_size >= 1 and patience >= 1 are required")
        if self.lr <= 0 or not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1 or self.adam_eps <= 0 or self.l2 < 0:
            raise ValueError("optimizer rates out of range")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    wall_clock: float


@dataclass
class TrainingLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stop_epoch: int = 0
    diverged: bool = False


@dataclass
class EvalResult:
    accuracy: float
    correct: int
    total: int
    confusion: np.ndarray


def cross_entropy(logits, true_class) -> Tensor:
    return ad.cross_entropy(logits, true_class)


def xavier_init(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Uniform Glorot init; conv filters ``(d, d, K, C)`` use receptive-field fans."""
    if len(shape) == 4:
        d1, d2, k, c = shape
        fan_in, fan_out = d1 * d2 * c, d1 * d2 * k
    elif len(shape) == 2:
        fan_in, fan_out = shape
    else:
        raise ValueError(f"no fan-in/fan-out rule for shape {shape}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_state(config: ModelConfig, seed: int = 0, dtype=None) -> ModelState:
    dtype = dtype or ad.get_dtype()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        data = np.zeros(shape, dtype=dtype) if name.endswith(".b") else xavier_init(shape, rng, dtype)
        params[name] = Tensor(data, requires_grad=True)
    return ModelState(params)


def adam_step(state: ModelState, grads: dict[str, np.ndarray], opt: OptimizerState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam with L2 added to the weight gradients (biases exempt). Updates in place."""
    opt.step += 1
    t = opt.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        if cfg.l2 and not name.endswith(".b"):
            g = g + cfg.l2 * p.data
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        v = opt.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data = (p.data - update).astype(p.data.dtype)


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> int:
    return int(np.sum(np.argmax(logits, axis=1) == labels))


def _predict_batches(state, config, images, batch_size=500) -> np.ndarray:
    out = []
    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(forward(state, config, images[start:start + batch_size].astype(ad.get_dtype())).data)
    return np.concatenate(out) if out else np.zeros((0, config.class_count))


def train(
    cfg: TrainConfig,
    config: ModelConfig,
    train_ds: Dataset,
    val_ds: Dataset | None = None,
    init: ModelState | None = None,
    progress=None,
) -> tuple[ModelState, TrainingLog]:
    """Minibatch Adam with validation-based early stopping.

    Returns the parameters of the best-validation epoch (the last epoch when
    there is no validation set) and the per-epoch log.
    """
    dtype = np.dtype(cfg.dtype).type
    if config.variant != "cnn" and config.recurrent_dropout != cfg.recurrent_dropout:
        config = ModelConfig.from_dict({**config.to_dict(), "recurrent_dropout": cfg.recurrent_dropout})
    with ad.default_dtype(dtype):
        state = (init.astype(dtype) if init is not None else init_state(config, cfg.seed, dtype))
        history = TrainingLog()
        if cfg.max_epochs == 0:
            return state, history
        opt = OptimizerState()
        best = state.copy()
        best_acc = -1.0
        stale = 0
        names = state.names()
        start_time = time.perf_counter()
        for epoch in range(1, cfg.max_epochs + 1):
            seq = np.random.SeedSequence([cfg.seed, epoch])
            shuffle_seed, drop_seed = (int(s) for s in seq.generate_state(2))
            drop_rng = np.random.default_rng(drop_seed)
            total_loss = 0.0
            correct = 0
            try:
                for images, labels in batches(train_ds, cfg.batch_size, shuffle_seed):
                    x = Tensor(images.astype(dtype))
                    logits = forward(state, config, x, train=True, rng=drop_rng)
                    loss = ad.cross_entropy(logits, labels)
                    grads = ad.grad(loss, state.tensors())
                    adam_step(state, dict(zip(names, grads)), opt, cfg)
                    total_loss += float(loss.data) * len(labels)
                    correct += _accuracy(logits.data, labels)
            except NonFiniteError as exc:
                log.warning("training diverged in epoch %d: %s", epoch, exc)
                history.diverged = True
                history.stop_epoch = epoch
                return best, history
            n = len(train_ds)
            if val_ds is not None and len(val_ds):
                val_acc = _accuracy(_predict_batches(state, config, val_ds.images), val_ds.labels) / len(val_ds)
            else:
                val_acc = float("nan")
            rec = EpochRecord(epoch, total_loss / n, correct / n, val_acc, time.perf_counter() - start_time)
            history.epochs.append(rec)
            if progress is not None:
                progress(rec)
            log.info("epoch %d loss %.4f train %.4f val %.4f", epoch, rec.train_loss, rec.train_acc, val_acc)
            if np.isnan(val_acc) or val_acc > best_acc:
                best_acc = val_acc if not np.isnan(val_acc) else best_acc
                best = state.copy()
                history.best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        history.stop_epoch = history.epochs[-1].epoch
        return best, history


def evaluate(
    state: ModelState,
    config: ModelConfig,
    test_ds: Dataset,
    spec: CorruptionSpec | None = None,
    batch_size: int = 500,
    dtype=None,
) -> EvalResult:
    """Accuracy on (optionally corrupted) test images plus a confusion matrix."""
    spec = spec or CorruptionSpec()
    dtype = dtype or state.tensors()[0].dtype.type
    n_cls = config.class_count
    confusion = np.zeros((n_cls, n_cls), dtype=np.int64)
    with ad.default_dtype(dtype):
        for start in range(0, len(test_ds), batch_size):
            images = test_ds.images[start:start + batch_size].astype(dtype)
            labels = test_ds.labels[start:start + batch_size]
            idx = np.arange(start, start + len(labels))
            images = corrupt_batch(images, labels, spec, idx, state, config)
            with ad.no_grad():
                pred = np.argmax(forward(state, config, images).data, axis=1)
            np.add.at(confusion, (labels, pred), 1)
    correct = int(np.trace(confusion))
    total = int(confusion.sum())
    return EvalResult(correct / total if total else float("nan"), correct, total, confusion)


def write_log_csv(path, history: TrainingLog) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "trainLoss", "trainAcc", "valAcc", "wallClock"])
        for r in history.epochs:
            writer.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.train_acc:.6f}", f"{r.val_acc:.6f}", f"{r.wall_clock:.3f}"])
