"""Count-regression training: Adadelta, count-preserving augmentation and a
mini-batch loop with validation-based model selection."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .io import Sample
from .model import GPUNet
from .tensor import DTYPE, ShapeError, Tensor, mse_loss, no_grad

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


@dataclass
class AdadeltaState:
    rho: float = 0.95
    eps: float = 1e-6
    acc_grad: list[np.ndarray] = field(default_factory=list)
    acc_delta: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor], rho: float = 0.95, eps: float = 1e-6) -> "AdadeltaState":
        return cls(rho, eps,
                   [np.zeros(p.shape, dtype=DTYPE) for p in params],
                   [np.zeros(p.shape, dtype=DTYPE) for p in params])


def adadelta_step(params: list[Tensor], grads: list[np.ndarray | None],
                  state: AdadeltaState) -> None:
    """In-place update x += delta with
    delta = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g."""
    if not (len(params) == len(grads) == len(state.acc_grad) == len(state.acc_delta)):
        raise ShapeError(f"adadelta_step: {len(params)} params, {len(grads)} grads, "
                         f"{len(state.acc_grad)} accumulators")
    rho, eps = state.rho, state.eps
    for p, g, eg, ed in zip(params, grads, state.acc_grad, state.acc_delta):
        if g is None:
            g = np.zeros(p.shape, dtype=DTYPE)
        if g.shape != p.shape or eg.shape != p.shape:
            raise ShapeError(f"adadelta_step: gradient shape {g.shape} vs parameter {p.shape}")
        eg *= rho
        eg += (1 - rho) * g * g
        delta = -np.sqrt((ed + eps) / (eg + eps)) * g
        ed *= rho
        ed += (1 - rho) * delta * delta
        p.data += delta.astype(DTYPE)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    flips: bool = True
    max_translation: int = 2
    validation_interval: int = 1
    seed: int = 0
    rho: float = 0.95
    eps: float = 1e-6

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_translation < 0:
            raise ValueError(f"max_translation must be >= 0, got {self.max_translation}")
        if self.validation_interval < 1:
            raise ValueError("validation_interval must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def shift(volume: np.ndarray, offsets) -> np.ndarray:
    """Integer translation with zero fill."""
    out = np.zeros_like(volume)
    src, dst = [], []
    for d, n in zip(offsets, volume.shape):
        d = int(d)
        if abs(d) >= n:
            return out
        src.append(slice(max(0, -d), n - max(0, d)))
        dst.append(slice(max(0, d), n - max(0, -d)))
    out[tuple(dst)] = volume[tuple(src)]
    return out


def augment(volume: np.ndarray, count: int, rng: np.random.Generator,
            flips: bool = True, max_translation: int = 2) -> tuple[np.ndarray, int]:
    """Random axis flips and integer translations; the count is unchanged.

    Translations are zero-filled, so lesions must lie at least
    ``max_translation`` voxels inside the volume for the label to stay exact.
    """
    out = volume
    if flips:
        for axis in range(3):
            if rng.random() < 0.5:
                out = np.flip(out, axis=axis)
    if max_translation > 0:
        offsets = rng.integers(-max_translation, max_translation + 1, size=3)
        out = shift(out, offsets)
    return np.ascontiguousarray(out), count


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float | None


@dataclass
class TrainResult:
    model: GPUNet
    history: list[EpochRecord]
    best_epoch: int
    best_val_mse: float
    state: AdadeltaState


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def _stack(volumes: list[np.ndarray]) -> Tensor:
    return Tensor(np.stack(volumes)[:, None])


def predict_counts(model: GPUNet, volumes: list[np.ndarray], batch_size: int = 8) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(volumes), batch_size):
            out.append(model.forward_train(_stack(volumes[start:start + batch_size])).data[:, 0])
    return np.concatenate(out).astype(np.float64) if out else np.empty(0)


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"{what} is not finite ({value})")


def train(model: GPUNet, train_set: list[Sample], val_set: list[Sample],
          config: TrainConfig, volumes: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Fit ``model`` in place on count labels and return the parameters
    with the lowest validation MSE (the final ones if never validated)."""
    if not train_set:
        raise ValueError("training manifest is empty")
    if not val_set:
        raise ValueError("validation manifest is empty")
    cache = volumes if volumes is not None else {}

    def load(s: Sample) -> np.ndarray:
        key = str(s.path)
        if key not in cache:
            cache[key] = s.load()
        return cache[key]

    train_x = [load(s) for s in train_set]
    train_y = np.array([s.count for s in train_set], dtype=DTYPE)
    val_x = [load(s) for s in val_set]
    val_y = np.array([s.count for s in val_set], dtype=np.float64)

    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    state = AdadeltaState.for_params(params, config.rho, config.eps)
    history: list[EpochRecord] = []
    best, best_mse, best_epoch = model.copy(), math.inf, 0

    for epoch in range(1, config.epochs + 1):
        total, seen = 0.0, 0
        for idx in _batches(len(train_x), config.batch_size, rng):
            batch = [augment(train_x[i], int(train_y[i]), rng, config.flips,
                             config.max_translation)[0] for i in idx]
            model.zero_grad()
            loss = mse_loss(model.forward_train(_stack(batch)), train_y[idx])
            value = loss.item()
            _check_finite(value, f"training loss at epoch {epoch}")
            loss.backward()
            adadelta_step(params, [p.grad for p in params], state)
            total += value * len(idx)
            seen += len(idx)
        train_mse = total / seen
        val_mse = None
        if epoch % config.validation_interval == 0 or epoch == config.epochs:
            pred = predict_counts(model, val_x)
            val_mse = float(np.mean((pred - val_y) ** 2))
            _check_finite(val_mse, f"validation loss at epoch {epoch}")
            if val_mse < best_mse:
                best, best_mse, best_epoch = model.copy(), val_mse, epoch
        history.append(EpochRecord(epoch, train_mse, val_mse))
        log.info("epoch %d train_mse %.4f val_mse %s", epoch, train_mse,
                 "-" if val_mse is None else f"{val_mse:.4f}")
    return TrainResult(best, history, best_epoch, best_mse, state)


def write_history(path, history: list[EpochRecord]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse"])
        for r in history:
            w.writerow([r.epoch, repr(float(r.train_mse)),
                        "" if r.val_mse is None else repr(float(r.val_mse))])


def read_history(path) -> list[EpochRecord]:
    with Path(path).open(newline="") as fh:
        return [EpochRecord(int(r["epoch"]), float(r["train_mse"]),
                            float(r["val_mse"]) if r["val_mse"] else None)
                for r in csv.DictReader(fh)]
