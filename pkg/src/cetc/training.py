"""Training loop: minibatch cross-entropy with Adam and plateau-halving LR.

The descent recipe: starting learning rate 0.003, 20 epochs, batch 64,
horizontal-flip augmentation on the training split only, and a
reduce-on-plateau schedule that halves the learning rate after the
patience is exceeded (factor 0.5, patience 5, strict improvement).
Everything is driven by explicit seeds; a fixed seed reproduces the run
bit for bit in single-threaded mode.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from .autodiff import GradTape, NumericsError, Parameter, ShapeError, Tensor
from .data import Dataset, PreprocessConfig, preprocess
from .decoder import EnsembleCoefficients
from .model import CETC

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_step",
    "PlateauState",
    "plateau_lr_schedule",
    "Adam",
    "EpochLogRow",
    "TrainResult",
    "train",
    "evaluate",
]


@dataclass
class TrainConfig:
    lr0: float = 0.003
    epochs: int = 20
    batch: int = 64
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    hflip_prob: float = 0.5
    resize_crop: int = 224
    normalize_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    normalize_std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0 or self.epochs <= 0 or self.batch < 1:
            raise ValueError("lr0, epochs must be positive and batch >= 1")
        if not (0.0 <= self.hflip_prob <= 1.0):
            raise ValueError("hflip_prob must lie in [0, 1]")
        if self.plateau_factor <= 0 or self.plateau_factor >= 1:
            raise ValueError("plateau_factor must lie in (0, 1)")

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(crop=self.resize_crop, mean=self.normalize_mean,
                                std=self.normalize_std, hflip_prob=self.hflip_prob)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def init(param: np.ndarray) -> "AdamState":
        return AdamState(m=np.zeros_like(param), v=np.zeros_like(param))


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    if param.shape != grad.shape:
        raise ShapeError(f"param shape {param.shape} != grad shape {grad.shape}")
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1 ** state.t)
    v_hat = state.v / (1 - beta2 ** state.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Per-parameter Adam states over a model's parameter list."""

    def __init__(self, params: list[Parameter]):
        self._params = params
        self._states = [AdamState.init(p.data) for p in params]

    def step(self, lr: float) -> None:
        for p, st in zip(self._params, self._states):
            if p.grad is None:
                st.t += 1  # zero gradient: state clock still advances
                continue
            adam_step(p.data, p.grad.astype(p.data.dtype, copy=False), st, lr)

    def zero_grad(self) -> None:
        for p in self._params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# Plateau schedule
# ---------------------------------------------------------------------------

@dataclass
class PlateauState:
    lr: float
    factor: float = 0.5
    patience: int = 5
    best: float = np.inf
    bad_epochs: int = 0


def plateau_lr_schedule(val_loss: float, state: PlateauState) -> float:
    """Feed one epoch's validation loss; returns the learning rate to use next.

    Strict improvement (loss < best) resets the counter; once the counter
    exceeds the patience, i.e. on the (patience+1)-th consecutive
    non-improving epoch, the rate is multiplied by ``factor`` and the
    counter restarts.
    """
    if val_loss < state.best:
        state.best = val_loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs > state.patience:
            state.lr *= state.factor
            state.bad_epochs = 0
    return state.lr


# ---------------------------------------------------------------------------
# Train / evaluate
# ---------------------------------------------------------------------------

@dataclass
class EpochLogRow:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class TrainResult:
    epoch_log: list[EpochLogRow]
    best_val_loss: float
    best_state: dict[str, np.ndarray]
    final_train_loss: float


def _batch_tensor(dataset: Dataset, idx: np.ndarray, train_mode: bool,
                  pcfg: PreprocessConfig, rng: Optional[np.random.Generator],
                  dtype) -> tuple[Tensor, np.ndarray]:
    imgs = [preprocess(dataset.images[i], train_mode, pcfg, rng) for i in idx]
    x = np.stack(imgs).astype(dtype)
    return Tensor(x), dataset.labels[idx]


def evaluate(model: CETC, dataset: Dataset, indices: np.ndarray,
             coeffs: EnsembleCoefficients, cfg: TrainConfig) -> tuple[float, float, np.ndarray]:
    """Loss, accuracy and raw logits over ``indices`` (no augmentation)."""
    pcfg = cfg.preprocess_config()
    dtype = model.config.np_dtype
    losses, hits, logit_rows = [], 0, []
    for start in range(0, len(indices), cfg.batch):
        idx = indices[start:start + cfg.batch]
        x, labels = _batch_tensor(dataset, idx, False, pcfg, None, dtype)
        logits = model.forward(x, coeffs)
        loss = ops.softmax_cross_entropy(logits, labels)
        losses.append(float(loss.data) * len(idx))
        hits += int((logits.data.argmax(axis=1) == labels).sum())
        logit_rows.append(logits.data)
    n = len(indices)
    if n == 0:
        raise ValueError("evaluate called with an empty index list")
    return sum(losses) / n, hits / n, np.concatenate(logit_rows)


def train(model: CETC, dataset: Dataset, train_idx: np.ndarray,
          val_idx: np.ndarray, coeffs: EnsembleCoefficients, cfg: TrainConfig,
          log_path: Optional[Path] = None, max_steps: Optional[int] = None) -> TrainResult:
    """Run the full recipe; returns the per-epoch log and best-val weights."""
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ValueError("train and val index lists must be non-empty")
    pcfg = cfg.preprocess_config()
    dtype = model.config.np_dtype
    params = list(model.parameters())
    opt = Adam(params)
    sched = PlateauState(lr=cfg.lr0, factor=cfg.plateau_factor,
                         patience=cfg.plateau_patience)
    lr = cfg.lr0
    epoch_log: list[EpochLogRow] = []
    best_val = np.inf
    best_state: dict[str, np.ndarray] = model.state_dict()
    steps = 0
    final_train_loss = np.nan

    for epoch in range(cfg.epochs):
        order_rng = np.random.default_rng((cfg.seed, epoch, 0xD5))
        aug_rng = np.random.default_rng((cfg.seed, epoch, 0xA6))
        order = train_idx.copy()
        order_rng.shuffle(order)
        losses = []
        processed = 0
        for start in range(0, len(order), cfg.batch):
            if max_steps is not None and steps >= max_steps:
                break
            idx = order[start:start + cfg.batch]
            x, labels = _batch_tensor(dataset, idx, True, pcfg, aug_rng, dtype)
            with GradTape() as tape:
                logits = model.forward(x, coeffs)
                loss = ops.softmax_cross_entropy(logits, labels)
                if not np.isfinite(loss.data):
                    culprit = tape.first_nonfinite_op() or "softmax_cross_entropy"
                    raise NumericsError(
                        f"non-finite loss at epoch {epoch} step {steps}; "
                        f"first non-finite op: {culprit}"
                    )
                opt.zero_grad()
                tape.backward(loss)
            opt.step(lr)
            losses.append(float(loss.data) * len(idx))
            processed += len(idx)
            steps += 1
        train_loss = sum(losses) / processed if processed else np.nan
        final_train_loss = train_loss
        val_loss, val_acc, _ = evaluate(model, dataset, val_idx, coeffs, cfg)
        epoch_log.append(EpochLogRow(epoch, lr, train_loss, val_loss, val_acc))
        if val_loss < best_val:
            best_val = val_loss
            best_state = model.state_dict()
        lr = plateau_lr_schedule(val_loss, sched)
        if max_steps is not None and steps >= max_steps:
            break

    if log_path is not None:
        write_epoch_log(log_path, epoch_log)
    return TrainResult(epoch_log=epoch_log, best_val_loss=best_val,
                       best_state=best_state, final_train_loss=final_train_loss)


def write_epoch_log(path: Path, rows: list[EpochLogRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "val_loss", "val_acc"])
        for r in rows:
            writer.writerow([r.epoch, repr(r.lr), repr(r.train_loss),
                             repr(r.val_loss), repr(r.val_acc)])
