"""Training and evaluation: metrics, loss, Adam, early-stopped fitting loop.

All reported errors are in original units: model outputs are de-standardized
before any loss or metric touches them, so MAE/RMSE read directly in the
sensor's unit and MAPE in percent.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import rng
from .data import Standardizer, WindowPair
from .errors import ConfigError, NumericError, ShapeError
from .model import ModelState, clone_state, forward
from .tensor import Tape, Tensor, absolute, add, as_tensor, huber, mul, sub, tmean


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class HorizonRow:
    step: int                 # 1-based horizon offset
    mae: float
    rmse: float
    mape: Optional[float]


@dataclass
class MetricReport:
    mae: float
    rmse: float
    mape: Optional[float]     # None when every target is masked out
    per_horizon: list[HorizonRow] = field(default_factory=list)
    n_values: int = 0
    seconds: float = 0.0


def _basic_metrics(pred: np.ndarray, truth: np.ndarray, threshold: float):
    err = pred - truth
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    mask = np.abs(truth) > threshold
    if mask.any():
        mape = float(np.mean(np.abs(err[mask] / truth[mask])) * 100.0)
    else:
        mape = None
    return mae, rmse, mape


def compute_metrics(pred, truth, mask_threshold: float = 1.0) -> MetricReport:
    """MAE / RMSE / masked MAPE overall and per horizon step.

    pred and truth must have identical shapes; when they carry a horizon axis
    (third from the end, as in (..., Z, N, d)) a per-step breakdown is added.
    MAPE ignores targets with absolute value <= mask_threshold, so near-zero
    readings cannot blow up the percentage.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(
            f"prediction shape {pred.shape} does not match target {truth.shape}"
        )
    mae, rmse, mape = _basic_metrics(pred, truth, mask_threshold)
    rows: list[HorizonRow] = []
    if pred.ndim >= 3:
        for z in range(pred.shape[-3]):
            p_z = np.take(pred, z, axis=-3)
            t_z = np.take(truth, z, axis=-3)
            rows.append(HorizonRow(z + 1, *_basic_metrics(p_z, t_z, mask_threshold)))
    return MetricReport(mae, rmse, mape, rows, n_values=pred.size)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def loss_tensor(pred: Tensor, target: np.ndarray, kind: str = "mae",
                huber_delta: float = 1.0) -> Tensor:
    """Scalar training loss on (already de-standardized) predictions."""
    diff = sub(pred, as_tensor(np.asarray(target, dtype=pred.dtype)))
    if kind == "mae":
        return tmean(absolute(diff))
    if kind == "huber":
        return tmean(huber(diff, huber_delta))
    raise ConfigError(f"loss must be 'mae' or 'huber', got {kind!r}")


def destandardize_tensor(pred: Tensor, stats: Standardizer) -> Tensor:
    """Map standardized network output back to original units, on the tape."""
    scale = as_tensor(np.asarray(stats.std, dtype=pred.dtype))
    shift = as_tensor(np.asarray(stats.mean, dtype=pred.dtype))
    return add(mul(pred, scale), shift)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; update = -lr * m_hat / sqrt(v_hat + eps)."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0.0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        if eps <= 0.0:
            raise ConfigError(f"eps must be positive, got {eps}")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: dict[str, Optional[np.ndarray]]) -> None:
        self.t += 1
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name}")
            g = g.astype(p.data.dtype, copy=False)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / (1.0 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1.0 - self.beta2 ** self.t)
            p.data = p.data - self.lr * m_hat / np.sqrt(v_hat + self.eps)


# ---------------------------------------------------------------------------
# window batching
# ---------------------------------------------------------------------------

@dataclass
class WindowBatchSet:
    """Windows stacked into flat arrays: inputs standardized, targets raw."""

    history: np.ndarray       # (W, H, N, d) standardized
    target: np.ndarray        # (W, Z, N, d) original units
    dow: np.ndarray           # (W, H)
    tod: np.ndarray           # (W, H)

    def __len__(self) -> int:
        return self.history.shape[0]


def stack_windows(windows: list[WindowPair], stats: Standardizer) -> WindowBatchSet:
    if not windows:
        raise ValueError("cannot stack an empty window list")
    hist = np.stack([w.history for w in windows])
    return WindowBatchSet(
        history=stats.transform(hist),
        target=np.stack([w.target for w in windows]),
        dow=np.stack([w.history_dow for w in windows]),
        tod=np.stack([w.history_tod for w in windows]),
    )


def predict_windows(state: ModelState, batches: WindowBatchSet,
                    stats: Standardizer, batch: int = 64) -> np.ndarray:
    """Deterministic eval-mode predictions in original units, (W, Z, N, d)."""
    outputs = []
    for lo in range(0, len(batches), batch):
        hi = min(lo + batch, len(batches))
        pred = forward(state, batches.history[lo:hi],
                       batches.dow[lo:hi], batches.tod[lo:hi], train=False)
        outputs.append(stats.inverse(pred.data))
    return np.concatenate(outputs, axis=0)


def persistence_baseline(windows: list[WindowPair], horizon: int) -> np.ndarray:
    """Repeat each window's last observed step across the horizon."""
    last = np.stack([w.history[-1] for w in windows])      # (W, N, d)
    return np.repeat(last[:, None], horizon, axis=1)       # (W, Z, N, d)


def evaluate(state: ModelState, windows: list[WindowPair], stats: Standardizer,
             batch: int = 64, mask_threshold: float = 1.0) -> MetricReport:
    start = time.perf_counter()
    batches = stack_windows(windows, stats)
    preds = predict_windows(state, batches, stats, batch)
    report = compute_metrics(preds, batches.target, mask_threshold)
    report.seconds = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 16
    patience: int = 30
    max_epochs: int = 200
    lr_decay: float = 0.5
    decay_patience: int = 10
    loss: str = "mae"
    mask_threshold: float = 1.0
    seed: int = 0
    max_steps: int = 0        # 0 = unlimited optimizer steps

    def validate(self) -> "TrainConfig":
        if self.lr < 0.0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.patience < 1 or self.decay_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0.0 < self.lr_decay < 1.0:
            raise ConfigError(f"lr_decay must lie in (0, 1), got {self.lr_decay}")
        if self.loss not in ("mae", "huber"):
            raise ConfigError(f"loss must be 'mae' or 'huber', got {self.loss!r}")
        if self.max_steps < 0:
            raise ConfigError(f"max_steps must be >= 0, got {self.max_steps}")
        return self


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_mae: float
    lr: float
    seconds: float


@dataclass
class TrainResult:
    state: ModelState         # parameters of the best validation epoch
    history: list[HistoryRow]
    best_val_mae: float
    best_epoch: int
    steps: int
    stopped_early: bool


HISTORY_HEADER = "epoch,train_loss,val_mae,lr,seconds"


def write_history(path, rows: list[HistoryRow]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(HISTORY_HEADER + "\n")
        for r in rows:
            fh.write(f"{r.epoch},{r.train_loss:.10g},{r.val_mae:.10g},"
                     f"{r.lr:.10g},{r.seconds:.6f}\n")


def train_loop(state: ModelState, train_windows: list[WindowPair],
               val_windows: list[WindowPair], stats: Standardizer,
               cfg: TrainConfig,
               log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Fit with Adam, early stopping, and step-decayed learning rate.

    Improvement means strictly lower validation MAE.  After ``patience``
    consecutive epochs without improvement training stops; every
    ``decay_patience`` consecutive stale epochs the learning rate is scaled
    by ``lr_decay``.  The returned state holds the best epoch's parameters.
    """
    cfg.validate()
    train_set = stack_windows(train_windows, stats)
    params = state.params()
    opt = Adam(params, lr=cfg.lr)
    shuffle_gen = rng.stream(cfg.seed, "shuffle")
    drop_gen = rng.stream(cfg.seed, "dropout")

    best_val = np.inf
    best_epoch = 0
    best_state = clone_state(state)
    since_best = 0
    steps = 0
    stopped_early = False
    rows: list[HistoryRow] = []

    for epoch in range(1, cfg.max_epochs + 1):
        tic = time.perf_counter()
        order = shuffle_gen.permutation(len(train_set))
        loss_sum = 0.0
        count = 0
        out_of_steps = False
        for lo in range(0, len(train_set), cfg.batch):
            idx = order[lo:lo + cfg.batch]
            with Tape() as tape:
                pred = forward(state, train_set.history[idx],
                               train_set.dow[idx], train_set.tod[idx],
                               train=True, drop_rng=drop_gen)
                loss = loss_tensor(destandardize_tensor(pred, stats),
                                   train_set.target[idx], cfg.loss)
                tape.backward(loss)
            grads = {name: tape.grad(p) for name, p in params.items()}
            opt.step(grads)
            steps += 1
            loss_sum += float(loss.item()) * len(idx)
            count += len(idx)
            if cfg.max_steps and steps >= cfg.max_steps:
                out_of_steps = True
                break

        val = evaluate(state, val_windows, stats, batch=max(cfg.batch, 64),
                       mask_threshold=cfg.mask_threshold)
        row = HistoryRow(epoch, loss_sum / count, val.mae, opt.lr,
                         time.perf_counter() - tic)
        rows.append(row)
        if log is not None:
            log(f"epoch {row.epoch}: train {row.train_loss:.4f}"
                f" val {row.val_mae:.4f} lr {row.lr:.2e} ({row.seconds:.1f}s)")

        if val.mae < best_val:
            best_val = val.mae
            best_epoch = epoch
            best_state = clone_state(state)
            since_best = 0
        else:
            since_best += 1
            if since_best % cfg.decay_patience == 0:
                opt.lr *= cfg.lr_decay
            if since_best >= cfg.patience:
                stopped_early = True
                break
        if out_of_steps:
            break

    return TrainResult(best_state, rows, float(best_val), best_epoch, steps,
                       stopped_early)
