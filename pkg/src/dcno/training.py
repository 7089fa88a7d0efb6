"""Losses, Adam with decoupled weight decay, the 1cycle schedule and the training loop."""
from __future__ import annotations

import io as _io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

from .autodiff import Tape, flat_gradient, gradients
from .io import DatasetContainer
from .layers import DCNO, Normalizer
from .tensor import Field2D, mode_indices

log = logging.getLogger(__name__)

LOSSES = ("rel-l2", "rel-h1")
METRIC_COLUMNS = ("epoch", "train_loss", "val_rel_l2", "lr")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 8
    weight_decay: float = 1e-4
    lr: float = 1e-3
    warmup: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    loss: str = "rel-l2"
    seed: int = 0
    n_train: Optional[int] = None  # None: everything not held out for validation
    n_val: int = 0
    dtype: str = "float64"
    normalize: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.warmup < 1:
            raise ValueError("warmup fraction must lie in (0, 1)")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {LOSSES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _data(x: Union[Field2D, np.ndarray]) -> np.ndarray:
    return x.data if isinstance(x, Field2D) else np.asarray(x)


def relative_l2(pred, target) -> float:
    p, t = _data(pred), _data(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    denom = np.linalg.norm(t.ravel())
    if denom == 0:
        raise ZeroDivisionError("target has zero norm")
    return float(np.linalg.norm((p - t).ravel()) / denom)


def sobolev_weight(h: int, w: int, domain_length=(1.0, 1.0)) -> np.ndarray:
    """``1 + |omega|^2`` on the full ``(h, w)`` DFT grid."""
    w1 = 2 * np.pi * mode_indices(h) / domain_length[0]
    w2 = 2 * np.pi * mode_indices(w) / domain_length[1]
    return 1.0 + w1[:, None] ** 2 + w2[None, :] ** 2


def relative_h1(pred, target, domain_length=None) -> float:
    p, t = _data(pred), _data(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if t.ndim == 2:
        p, t = p[:, :, None], t[:, :, None]
    if domain_length is None:
        domain_length = target.domain_length if isinstance(target, Field2D) else (1.0, 1.0)
    wt = sobolev_weight(t.shape[0], t.shape[1], domain_length)[:, :, None]
    num = np.sum(wt * np.abs(np.fft.fft2(p - t, axes=(0, 1))) ** 2)
    den = np.sum(wt * np.abs(np.fft.fft2(t, axes=(0, 1))) ** 2)
    if den == 0:
        raise ZeroDivisionError("target has zero Sobolev norm")
    return float(np.sqrt(num / den))


def _batch_norms(y: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(y.astype(float) ** 2, axis=(1, 2, 3)))


def tape_relative_l2(tape: Tape, pred: int, y: np.ndarray) -> int:
    """Sum over the batch of per-sample relative L2 errors."""
    norms = _batch_norms(y)
    if np.any(norms == 0):
        raise ZeroDivisionError("a target in the batch has zero norm")
    dtype = tape.value(pred).dtype
    diff = tape.add(pred, tape.constant((-y).astype(dtype)))
    per = tape.sqrt(tape.sum(tape.square(diff), axis=(1, 2, 3)))
    return tape.sum(tape.scale(per, (1.0 / norms).astype(dtype)))


def tape_relative_h1(tape: Tape, pred: int, y: np.ndarray, domain_length=(1.0, 1.0)) -> int:
    """Batch sum of Sobolev-weighted relative errors, via a half-spectrum multiplier."""
    b, h, w, _ = y.shape
    dtype = tape.value(pred).dtype
    wt = sobolev_weight(h, w, domain_length)
    den = np.sqrt(np.sum(wt[None, :, :, None] * np.abs(np.fft.fft2(y, axes=(1, 2))) ** 2,
                         axis=(1, 2, 3)) / (h * w))
    if np.any(den == 0):
        raise ZeroDivisionError("a target in the batch has zero Sobolev norm")
    mult = np.sqrt(wt[:, : w // 2 + 1])[None, :, :, None].astype(dtype)
    diff = tape.add(pred, tape.constant((-y).astype(dtype)))
    weighted = tape.ifft2(tape.scale(tape.fft2(diff), mult), (h, w))
    per = tape.sqrt(tape.sum(tape.square(weighted), axis=(1, 2, 3)))
    return tape.sum(tape.scale(per, (1.0 / den).astype(dtype)))


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(np.zeros(n), np.zeros(n))

    def copy(self) -> "OptimizerState":
        return replace(self, m=self.m.copy(), v=self.v.copy())


def adam_step(theta: np.ndarray, grad: np.ndarray, state: OptimizerState, lr: float,
              decay: float = 0.0) -> Tuple[np.ndarray, OptimizerState]:
    """One bias-corrected Adam update with decoupled weight decay applied first."""
    if theta.shape != grad.shape or state.m.shape != theta.shape:
        raise ValueError("parameter, gradient and moment shapes must agree")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    mhat = m / (1 - state.beta1 ** t)
    vhat = v / (1 - state.beta2 ** t)
    theta = theta - lr * decay * theta
    theta = theta - lr * mhat / (np.sqrt(vhat) + state.eps)
    return theta, replace(state, m=m, v=v, step=t)


def warmup_end(total: int, cfg: TrainConfig) -> int:
    return max(int(round(cfg.warmup * total)) - 1, 0)


def onecycle_lr(step: int, total: int, cfg: TrainConfig) -> float:
    """Cosine 1cycle: ``lr/div`` up to ``lr`` at the warmup end, down to ``lr/final_div``."""
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    peak = cfg.lr
    start = peak / cfg.div_factor
    end = peak / cfg.final_div_factor
    top = warmup_end(total, cfg)

    def cos_interp(a, b, frac):
        return b + (a - b) * 0.5 * (1 + math.cos(math.pi * frac))

    if step <= top:
        return cos_interp(start, peak, step / top) if top > 0 else peak
    return cos_interp(peak, end, (step - top) / (total - 1 - top))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_rel_l2: float
    lr: float

    def csv_row(self) -> str:
        return f"{self.epoch},{self.train_loss!r},{self.val_rel_l2!r},{self.lr!r}\n"


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    theta: np.ndarray
    opt: OptimizerState
    epoch: int = 0  # epochs completed
    best_theta: Optional[np.ndarray] = None
    best_val: float = float("inf")
    best_epoch: int = 0
    records: List[EpochRecord] = field(default_factory=list)


@dataclass
class TrainResult:
    model: DCNO
    records: List[EpochRecord]
    best_epoch: int
    state: TrainState


def metrics_csv(records: Sequence[EpochRecord]) -> str:
    buf = _io.StringIO()
    buf.write(",".join(METRIC_COLUMNS) + "\n")
    for r in records:
        buf.write(r.csv_row())
    return buf.getvalue()


def split_dataset(data: DatasetContainer, cfg: TrainConfig) -> Tuple[DatasetContainer, Optional[DatasetContainer]]:
    n_val = cfg.n_val
    n_train = cfg.n_train if cfg.n_train is not None else data.samples - n_val
    if data.samples == 0:
        raise ValueError("empty dataset")
    if n_train < 1 or n_val < 0 or n_train + n_val > data.samples:
        raise ValueError(f"split sizes {n_train}+{n_val} do not fit a {data.samples}-sample dataset")
    train = data.subset(0, n_train)
    val = data.subset(n_train, n_train + n_val) if n_val else None
    return train, val


def teacher_forcing_pairs(data: DatasetContainer) -> DatasetContainer:
    """Turn trajectories ``(n, H, W, T+1)`` into independent ``(w_{t-1}, w_t)`` samples."""
    w = data.outputs
    if w.shape[-1] < 2:
        raise ValueError("trajectories need at least two snapshots")
    x = np.concatenate([w[..., t - 1:t] for t in range(1, w.shape[-1])], axis=0)
    y = np.concatenate([w[..., t:t + 1] for t in range(1, w.shape[-1])], axis=0)
    return DatasetContainer(x, y, data.domain_length)


def loss_and_grad(model: DCNO, x: np.ndarray, y: np.ndarray, loss: str = "rel-l2",
                  domain_length=(1.0, 1.0)) -> Tuple[float, np.ndarray]:
    tape = Tape()
    ids = tape.leaves(model.params)
    pred = model.forward(tape, ids, x)
    if loss == "rel-l2":
        out = tape_relative_l2(tape, pred, y)
    else:
        out = tape_relative_h1(tape, pred, y, domain_length)
    value = float(tape.value(out))
    grad = flat_gradient(model.params, gradients(tape, out, ids)).astype(float)
    return value, grad


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)


def train(model: DCNO, data: DatasetContainer, cfg: TrainConfig,
          state: Optional[TrainState] = None,
          metrics_out: Optional[TextIO] = None,
          on_epoch: Optional[Callable[[TrainState, DCNO], None]] = None) -> TrainResult:
    """Mini-batch training with seeded shuffling and best-validation retention.

    ``model.params`` supplies the initial parameters. Passing a ``state``
    from an earlier call resumes that run; the shuffle order of epoch ``e``
    depends only on ``(seed, e)`` so a resumed run matches an uninterrupted
    one bit for bit.
    """
    train_set, val_set = split_dataset(data, cfg)
    dtype = np.dtype(cfg.dtype)
    if cfg.normalize:
        model.normalizer = Normalizer.fit(train_set.inputs, train_set.outputs)
    params = model.params.astype(dtype)
    work = DCNO(model.cfg, params, model.normalizer)
    if state is None:
        theta0 = model.params.flat().astype(float)
        state = TrainState(theta0, OptimizerState.zeros(theta0.size), best_theta=theta0.copy())
    n = train_set.samples
    steps_per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if metrics_out is not None and state.epoch == 0:
        metrics_out.write(",".join(METRIC_COLUMNS) + "\n")

    for epoch in range(state.epoch, cfg.epochs):
        order = _epoch_order(cfg.seed, epoch, n)
        running = 0.0
        lr = cfg.lr
        for b in range(steps_per_epoch):
            idx = np.sort(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            x, y = train_set.inputs[idx], train_set.outputs[idx]
            params.unflatten(state.theta)
            value, grad = loss_and_grad(work, x, y, cfg.loss, data.domain_length)
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch + 1}, batch {b}; aborting")
            running += value
            lr = onecycle_lr(epoch * steps_per_epoch + b, total, cfg)
            state.theta, state.opt = adam_step(state.theta, grad, state.opt, lr, cfg.weight_decay)
        params.unflatten(state.theta)
        val = evaluate(work, val_set) if val_set is not None else float("nan")
        rec = EpochRecord(epoch + 1, running / n, val, lr)
        state.records.append(rec)
        state.epoch = epoch + 1
        if val_set is None or val < state.best_val:
            state.best_val = val if val_set is not None else state.best_val
            state.best_theta = state.theta.copy()
            state.best_epoch = epoch + 1
        if metrics_out is not None:
            metrics_out.write(rec.csv_row())
            metrics_out.flush()
        log.info("epoch %d train %.4e val %.4e lr %.3e", rec.epoch, rec.train_loss, rec.val_rel_l2, rec.lr)
        if on_epoch is not None:
            on_epoch(state, work)

    final = model.params.copy()
    final.unflatten(state.best_theta if state.best_theta is not None else state.theta)
    return TrainResult(DCNO(model.cfg, final, model.normalizer), list(state.records),
                       state.best_epoch, state)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

Predictor = Union[DCNO, Callable[[np.ndarray], np.ndarray]]


def _predict(model: Predictor, x: np.ndarray) -> np.ndarray:
    if hasattr(model, "predict"):
        return model.predict(x)
    return np.asarray(model(x))


def per_sample_errors(model: Predictor, inputs: np.ndarray, outputs: np.ndarray) -> np.ndarray:
    if inputs.shape[0] == 0:
        raise ValueError("empty split")
    pred = _predict(model, inputs)
    return np.array([relative_l2(p, t) for p, t in zip(pred, outputs)])


def evaluate(model: Predictor, split: Union[DatasetContainer, Tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean per-sample relative L2 error over ``split``."""
    if isinstance(split, DatasetContainer):
        inputs, outputs = split.inputs, split.outputs
    else:
        inputs, outputs = split
    return float(np.mean(per_sample_errors(model, inputs, outputs)))


@dataclass
class RolloutReport:
    steps: List[int]
    per_step: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_step))


def rollout_evaluate(model: Predictor, data: DatasetContainer, T0: int, T: int) -> RolloutReport:
    """Autoregressive rollout from ``w_0``; errors reported at steps ``T0 .. T``.

    ``data.outputs[..., t]`` is the reference snapshot at step ``t``.
    """
    snaps = data.outputs
    if T >= snaps.shape[-1]:
        raise ValueError(f"trajectory has {snaps.shape[-1] - 1} steps, rollout needs {T}")
    if not 1 <= T0 <= T:
        raise ValueError("need 1 <= T0 <= T")
    w = snaps[..., 0:1]
    steps, errs = [], []
    for t in range(1, T + 1):
        w = _predict(model, w)
        if t >= T0:
            steps.append(t)
            errs.append(float(np.mean([relative_l2(p, s) for p, s in zip(w, snaps[..., t:t + 1])])))
    return RolloutReport(steps, errs)
