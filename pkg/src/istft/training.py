"""Losses, Adam with global-norm clipping and the epoch loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import IO, Callable

import numpy as np

from . import tensor as T
from .model import Batch, IstftModel
from .tensor import Tensor

LOSSES = ("mae", "mse")


class NumericError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


# ------------------------------------------------------------------ losses


def _prepare(pred, target, n_windows: int | None) -> tuple[Tensor, np.ndarray, int, int]:
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise T.ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.ndim != 3:
        raise T.ShapeError(f"expected (windows, n_tau, n_o) arrays, got {pred.shape}")
    if np.isnan(pred.data).any() or np.isnan(target).any():
        raise ValueError("loss inputs contain NaN")
    n_windows = pred.shape[0] if n_windows is None else n_windows
    if n_windows < 1:
        raise ValueError("loss normalisation needs at least one window")
    return pred, target, n_windows, pred.shape[1]


def loss_mae(pred, target, n_windows: int | None = None) -> Tensor:
    """Sum over windows and future steps of ``||y - ŷ||₁`` over ``n_windows · n_tau``.

    ``n_windows`` defaults to the number of windows in ``pred``; pass the
    full training-set count to reproduce the global normalisation.
    """
    pred, target, n, n_tau = _prepare(pred, target, n_windows)
    total = T.sum(T.absolute(T.sub(Tensor(target), pred)))
    return T.scale(total, 1.0 / (n * n_tau))


def loss_mse(pred, target, n_windows: int | None = None) -> Tensor:
    """As :func:`loss_mae` with the Euclidean norm (not squared) per time step."""
    pred, target, n, n_tau = _prepare(pred, target, n_windows)
    total = T.sum(T.norm(T.sub(Tensor(target), pred), axis=-1))
    return T.scale(total, 1.0 / (n * n_tau))


def quantile_loss(pred, target, q: float, n_windows: int | None = None,
                  output_mean: bool = False) -> Tensor:
    """Pinball loss ``q(y-ŷ)₊ + (1-q)(ŷ-y)₊`` summed over outputs.

    With ``output_mean`` the sum is additionally divided by ``n_o``, which is
    the single-output definition carried over verbatim; the default keeps
    ``quantile_loss(q=0.5) == 0.5 * loss_mae`` for any number of outputs.
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {q}")
    pred, target, n, n_tau = _prepare(pred, target, n_windows)
    diff = T.sub(Tensor(target), pred)
    # q·relu(d) + (1-q)·relu(-d) == 0.5|d| + (q-0.5)·d
    pin = T.add(T.scale(T.absolute(diff), 0.5), T.scale(diff, q - 0.5))
    denom = n * n_tau * (pred.shape[2] if output_mean else 1)
    return T.scale(T.sum(pin), 1.0 / denom)


def loss_fn(kind: str) -> Callable[..., Tensor]:
    try:
        return {"mae": loss_mae, "mse": loss_mse}[kind]
    except KeyError:
        raise ValueError(f"unknown loss {kind!r}; choose one of {LOSSES}") from None


# --------------------------------------------------------------- optimiser


def global_norm(grads: list[np.ndarray]) -> float:
    return float(np.sqrt(np.sum([np.vdot(g, g) for g in grads])))


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = global_norm(grads)
    if total > max_norm:
        s = max_norm / total
        for g in grads:
            g *= s
    return total


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------------ loop


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "mae"
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    patience: int | None = None
    clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        loss_fn(self.loss)
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1 or self.clip <= 0:
            raise ValueError("need lr >= 0, batch_size >= 1, epochs >= 1 and clip > 0")
        if self.patience is not None and not 1 <= self.patience <= self.epochs:
            raise ValueError(f"patience must lie in [1, epochs], got {self.patience}")


@dataclass
class LossReport:
    epoch: int
    train_loss: float
    val_loss: float | None
    per_output: np.ndarray = field(repr=False)  # mean |y - ŷ| per output on the training windows
    seconds: float = 0.0

    def csv_line(self) -> str:
        val = "" if self.val_loss is None else repr(self.val_loss)
        return f"{self.epoch},{self.train_loss!r},{val},{self.seconds:.3f}"


LOG_HEADER = "epoch,train_loss,val_loss,seconds"


def batch_loss(model: IstftModel, batch: Batch, kind: str, chunk: int = 256) -> float:
    """Eval-mode loss over ``batch`` with the same normalisation as training."""
    fn = loss_fn(kind)
    total = 0.0
    for s in range(0, len(batch), chunk):
        part = batch.take(slice(s, s + chunk))
        total += float(fn(model.predict(part), part.target, n_windows=len(batch)).data)
    return total


def _snapshot(model: IstftModel) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.weights().items()}


def _restore(model: IstftModel, snap: dict[str, np.ndarray]) -> None:
    for k, v in model.weights().items():
        v.data = snap[k].copy()


def train(model: IstftModel, data: Batch, cfg: TrainConfig, val: Batch | None = None,
          log: IO[str] | None = None,
          on_epoch: Callable[[LossReport], None] | None = None) -> tuple[IstftModel, list[LossReport]]:
    """Minibatch Adam over shuffled windows.

    When ``val`` is given, the weights with the lowest validation loss are
    restored at the end and ``cfg.patience`` enables early stopping.
    Raises :class:`NumericError` on a non-finite loss or gradient.
    """
    if len(data) == 0:
        raise ValueError("no training windows")
    fn = loss_fn(cfg.loss)
    shuffle_seed, drop_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    drop_rng = np.random.default_rng(drop_seed)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    n = len(data)
    n_o = data.target.shape[2]

    reports: list[LossReport] = []
    best_val, best_snap, stale = np.inf, None, 0
    if log is not None:
        print(LOG_HEADER, file=log, flush=True)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        abs_err = np.zeros(n_o)
        for s in range(0, n, cfg.batch_size):
            part = data.take(order[s:s + cfg.batch_size])
            out = model.forward(part, train=True, rng=drop_rng)
            if not np.all(np.isfinite(out.predictions)):
                raise NumericError(f"non-finite predictions at epoch {epoch}, batch starting {s}")
            loss = fn(out.output, part.target)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch starting {s}")
            for p in params:
                p.grad = None
            T.backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            norm = clip_gradients(grads, cfg.clip)
            if not np.isfinite(norm):
                raise NumericError(f"non-finite gradient norm at epoch {epoch}, batch starting {s}")
            opt.step(grads)
            epoch_loss += value * len(part)
            abs_err += np.abs(part.target - out.predictions).sum(axis=(0, 1))
        for p in params:
            p.grad = None

        val_loss = None
        if val is not None and len(val):
            val_loss = batch_loss(model, val, cfg.loss)
            if not np.isfinite(val_loss):
                raise NumericError(f"non-finite validation loss at epoch {epoch}")
        report = LossReport(epoch, epoch_loss / n, val_loss,
                            abs_err / (n * data.target.shape[1]), time.perf_counter() - t0)
        reports.append(report)
        if log is not None:
            print(report.csv_line(), file=log, flush=True)
        if on_epoch is not None:
            on_epoch(report)

        if val_loss is not None:
            if val_loss < best_val:
                best_val, best_snap, stale = val_loss, _snapshot(model), 0
            else:
                stale += 1
                if cfg.patience is not None and stale >= cfg.patience:
                    break
    if best_snap is not None:
        _restore(model, best_snap)
    return model, reports
