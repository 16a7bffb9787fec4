"""Forecast error measure, baselines and interpretability exports."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Window, fmt
from .model import Batch, IstftModel

THRESHOLD = 0.05
DIV_GUARD = 1e-12
ABSOLUTE, RELATIVE = "absolute", "relative"


# ------------------------------------------------------------ error measure


def error_measure(pred: np.ndarray, ref: np.ndarray, n_k: int,
                  n_t: int | None = None) -> tuple[float, str]:
    """Error of one scalar output series over a window of ``n_t`` instants.

    Terms ``i = n_k .. n_t`` (1-based) are summed and divided by ``n_t``. If
    the equally weighted mean of ``|y|`` over those terms is at most 1 the
    absolute deviation is used, otherwise the deviation relative to ``|y|``
    (denominator floored at ``DIV_GUARD``). Returns ``(epsilon, mode)``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    n_t = ref.shape[-1] if n_t is None else n_t
    if pred.shape != ref.shape or ref.shape[-1] != n_t:
        raise ValueError(f"series shapes {pred.shape} / {ref.shape} do not match n_t={n_t}")
    if not 1 <= n_k <= n_t:
        raise ValueError(f"need 1 <= n_k <= n_t, got n_k={n_k}, n_t={n_t}")
    y = ref[n_k - 1:]
    e = np.abs(pred[n_k - 1:] - y)
    if np.abs(y).sum() / n_t <= 1.0:
        return float(e.sum() / n_t), ABSOLUTE
    return float((e / np.maximum(np.abs(y), DIV_GUARD)).sum() / n_t), RELATIVE


@dataclass
class ErrorReport:
    group_id: int
    output_id: int   # 1-based
    start: int       # window start (0-based time index)
    mode: str
    epsilon: float


def full_series(window: Window, pred: np.ndarray) -> np.ndarray:
    """Observed values at past instants followed by ``pred`` (``n_tau × n_o``)."""
    return np.concatenate([window.past, pred], axis=0)


def evaluate_windows(windows: Sequence[Window], preds: np.ndarray) -> list[ErrorReport]:
    """One report per window and output; ``preds`` and windows in original units."""
    if len(windows) != len(preds):
        raise ValueError(f"{len(windows)} windows but {len(preds)} predictions")
    out = []
    for w, p in zip(windows, preds):
        series = full_series(w, p)
        for j in range(w.Y.shape[1]):
            eps, mode = error_measure(series[:, j], w.Y[:, j], w.n_k)
            out.append(ErrorReport(w.group_id, j + 1, w.start, mode, eps))
    return out


@dataclass
class ErrorSummary:
    output_ids: np.ndarray
    mean: np.ndarray          # per output
    below: np.ndarray         # count of cases with epsilon < threshold, per output
    cases: np.ndarray         # number of cases per output
    threshold: float = THRESHOLD

    @property
    def fraction_below(self) -> np.ndarray:
        return self.below / self.cases


def aggregate(reports: Sequence[ErrorReport], threshold: float = THRESHOLD) -> ErrorSummary:
    if not reports:
        raise ValueError("nothing to aggregate")
    ids = np.array(sorted({r.output_id for r in reports}))
    means, below, cases = [], [], []
    for k in ids:
        eps = np.array([r.epsilon for r in reports if r.output_id == k])
        means.append(eps.mean())
        below.append(int((eps < threshold).sum()))
        cases.append(eps.size)
    return ErrorSummary(ids, np.array(means), np.array(below), np.array(cases), threshold)


def persistence(windows: Sequence[Window]) -> np.ndarray:
    """Baseline repeating the last observed value over the horizon."""
    return np.stack([np.repeat(w.past[-1:], w.n_tau, axis=0) for w in windows])


ERROR_HEADER = ["group_id", "output_id", "mode", "epsilon"]


def write_errors(reports: Sequence[ErrorReport], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(ERROR_HEADER)
        for r in reports:
            wr.writerow([r.group_id, r.output_id, r.mode, fmt(r.epsilon)])


def read_errors(path) -> list[ErrorReport]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ERROR_HEADER:
        raise ValueError(f"{path}: expected header {','.join(ERROR_HEADER)}")
    return [ErrorReport(int(g), int(o), -1, m, float(e)) for g, o, m, e in rows[1:]]


# --------------------------------------------------------------- attention


def position_labels(n_t: int, n_o: int) -> list[str]:
    return [f"t{i}_o{k}" for i in range(1, n_t + 1) for k in range(1, n_o + 1)]


@dataclass
class AttentionRecord:
    group_id: int
    n_t: int
    n_o: int
    matrix: np.ndarray   # (M, M); masked entries are exact zeros
    labels: list[str]

    def crop(self, size: int) -> "AttentionRecord":
        """Top-left ``size × size`` block, e.g. the first time blocks only."""
        if not 1 <= size <= self.matrix.shape[0]:
            raise ValueError(f"crop size {size} outside [1, {self.matrix.shape[0]}]")
        return AttentionRecord(self.group_id, self.n_t, self.n_o,
                               self.matrix[:size, :size], self.labels[:size])


def attention_record(model: IstftModel, batch: Batch, index: int = 0,
                     group_id: int = 0) -> AttentionRecord:
    c = model.cfg
    a_bar = model.forward(batch.take(slice(index, index + 1))).attention[0]
    return AttentionRecord(group_id, c.n_t, c.n_o, a_bar, position_labels(c.n_t, c.n_o))


def write_attention(rec: AttentionRecord, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([""] + rec.labels)
        for label, row in zip(rec.labels, rec.matrix):
            wr.writerow([label] + [fmt(v) for v in row])


def read_attention(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = rows[0][1:]
    if [r[0] for r in rows[1:]] != labels:
        raise ValueError(f"{path}: row labels do not match column labels")
    return labels, np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def export_attention(model: IstftModel, batch: Batch, path, index: int = 0,
                     crop: int | None = None, group_id: int = 0) -> AttentionRecord:
    rec = attention_record(model, batch, index, group_id)
    if crop is not None:
        rec = rec.crop(crop)
    write_attention(rec, path)
    return rec


# -------------------------------------------------------------- importance


@dataclass
class ImportanceRecord:
    parameters: np.ndarray        # (p,)
    past: np.ndarray              # (n_o, n_I + 1): known inputs then the observed output
    future: np.ndarray            # (n_o, max(n_I, 1))
    parameter_names: list[str]
    past_names: list[str]
    future_names: list[str]

    def rows(self) -> list[tuple[str, str, float]]:
        out = [("static", n, float(w)) for n, w in zip(self.parameter_names, self.parameters)]
        for k, (pw, fw) in enumerate(zip(self.past, self.future), start=1):
            out += [(f"past_o{k}", n, float(w)) for n, w in zip(self.past_names, pw)]
            out += [(f"future_o{k}", n, float(w)) for n, w in zip(self.future_names, fw)]
        return out


def _per_output_mean(weights: np.ndarray, n_o: int) -> np.ndarray:
    # (B, L*n_o, V) -> (n_o, V), averaged over windows and time instants
    B, L, V = weights.shape
    return weights.reshape(B, L // n_o, n_o, V).mean(axis=(0, 1))


def importance(model: IstftModel, batch: Batch, chunk: int = 256) -> ImportanceRecord:
    c = model.cfg
    past, future, static = [], [], []
    for s in range(0, len(batch), chunk):
        out = model.forward(batch.take(slice(s, s + chunk)))
        past.append(out.past_weights)
        future.append(out.future_weights)
        if out.static_weights is not None:
            static.append(out.static_weights)
    params = np.concatenate(static).mean(axis=0) if static else np.zeros(0)
    u_names = [f"u_{i}" for i in range(1, c.n_I + 1)]
    return ImportanceRecord(
        parameters=params,
        past=_per_output_mean(np.concatenate(past), c.n_o),
        future=_per_output_mean(np.concatenate(future), c.n_o),
        parameter_names=[f"mu_{i}" for i in range(1, c.p + 1)],
        past_names=u_names + ["y"],
        future_names=u_names or ["placeholder"],
    )


IMPORTANCE_HEADER = ["group", "variable", "weight"]


def write_importance(rec: ImportanceRecord, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(IMPORTANCE_HEADER)
        for g, v, w in rec.rows():
            wr.writerow([g, v, fmt(w)])


def export_importance(model: IstftModel, batch: Batch, path) -> ImportanceRecord:
    rec = importance(model, batch)
    write_importance(rec, path)
    return rec
