"""Dataset layouts, CSV persistence, group splits, windowing and scaling.

Two layouts are supported. The *raw* layout has one row per time instance
and one column per output. The *reshaped* layout stacks the outputs into a
single ``y`` column: every time instance becomes ``n_o`` consecutive rows
that differ only in ``output_id`` and ``y``, so a group of ``n_T`` instances
turns into a spatial-temporal sequence of ``n_T * n_o`` rows.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Malformed or inconsistent dataset."""


# ------------------------------------------------------------------ types


@dataclass
class Group:
    group_id: int
    mu: np.ndarray      # (p,)
    times: np.ndarray   # (n_T,)
    U: np.ndarray       # (n_T, n_I)
    Y: np.ndarray       # (n_T, n_o)


@dataclass
class RawDataset:
    groups: list[Group]

    def __post_init__(self):
        if not self.groups:
            raise DataError("dataset has no groups")
        g0 = self.groups[0]
        for g in self.groups:
            g.mu = np.asarray(g.mu, dtype=float).reshape(-1)
            g.times = np.asarray(g.times, dtype=float).reshape(-1)
            n_T = g.times.size
            g.U = np.asarray(g.U, dtype=float).reshape(n_T, -1)
            g.Y = np.asarray(g.Y, dtype=float).reshape(n_T, -1)
            if (g.times.size, g.U.shape[1], g.Y.shape[1], g.mu.size) != (
                    g0.times.size, g0.U.shape[1], g0.Y.shape[1], g0.mu.size):
                raise DataError(f"group {g.group_id} is ragged relative to group {g0.group_id}")
            if n_T > 1 and np.any(np.diff(g.times) <= 0):
                raise DataError(f"time stamps of group {g.group_id} are not strictly increasing")
        ids = [g.group_id for g in self.groups]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate group ids")

    n_p = property(lambda self: len(self.groups))
    n_T = property(lambda self: self.groups[0].times.size)
    n_I = property(lambda self: self.groups[0].U.shape[1])
    n_o = property(lambda self: self.groups[0].Y.shape[1])
    p = property(lambda self: self.groups[0].mu.size)


@dataclass
class ReshapedDataset:
    """Column store of the stacked-output layout."""

    row_id: np.ndarray
    group_id: np.ndarray
    time: np.ndarray
    U: np.ndarray          # (N, n_I)
    MU: np.ndarray         # (N, p)
    output_id: np.ndarray  # values 1..n_o
    y: np.ndarray
    n_o: int
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    @property
    def n_rows(self) -> int:
        return self.y.size

    @property
    def n_I(self) -> int:
        return self.U.shape[1]

    @property
    def p(self) -> int:
        return self.MU.shape[1]

    def group_ids(self) -> list[int]:
        ids, first = np.unique(self.group_id, return_index=True)
        return [int(i) for i in ids[np.argsort(first)]]

    @property
    def n_p(self) -> int:
        return len(self.group_ids())

    @property
    def n_T(self) -> int:
        return self.n_rows // (self.n_p * self.n_o)

    def validate(self) -> None:
        n = self.y.size
        if n == 0:
            raise DataError("dataset has no rows")
        n_o = self.n_o
        if n_o < 1 or n % n_o:
            raise DataError(f"row count {n} is not a multiple of n_o={n_o}")
        expected = np.tile(np.arange(1, n_o + 1), n // n_o)
        if not np.array_equal(self.output_id, expected):
            raise DataError(f"output_id column does not cycle 1..{n_o} in every time bundle")
        bundles = n // n_o
        for col in (self.group_id, self.time):
            b = col.reshape(bundles, n_o)
            if np.any(b != b[:, :1]):
                raise DataError("left-hand columns differ inside a time bundle")
        for mat in (self.U, self.MU):
            b = mat.reshape(bundles, n_o, -1)
            if np.any(b != b[:, :1]):
                raise DataError("left-hand columns differ inside a time bundle")
        gid = self.group_id[::n_o]
        t = self.time[::n_o]
        change = np.flatnonzero(np.diff(gid) != 0) + 1
        starts = np.concatenate([[0], change])
        lengths = np.diff(np.concatenate([starts, [bundles]]))
        if len(set(gid[starts].tolist())) != len(starts):
            raise DataError("rows of a group are not contiguous")
        if np.any(lengths != lengths[0]):
            raise DataError("groups have different numbers of time instances")
        same = np.diff(gid) == 0
        if np.any(np.diff(t)[same] <= 0):
            raise DataError("time stamps are not strictly increasing within a group")
        mu = self.MU[::n_o].reshape(len(starts), lengths[0], -1)
        if np.any(mu != mu[:, :1]):
            raise DataError("parameters vary in time within a group")

    def group_rows(self, gid: int) -> np.ndarray:
        if self._index is None:
            self._index = {}
            n_rows_group = self.n_T * self.n_o
            for k, g in enumerate(self.group_ids()):
                self._index[g] = np.arange(k * n_rows_group, (k + 1) * n_rows_group)
        try:
            return self._index[gid]
        except KeyError:
            raise DataError(f"unknown group id {gid}") from None


# -------------------------------------------------------------- reshape


def reshape(raw: RawDataset) -> ReshapedDataset:
    n_T, n_o = raw.n_T, raw.n_o
    rep = n_T * n_o
    group_id = np.concatenate([np.full(rep, g.group_id) for g in raw.groups]).astype(np.int64)
    time = np.concatenate([np.repeat(g.times, n_o) for g in raw.groups])
    U = np.concatenate([np.repeat(g.U, n_o, axis=0) for g in raw.groups])
    MU = np.concatenate([np.tile(g.mu, (rep, 1)) for g in raw.groups])
    y = np.concatenate([g.Y.reshape(-1) for g in raw.groups])
    n = y.size
    return ReshapedDataset(
        row_id=np.arange(1, n + 1, dtype=np.int64),
        group_id=group_id,
        time=time,
        U=U.reshape(n, raw.n_I),
        MU=MU.reshape(n, raw.p),
        output_id=np.tile(np.arange(1, n_o + 1, dtype=np.int64), n // n_o),
        y=y,
        n_o=n_o,
    )


def unreshape(d: ReshapedDataset) -> RawDataset:
    n_o, n_T = d.n_o, d.n_T
    groups = []
    for gid in d.group_ids():
        rows = d.group_rows(gid)
        b = rows[::n_o]
        groups.append(Group(
            group_id=gid,
            mu=d.MU[rows[0]].copy(),
            times=d.time[b].copy(),
            U=d.U[b].copy(),
            Y=d.y[rows].reshape(n_T, n_o).copy(),
        ))
    return RawDataset(groups)


def subset(d: ReshapedDataset, group_ids: Sequence[int]) -> ReshapedDataset:
    rows = np.concatenate([d.group_rows(int(g)) for g in group_ids]) if len(group_ids) else None
    if rows is None:
        raise DataError("empty group selection")
    return ReshapedDataset(
        row_id=np.arange(1, rows.size + 1, dtype=np.int64),
        group_id=d.group_id[rows], time=d.time[rows], U=d.U[rows], MU=d.MU[rows],
        output_id=d.output_id[rows], y=d.y[rows], n_o=d.n_o,
    )


# ---------------------------------------------------------------- split


@dataclass(frozen=True)
class SplitSpec:
    n_train: int = 0
    n_val: int = 0
    n_test: int = 0
    train_ids: tuple[int, ...] | None = None
    val_ids: tuple[int, ...] | None = None
    test_ids: tuple[int, ...] | None = None


def split_ids(group_ids: Sequence[int], s: SplitSpec, seed: int) -> tuple[list[int], list[int], list[int]]:
    if s.train_ids is not None:
        parts = [list(s.train_ids), list(s.val_ids or ()), list(s.test_ids or ())]
        flat = [g for p in parts for g in p]
        if len(set(flat)) != len(flat):
            raise DataError("explicit split lists overlap")
        unknown = set(flat) - set(group_ids)
        if unknown:
            raise DataError(f"split names unknown groups {sorted(unknown)}")
        return parts[0], parts[1], parts[2]
    counts = (s.n_train, s.n_val, s.n_test)
    if min(counts) < 0 or np.sum(counts) > len(group_ids):
        raise DataError(f"split {counts} over-allocates {len(group_ids)} groups")
    perm = np.random.default_rng(seed).permutation(np.asarray(group_ids))
    a, b = s.n_train, s.n_train + s.n_val
    return (sorted(perm[:a].tolist()), sorted(perm[a:b].tolist()),
            sorted(perm[b:b + s.n_test].tolist()))


def split(d: ReshapedDataset, s: SplitSpec, seed: int = 0):
    """Partition by group id; returns (train, validate, test), ``None`` for empty parts."""
    parts = split_ids(d.group_ids(), s, seed)
    return tuple(subset(d, ids) if ids else None for ids in parts)


# ------------------------------------------------------------- windowing


@dataclass(frozen=True)
class WindowSpec:
    n_k: int
    n_tau: int
    n_omega: int = 1
    starts: tuple[int, ...] | None = None  # explicit 0-based starts override n_omega

    @property
    def n_t(self) -> int:
        return self.n_k + self.n_tau


@dataclass
class Window:
    group_id: int
    start: int          # 0-based index of the first time instance
    n_k: int
    times: np.ndarray   # (n_t,)
    U: np.ndarray       # (n_t, n_I)
    mu: np.ndarray      # (p,)
    Y: np.ndarray       # (n_t, n_o)
    rows: np.ndarray    # indices into the reshaped dataset, n_t * n_o of them

    @property
    def n_t(self) -> int:
        return self.times.size

    @property
    def n_tau(self) -> int:
        return self.n_t - self.n_k

    @property
    def past(self) -> np.ndarray:
        return self.Y[: self.n_k]

    @property
    def target(self) -> np.ndarray:
        return self.Y[self.n_k:]


def window_starts(n_T: int, w: WindowSpec) -> list[int]:
    if w.n_k < 1 or w.n_tau < 1:
        raise DataError("windows need n_k >= 1 and n_tau >= 1")
    if w.n_t > n_T:
        raise DataError(f"window length n_t={w.n_t} exceeds n_T={n_T}")
    last = n_T - w.n_t
    if w.starts is not None:
        bad = [s for s in w.starts if not 0 <= s <= last]
        if bad:
            raise DataError(f"window starts {bad} fall outside [0, {last}]")
        return list(w.starts)
    if w.n_omega < 1 or w.n_omega > last + 1:
        raise DataError(f"{w.n_omega} distinct windows of length {w.n_t} do not fit in n_T={n_T}")
    if w.n_omega == 1:
        return [0]
    return [int(s) for s in np.rint(np.linspace(0, last, w.n_omega))]


def window(d: ReshapedDataset, w: WindowSpec) -> list[Window]:
    n_o, n_T = d.n_o, d.n_T
    starts = window_starts(n_T, w)
    out = []
    for gid in d.group_ids():
        rows = d.group_rows(gid)
        bundle = rows[::n_o]
        Y = d.y[rows].reshape(n_T, n_o)
        mu = d.MU[rows[0]]
        for s in starts:
            sl = slice(s, s + w.n_t)
            out.append(Window(
                group_id=gid, start=s, n_k=w.n_k,
                times=d.time[bundle[sl]], U=d.U[bundle[sl]], mu=mu,
                Y=Y[sl], rows=rows[s * n_o:(s + w.n_t) * n_o],
            ))
    return out


# ------------------------------------------------------------------ csv


def reshaped_header(n_I: int, p: int) -> list[str]:
    return (["row_id", "group_id", "time"] + [f"u_{i}" for i in range(1, n_I + 1)]
            + [f"mu_{i}" for i in range(1, p + 1)] + ["output_id", "y"])


def raw_header(n_I: int, p: int, n_o: int) -> list[str]:
    return (["row_id", "group_id", "time"] + [f"u_{i}" for i in range(1, n_I + 1)]
            + [f"mu_{i}" for i in range(1, p + 1)] + [f"y_{i}" for i in range(1, n_o + 1)])


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_csv(d: ReshapedDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(reshaped_header(d.n_I, d.p)) + "\n")
        for k in range(d.n_rows):
            cells = [str(int(d.row_id[k])), str(int(d.group_id[k])), fmt(d.time[k])]
            cells += [fmt(v) for v in d.U[k]]
            cells += [fmt(v) for v in d.MU[k]]
            cells += [str(int(d.output_id[k])), fmt(d.y[k])]
            fh.write(",".join(cells) + "\n")


def _read_table(path) -> tuple[list[str], np.ndarray]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise DataError(f"{path}: empty file")
            rows = [r for r in reader if r]
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    try:
        table = np.array(rows, dtype=float).reshape(len(rows), len(header))
    except ValueError:
        raise DataError(f"{path}: non-numeric cell or ragged row") from None
    return header, table


def _count_prefixed(header: Sequence[str], prefix: str, start: int) -> int:
    n = 0
    while start + n < len(header) and header[start + n] == f"{prefix}{n + 1}":
        n += 1
    return n


def read_csv(path, n_o: int | None = None) -> ReshapedDataset:
    """Read the stacked-output layout; ``n_o`` is inferred unless declared."""
    header, table = _read_table(path)
    if header[:3] != ["row_id", "group_id", "time"]:
        raise DataError(f"{path}: header must start with row_id,group_id,time")
    n_I = _count_prefixed(header, "u_", 3)
    p = _count_prefixed(header, "mu_", 3 + n_I)
    if header != reshaped_header(n_I, p):
        raise DataError(f"{path}: unexpected header {','.join(header)}")
    if table.shape[0] == 0:
        raise DataError(f"{path}: no data rows")
    oid = table[:, -2].astype(np.int64)
    inferred = int(oid.max())
    if n_o is not None and n_o != inferred:
        raise DataError(f"{path}: declared n_o={n_o} but output_id runs to {inferred}")
    return ReshapedDataset(
        row_id=table[:, 0].astype(np.int64),
        group_id=table[:, 1].astype(np.int64),
        time=table[:, 2],
        U=table[:, 3:3 + n_I],
        MU=table[:, 3 + n_I:3 + n_I + p],
        output_id=oid,
        y=table[:, -1],
        n_o=n_o if n_o is not None else inferred,
    )


def write_raw_csv(raw: RawDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(raw_header(raw.n_I, raw.p, raw.n_o)) + "\n")
        k = 0
        for g in raw.groups:
            for i in range(raw.n_T):
                k += 1
                cells = [str(k), str(g.group_id), fmt(g.times[i])]
                cells += [fmt(v) for v in g.U[i]] + [fmt(v) for v in g.mu]
                cells += [fmt(v) for v in g.Y[i]]
                fh.write(",".join(cells) + "\n")


def read_raw_csv(path) -> RawDataset:
    header, table = _read_table(path)
    if header[:3] != ["row_id", "group_id", "time"]:
        raise DataError(f"{path}: header must start with row_id,group_id,time")
    n_I = _count_prefixed(header, "u_", 3)
    p = _count_prefixed(header, "mu_", 3 + n_I)
    n_o = _count_prefixed(header, "y_", 3 + n_I + p)
    if n_o < 1 or header != raw_header(n_I, p, n_o):
        raise DataError(f"{path}: unexpected header {','.join(header)}")
    gid = table[:, 1].astype(np.int64)
    groups = []
    for g in dict.fromkeys(gid.tolist()):
        sel = table[gid == g]
        groups.append(Group(g, sel[0, 3 + n_I:3 + n_I + p], sel[:, 2],
                            sel[:, 3:3 + n_I], sel[:, 3 + n_I + p:]))
    return RawDataset(groups)


# -------------------------------------------------------- normalisation


@dataclass
class NormStats:
    u_mean: np.ndarray
    u_std: np.ndarray
    mu_mean: np.ndarray
    mu_std: np.ndarray
    y_mean: np.ndarray  # per output id
    y_std: np.ndarray

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in vars(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})

    @classmethod
    def identity(cls, n_I: int, p: int, n_o: int) -> "NormStats":
        return cls(np.zeros(n_I), np.ones(n_I), np.zeros(p), np.ones(p), np.zeros(n_o), np.ones(n_o))


def _moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = x.mean(axis=0)
    s = x.std(axis=0)
    flat = s <= 1e-12 * np.maximum(1.0, np.abs(m))
    return np.where(flat, 0.0, m), np.where(flat, 1.0, s)


def compute_stats(train: ReshapedDataset) -> NormStats:
    """Column moments of the training partition; outputs are scaled per output id.

    A column with zero variance gets mean 0 and std 1 so it passes through.
    """
    n_o = train.n_o
    b = slice(None, None, n_o)
    u_mean, u_std = _moments(train.U[b]) if train.n_I else (np.zeros(0), np.ones(0))
    mu_mean, mu_std = _moments(train.MU[b]) if train.p else (np.zeros(0), np.ones(0))
    y_mean, y_std = _moments(train.y.reshape(-1, n_o))
    return NormStats(u_mean, u_std, mu_mean, mu_std, y_mean, y_std)


def _replace(d: ReshapedDataset, U, MU, y) -> ReshapedDataset:
    return ReshapedDataset(d.row_id.copy(), d.group_id.copy(), d.time.copy(),
                           U, MU, d.output_id.copy(), y, d.n_o)


def normalize(d: ReshapedDataset, stats: NormStats) -> ReshapedDataset:
    oi = d.output_id - 1
    return _replace(d, (d.U - stats.u_mean) / stats.u_std, (d.MU - stats.mu_mean) / stats.mu_std,
                    (d.y - stats.y_mean[oi]) / stats.y_std[oi])


def denormalize(d: ReshapedDataset, stats: NormStats) -> ReshapedDataset:
    oi = d.output_id - 1
    return _replace(d, d.U * stats.u_std + stats.u_mean, d.MU * stats.mu_std + stats.mu_mean,
                    d.y * stats.y_std[oi] + stats.y_mean[oi])


def denormalize_outputs(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Map ``(..., n_o)`` normalised outputs back to original units."""
    return values * stats.y_std + stats.y_mean
