"""The assembled multi-output fusion transformer.

A window of ``n_t`` time instances and ``n_o`` outputs is laid out as a
sequence of ``M = n_t * n_o`` positions (time-major, output-minor). Past
positions carry the known inputs plus the observed output value; future
positions carry only the known inputs, or a learned placeholder token when
the system has none. A learned per-output vector is added to every
position so that the interleaved outputs stay distinguishable.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import InterpretableAttention, build_block_mask
from .data import NormStats, Window
from .layers import (GRN, LSTM, Context, GateAddNorm, Linear, Module, StaticEncoders,
                     VariableSelection, lstm_encode_decode)
from .tensor import Tensor

FORMAT = "istft-model"
VERSION = 1


class ModelFileError(ValueError):
    """A model file is unreadable or does not match its manifest."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 16
    n_heads: int = 2
    dropout: float = 0.0
    n_o: int = 1
    n_I: int = 0
    p: int = 0
    n_k: int = 1
    n_tau: int = 1

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} must be a positive multiple of n_heads={self.n_heads}")
        if min(self.n_o, self.n_k, self.n_tau) < 1 or min(self.n_I, self.p) < 0:
            raise ValueError("need n_o, n_k, n_tau >= 1 and n_I, p >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.dropout}")

    @property
    def n_t(self) -> int:
        return self.n_k + self.n_tau

    @property
    def M(self) -> int:
        return self.n_t * self.n_o


@dataclass
class Batch:
    """Stacked, already-normalised windows."""

    U: np.ndarray       # (B, n_t, n_I)
    past: np.ndarray    # (B, n_k, n_o)
    mu: np.ndarray      # (B, p)
    target: np.ndarray  # (B, n_tau, n_o)

    @classmethod
    def from_windows(cls, windows: Sequence[Window]) -> "Batch":
        return cls(
            U=np.stack([w.U for w in windows]),
            past=np.stack([w.past for w in windows]),
            mu=np.stack([w.mu for w in windows]),
            target=np.stack([w.target for w in windows]),
        )

    def __len__(self) -> int:
        return self.U.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.U[idx], self.past[idx], self.mu[idx], self.target[idx])


@dataclass
class PredictionBatch:
    predictions: np.ndarray            # (B, n_tau, n_o)
    attention: np.ndarray              # (B, M, M)
    past_weights: np.ndarray           # (B, n_k*n_o, n_I + 1)
    future_weights: np.ndarray         # (B, n_tau*n_o, max(n_I, 1))
    static_weights: np.ndarray | None  # (B, p) or None when p == 0
    output: Tensor = field(repr=False, default=None)  # graph-connected predictions


def _scalar_embed(layer: Linear, values: np.ndarray) -> Tensor:
    return layer(Tensor(values[..., None]))


class IstftModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        has_static = cfg.p > 0
        self.input_embed = [Linear(rng, 1, d) for _ in range(cfg.n_I)]
        self.observed_embed = Linear(rng, 1, d)
        self.param_embed = [Linear(rng, 1, d) for _ in range(cfg.p)]
        self.placeholder = T.parameter(np.zeros(d)) if cfg.n_I == 0 else None
        self.output_embed = T.parameter(rng.uniform(-1.0, 1.0, (cfg.n_o, d)) / np.sqrt(d))
        if has_static:
            self.static_select = VariableSelection(rng, cfg.p, d)
            self.static = StaticEncoders(rng, d)
        self.past_select = VariableSelection(rng, cfg.n_I + 1, d, context=has_static)
        self.future_select = VariableSelection(rng, max(cfg.n_I, 1), d, context=has_static)
        self.lstm = LSTM(rng, d)
        self.post_lstm = GateAddNorm(rng, d)
        self.enrich = GRN(rng, d, d, context=has_static)
        self.attention = InterpretableAttention(rng, d, cfg.n_heads)
        self.post_attention = GateAddNorm(rng, d)
        self.feed_forward = GRN(rng, d, d)
        self.final = GateAddNorm(rng, d)
        self.head = Linear(rng, d, 1)
        self.mask = build_block_mask(cfg.n_t, cfg.n_o)

    def weights(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    # -------------------------------------------------------------- forward

    def _check(self, batch: Batch) -> None:
        c = self.cfg
        expect = {
            "inputs": ((c.n_t, c.n_I), batch.U.shape[1:]),
            "observed outputs": ((c.n_k, c.n_o), batch.past.shape[1:]),
            "parameters": ((c.p,), batch.mu.shape[1:]),
        }
        for stage, (want, got) in expect.items():
            if tuple(want) != tuple(got):
                raise T.ShapeError(f"{stage}: window shape {tuple(got)} does not match model {tuple(want)}")

    def forward(self, batch: Batch, train: bool = False,
                rng: np.random.Generator | None = None) -> PredictionBatch:
        self._check(batch)
        c = self.cfg
        d, n_o = c.d_model, c.n_o
        B = len(batch)
        P, F = c.n_k * n_o, c.n_tau * n_o
        ctx = Context(train=train, keep_prob=1.0 - c.dropout, rng=rng)

        # static covariates -> context vectors
        static_w = None
        if c.p > 0:
            emb = [_scalar_embed(l, batch.mu[:, j]) for j, l in enumerate(self.param_embed)]
            zeta, sw = self.static_select(emb, ctx=ctx)
            static_w = sw.data
            contexts = self.static(zeta, ctx)
            c_sel = T.reshape(contexts["selection"], (B, 1, d))
            c_enr = T.reshape(contexts["enrichment"], (B, 1, d))
            h0, c0 = contexts["hidden"], contexts["cell"]
        else:
            c_sel = c_enr = None
            h0 = c0 = Tensor(np.zeros((B, d)))

        # per-position inputs: known inputs are duplicated over each output bundle
        u_pos = np.repeat(batch.U, n_o, axis=1)  # (B, M, n_I)
        past_vars = [_scalar_embed(l, u_pos[:, :P, j]) for j, l in enumerate(self.input_embed)]
        past_vars.append(_scalar_embed(self.observed_embed, batch.past.reshape(B, P)))
        fut_vars = [_scalar_embed(l, u_pos[:, P:, j]) for j, l in enumerate(self.input_embed)]
        past_sel, past_w = self.past_select(past_vars, c_sel, ctx)
        if c.n_I:
            fut_sel, fut_w = self.future_select(fut_vars, c_sel, ctx)
        else:
            # the placeholder token is identical at every future position, so the
            # selection network runs once per window and is broadcast
            token = T.reshape(self.placeholder, (1, 1, d))
            if c_sel is not None:
                token = T.add(Tensor(np.zeros((B, 1, d))), token)
            fut_sel, fut_w = self.future_select([token], c_sel, ctx)
            fut_sel = T.add(Tensor(np.zeros((B, F, d))), fut_sel)
            fut_w = T.Tensor(np.broadcast_to(fut_w.data, (B, F, 1)))

        out_ids = np.tile(np.arange(n_o), c.n_t)
        tag = T.index(self.output_embed, out_ids)  # (M, d)
        past_in = T.add(past_sel, tag[:P])
        fut_in = T.add(fut_sel, tag[P:])

        # local processing
        phi = lstm_encode_decode(self.lstm, past_in, fut_in, h0, c0)
        xi = T.concat([past_in, fut_in], axis=-2)
        phi_t = self.post_lstm(phi, xi, ctx)

        # temporal fusion decoder
        theta = self.enrich(phi_t, c_enr, ctx)
        att, a_bar = self.attention(theta, self.mask)
        delta = self.post_attention(att, theta, ctx)
        psi = self.feed_forward(delta, ctx=ctx)
        psi_t = self.final(psi, phi_t, ctx)

        y = self.head(psi_t[:, P:, :])
        y = T.reshape(y, (B, c.n_tau, n_o))
        return PredictionBatch(
            predictions=y.data, attention=a_bar.data, past_weights=past_w.data,
            future_weights=fut_w.data, static_weights=static_w, output=y,
        )

    __call__ = forward

    def predict(self, batch: Batch) -> np.ndarray:
        return self.forward(batch).predictions


# --------------------------------------------------------------- persistence


def save(model: IstftModel, path, stats: NormStats | None = None, extra: dict | None = None) -> None:
    weights = model.weights()
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "config": asdict(model.cfg),
        "stats": stats.to_dict() if stats is not None else None,
        "weights": {k: list(v.shape) for k, v in weights.items()},
        "extra": extra or {},
    }
    arrays = {f"w/{k}": v.data for k, v in weights.items()}
    arrays["manifest"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load(path) -> tuple[IstftModel, NormStats | None, dict]:
    """Return ``(model, stats, extra)``; raises :class:`ModelFileError` on any mismatch."""
    try:
        with np.load(path, allow_pickle=False) as z:
            manifest = json.loads(bytes(z["manifest"]).decode())
            arrays = {k[2:]: z[k] for k in z.files if k.startswith("w/")}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, EOFError, UnicodeDecodeError) as e:
        raise ModelFileError(f"{path}: unreadable model file ({e})") from None
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise ModelFileError(f"{path}: expected {FORMAT} v{VERSION}, found "
                             f"{manifest.get('format')} v{manifest.get('version')}")
    try:
        model = IstftModel(ModelConfig(**manifest["config"]))
    except (TypeError, ValueError) as e:
        raise ModelFileError(f"{path}: bad model config ({e})") from None
    weights = model.weights()
    declared = {k: tuple(v) for k, v in manifest["weights"].items()}
    if set(declared) != set(weights) or set(arrays) != set(weights):
        raise ModelFileError(f"{path}: weight names do not match the architecture")
    for name, t in weights.items():
        if declared[name] != t.shape or arrays[name].shape != t.shape:
            raise ModelFileError(f"{path}: weight {name} has shape {arrays[name].shape}, "
                                 f"manifest {declared[name]}, model {t.shape}")
        t.data = np.array(arrays[name], dtype=np.float64)
    stats = NormStats.from_dict(manifest["stats"]) if manifest.get("stats") else None
    return model, stats, manifest.get("extra", {})
