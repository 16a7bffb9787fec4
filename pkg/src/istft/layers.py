"""Temporal-fusion building blocks: gating, gated residual networks, LSTM,
variable selection and static covariate encoders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Container whose ``Tensor`` attributes (and sub-modules) are weights."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]


@dataclass
class Context:
    """Per-forward state: train/eval flag and the dropout generator."""

    train: bool = False
    keep_prob: float = 1.0
    rng: np.random.Generator | None = None

    def drop(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.keep_prob, self.train, self.rng)


EVAL = Context()


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return T.parameter(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True):
        self.weight = uniform_init(rng, n_in, (n_in, n_out))
        self.bias = T.parameter(np.zeros(n_out)) if bias else None
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise T.ShapeError(f"linear expects last axis {self.n_in}, got {x.shape}")
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = T.parameter(np.ones(d))
        self.beta = T.parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class GLU(Module):
    """σ(x W_a + b_a) ⊙ (x W_b + b_b)."""

    def __init__(self, rng, n_in: int, n_out: int):
        self.gate = Linear(rng, n_in, n_out)
        self.value = Linear(rng, n_in, n_out)

    def __call__(self, x: Tensor) -> Tensor:
        return T.mul(T.sigmoid(self.gate(x)), self.value(x))


class GateAddNorm(Module):
    """LayerNorm(residual + GLU(dropout(x)))."""

    def __init__(self, rng, d: int):
        self.glu = GLU(rng, d, d)
        self.norm = LayerNorm(d)

    def __call__(self, x: Tensor, residual: Tensor, ctx: Context = EVAL) -> Tensor:
        return self.norm(T.add(residual, self.glu(ctx.drop(x))))


class GRN(Module):
    """Gated residual network.

    ``η₂ = ELU(W₂x + b₂ + W₃c)``, ``η₁ = W₁η₂ + b₁``,
    ``out = LayerNorm(skip(x) + GLU(dropout(η₁)))``. The skip path is a
    linear adapter only when input and output widths differ.
    """

    def __init__(self, rng, n_in: int, d_hidden: int, n_out: int | None = None,
                 context: bool = False):
        n_out = d_hidden if n_out is None else n_out
        self.fc2 = Linear(rng, n_in, d_hidden)
        self.context = Linear(rng, d_hidden, d_hidden, bias=False) if context else None
        self.fc1 = Linear(rng, d_hidden, d_hidden)
        self.glu = GLU(rng, d_hidden, n_out)
        self.skip = Linear(rng, n_in, n_out) if n_in != n_out else None
        self.norm = LayerNorm(n_out)
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x: Tensor, context: Tensor | None = None, ctx: Context = EVAL) -> Tensor:
        if context is not None and self.context is None:
            raise ValueError("context given to a GRN built without a context projection")
        a = self.fc2(x)
        if context is not None:
            a = T.add(a, self.context(context))
        eta = self.fc1(T.elu(a))
        residual = x if self.skip is None else self.skip(x)
        return self.norm(T.add(residual, self.glu(ctx.drop(eta))))


class VariableSelection(Module):
    """Softmax-weighted combination of per-variable GRN outputs.

    Inputs are per-variable embeddings of shape ``(..., d)``; the selection
    logits come from a GRN over their concatenation. A lone variable always
    has weight one, so no logit network is built for it.
    """

    def __init__(self, rng, n_vars: int, d: int, context: bool = False):
        if n_vars < 1:
            raise ValueError("variable selection needs at least one variable")
        self.n_vars, self.d = n_vars, d
        self.flat = GRN(rng, n_vars * d, d, n_out=n_vars, context=context) if n_vars > 1 else None
        self.per_var = [GRN(rng, d, d) for _ in range(n_vars)]

    def __call__(self, embeddings: list[Tensor], context: Tensor | None = None,
                 ctx: Context = EVAL) -> tuple[Tensor, Tensor]:
        if not embeddings:
            raise ValueError("variable selection over an empty variable list")
        if len(embeddings) != self.n_vars:
            raise ValueError(f"expected {self.n_vars} variables, got {len(embeddings)}")
        for e in embeddings:
            if e.shape[-1] != self.d:
                raise T.ShapeError(f"variable embedding width {e.shape[-1]} != d_model {self.d}")
        if self.flat is None:
            weights = Tensor(np.ones(embeddings[0].shape[:-1] + (1,)))
        else:
            weights = T.softmax(self.flat(T.concat(embeddings, axis=-1), context, ctx))
        processed = T.stack([g(e, ctx=ctx) for g, e in zip(self.per_var, embeddings)], axis=-2)
        lead = weights.shape[:-1]
        w = T.reshape(weights, lead + (1, self.n_vars))
        combined = T.reshape(T.matmul(w, processed), lead + (self.d,))
        return combined, weights


class StaticEncoders(Module):
    """Four GRNs mapping the static embedding to the model's context vectors."""

    names = ("selection", "cell", "hidden", "enrichment")

    def __init__(self, rng, d: int):
        self.selection = GRN(rng, d, d)
        self.cell = GRN(rng, d, d)
        self.hidden = GRN(rng, d, d)
        self.enrichment = GRN(rng, d, d)

    def __call__(self, static: Tensor, ctx: Context = EVAL) -> dict[str, Tensor]:
        return {n: getattr(self, n)(static, ctx=ctx) for n in self.names}


class LSTM(Module):
    """Single-layer LSTM; each gate matrix acts on ``[x, h]`` (2d × d)."""

    gates = ("i", "f", "g", "o")

    def __init__(self, rng, d: int):
        self.d = d
        for gname in self.gates:
            setattr(self, f"W_{gname}", uniform_init(rng, 2 * d, (2 * d, d)))
            setattr(self, f"b_{gname}", T.parameter(np.zeros(d)))

    def _stacked(self) -> tuple[Tensor, Tensor, Tensor]:
        W = T.concat([getattr(self, f"W_{g}") for g in self.gates], axis=1)
        b = T.concat([getattr(self, f"b_{g}") for g in self.gates], axis=0)
        return W[: self.d], W[self.d:], b

    def __call__(self, x: Tensor, h0: Tensor, c0: Tensor) -> Tensor:
        """Run over axis -2 of ``x`` (``(..., L, d)``); returns all hidden states."""
        if x.shape[-1] != self.d:
            raise T.ShapeError(f"LSTM input width {x.shape[-1]} != {self.d}")
        Wx, Wh, b = self._stacked()
        xw = T.add(T.matmul(x, Wx), b)
        return T.lstm_sequence(xw, Wh, h0, c0)


def lstm_encode_decode(lstm: LSTM, past: Tensor, future: Tensor,
                       h0: Tensor, c0: Tensor) -> Tensor:
    """Encoder over past positions, decoder continuing its state over future
    positions; output concatenates both (``M = past + future`` positions)."""
    if past.shape[:-2] != future.shape[:-2] or past.shape[-1] != future.shape[-1]:
        raise T.ShapeError(f"encoder/decoder inputs disagree: {past.shape} vs {future.shape}")
    seq = T.concat([past, future], axis=-2)
    return lstm(seq, h0, c0)
