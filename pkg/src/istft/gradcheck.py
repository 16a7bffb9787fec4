"""Central finite-difference checks of the autodiff engine and the full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import build_block_mask
from .model import Batch, IstftModel, ModelConfig
from .tensor import Tensor

H = 1e-5
OP_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.rel_error < self.tol


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_function(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
                   h: float = H) -> float:
    """Relative error of d(sum(R ⊙ fn(x)))/dx against central differences.

    ``R`` is a fixed random projection so every output entry contributes.
    """
    rng = np.random.default_rng(seed)
    base = [np.array(x, dtype=float) for x in inputs]
    out_shape = fn(*[Tensor(x) for x in base]).shape
    proj = rng.standard_normal(out_shape)

    def scalar(arrays) -> float:
        return float((fn(*[Tensor(a) for a in arrays]).data * proj).sum())

    params = [T.parameter(x.copy()) for x in base]
    T.backward(T.sum(T.mul(fn(*params), Tensor(proj))))
    analytic, numeric = [], []
    for k, x in enumerate(base):
        g = params[k].grad if params[k].grad is not None else np.zeros_like(x)
        analytic.append(g.ravel())
        num = np.empty(x.size)
        for j in range(x.size):
            plus = [a.copy() for a in base]
            minus = [a.copy() for a in base]
            plus[k].flat[j] += h
            minus[k].flat[j] -= h
            num[j] = (scalar(plus) - scalar(minus)) / (2 * h)
        numeric.append(num)
    return rel_error(np.concatenate(analytic), np.concatenate(numeric))


def _op_cases(rng: np.random.Generator):
    r = rng.standard_normal
    mask = build_block_mask(3, 2).allowed
    drop_seed = int(rng.integers(1 << 30))
    d = 3
    return [
        ("add", lambda a, b: T.add(a, b), [r((3, 4)), r((4,))]),
        ("sub", lambda a, b: T.sub(a, b), [r((3, 4)), r((3, 4))]),
        ("mul", lambda a, b: T.mul(a, b), [r((2, 3, 4)), r((3, 4))]),
        ("scale", lambda a: T.scale(a, -1.7), [r((3, 4))]),
        ("matmul", lambda a, b: T.matmul(a, b), [r((3, 4)), r((4, 2))]),
        ("matmul_batched", lambda a, b: T.matmul(a, b), [r((2, 3, 4)), r((2, 4, 2))]),
        ("abs", lambda a: T.absolute(a), [r((3, 4)) + 0.05 * np.sign(r((3, 4)))]),
        ("sum", lambda a: T.sum(a, axis=1), [r((3, 4))]),
        ("mean", lambda a: T.mean(a, axis=0), [r((3, 4))]),
        ("norm", lambda a: T.norm(a), [r((3, 4))]),
        ("sigmoid", lambda a: T.sigmoid(a), [r((3, 4))]),
        ("tanh", lambda a: T.tanh(a), [r((3, 4))]),
        ("elu", lambda a: T.elu(a), [r((3, 4))]),
        ("dropout", lambda a: T.dropout(a, 0.7, True, np.random.default_rng(drop_seed)), [r((3, 4))]),
        ("layer_norm", lambda x, g, b: T.layer_norm(x, g, b), [r((3, 5)), r((5,)), r((5,))]),
        ("softmax", lambda a: T.softmax(a), [r((3, 4))]),
        ("masked_softmax", lambda a: T.masked_softmax(a, mask), [r((6, 6))]),
        ("transpose", lambda a: T.transpose(a), [r((2, 3, 4))]),
        ("reshape", lambda a: T.reshape(a, (4, 3)), [r((3, 4))]),
        ("concat", lambda a, b: T.concat([a, b], axis=0), [r((2, 3)), r((1, 3))]),
        ("stack", lambda a, b: T.stack([a, b], axis=1), [r((2, 3)), r((2, 3))]),
        ("slice", lambda a: T.index(a, (slice(None), slice(1, 3))), [r((3, 4))]),
        ("gather", lambda a: T.index(a, np.array([0, 2, 2])), [r((3, 4))]),
        ("lstm_sequence", lambda xw, w, h, c: T.lstm_sequence(xw, w, h, c),
         [r((2, 4, 4 * d)), 0.5 * r((d, 4 * d)), r((2, d)), r((2, d))]),
    ]


def check_ops(seed: int = 0, tol: float = OP_TOL) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [CheckResult(name, check_function(fn, xs, seed), tol)
            for name, fn, xs in _op_cases(rng)]


TOY = ModelConfig(d_model=8, n_heads=2, dropout=0.0, n_o=2, n_I=1, p=2, n_k=1, n_tau=2)


def random_batch(cfg: ModelConfig, size: int, seed: int = 0) -> Batch:
    rng = np.random.default_rng(seed)
    return Batch(
        U=rng.standard_normal((size, cfg.n_t, cfg.n_I)),
        past=rng.standard_normal((size, cfg.n_k, cfg.n_o)),
        mu=rng.standard_normal((size, cfg.p)),
        target=rng.standard_normal((size, cfg.n_tau, cfg.n_o)),
    )


def check_model(cfg: ModelConfig = TOY, seed: int = 0, per_weight: int = 2,
                tol: float = MODEL_TOL, h: float = H) -> CheckResult:
    """Check ``per_weight`` random entries of every weight tensor of a toy model."""
    model = IstftModel(cfg, seed=seed)
    batch = random_batch(cfg, 2, seed)
    rng = np.random.default_rng(seed + 1)
    # nonzero placeholder and weights so no branch is trivially flat
    for t in model.parameters():
        t.data = t.data + 0.1 * rng.standard_normal(t.shape)
    proj = rng.standard_normal((2, cfg.n_tau, cfg.n_o))

    def scalar() -> float:
        return float((model.predict(batch) * proj).sum())

    out = model.forward(batch)
    for t in model.parameters():
        t.grad = None
    T.backward(T.sum(T.mul(out.output, Tensor(proj))))
    analytic, numeric = [], []
    for t in model.parameters():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        picks = rng.choice(t.data.size, size=min(per_weight, t.data.size), replace=False)
        for j in picks:
            old = t.data.flat[j]
            t.data.flat[j] = old + h
            fp = scalar()
            t.data.flat[j] = old - h
            fm = scalar()
            t.data.flat[j] = old
            analytic.append(g.flat[j])
            numeric.append((fp - fm) / (2 * h))
    for t in model.parameters():
        t.grad = None
    return CheckResult("model", rel_error(np.array(analytic), np.array(numeric)), tol)
