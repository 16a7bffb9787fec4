import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from istft import tensor as T
from istft.gradcheck import random_batch
from istft.model import Batch, IstftModel, ModelConfig
from istft.training import (LOG_HEADER, Adam, NumericError, TrainConfig, batch_loss, clip_gradients,
                            global_norm, loss_mae, loss_mse, quantile_loss, train)

from oracles import pinball

SMALL = ModelConfig(d_model=8, n_heads=2, n_o=2, n_k=2, n_tau=2)


def test_loss_examples():
    y = np.array([[[1.0, 2.0]]])
    assert float(loss_mae(y, y).data) == 0.0
    assert float(loss_mae(np.array([[[1.5, 2.5]]]), y).data) == 1.0
    assert float(loss_mse(np.zeros((1, 1, 2)), np.array([[[3.0, 4.0]]])).data) == 5.0
    assert float(loss_mse(y, y).data) == 0.0


def test_loss_normalisation_uses_global_window_count():
    rng = np.random.default_rng(0)
    p, y = rng.standard_normal((4, 3, 2)), rng.standard_normal((4, 3, 2))
    whole = float(loss_mae(p, y).data)
    halves = sum(float(loss_mae(p[s], y[s], n_windows=4).data) for s in (slice(0, 2), slice(2, 4)))
    assert abs(whole - halves) < 1e-14
    assert abs(whole - np.abs(p - y).sum() / 12) < 1e-14


def test_loss_input_errors():
    with pytest.raises(T.ShapeError):
        loss_mae(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))
    with pytest.raises(ValueError):
        loss_mse(np.full((1, 1, 1), np.nan), np.zeros((1, 1, 1)))
    for q in (0.0, 1.0, -0.5):
        with pytest.raises(ValueError):
            quantile_loss(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), q)


def test_quantile_examples():
    one = lambda v: np.full((1, 1, 1), v)  # noqa: E731
    assert float(quantile_loss(one(1.0), one(2.0), 0.5).data) == 0.5
    under = float(quantile_loss(one(0.0), one(1.0), 0.9).data)
    over = float(quantile_loss(one(1.0), one(0.0), 0.9).data)
    assert abs(under - 0.9) < 1e-15 and abs(over - 0.1) < 1e-15
    assert abs(under / over - 9.0) < 1e-12
    for q in (0.1, 0.5, 0.73):
        assert float(quantile_loss(one(3.3), one(3.3), q).data) == 0.0


batches = st.tuples(st.integers(1, 5), st.integers(1, 4), st.integers(1, 4)).flatmap(
    lambda s: st.tuples(arrays(np.float64, s, elements=st.floats(-1e3, 1e3)),
                        arrays(np.float64, s, elements=st.floats(-1e3, 1e3))))


@settings(max_examples=100, deadline=None)
@given(batches)
def test_median_quantile_is_half_mae(pair):
    pred, target = pair
    mae = float(loss_mae(pred, target).data)
    q = float(quantile_loss(pred, target, 0.5).data)
    assert abs(q - 0.5 * mae) <= 1e-12 * max(1.0, mae)
    # for one output the per-output mean coincides
    if pred.shape[2] == 1:
        assert float(quantile_loss(pred, target, 0.5, output_mean=True).data) == q


@settings(max_examples=50, deadline=None)
@given(batches, st.floats(0.01, 0.99))
def test_quantile_matches_pinball_oracle(pair, q):
    pred, target = pair
    n, n_tau, n_o = pred.shape
    ref = sum(pinball(y, yh, q) for y, yh in zip(target.ravel(), pred.ravel()))
    got = float(quantile_loss(pred, target, q).data) * n * n_tau
    assert abs(got - ref) <= 1e-9 * max(1.0, ref)
    got_mean = float(quantile_loss(pred, target, q, output_mean=True).data) * n * n_tau * n_o
    assert abs(got_mean - ref) <= 1e-9 * max(1.0, ref)


@settings(max_examples=50, deadline=None)
@given(batches)
def test_mse_nonnegative_and_zero_iff_equal(pair):
    pred, target = pair
    v = float(loss_mse(pred, target).data)
    assert v >= 0.0
    assert (v == 0.0) == np.array_equal(pred, target)


@settings(max_examples=50, deadline=None)
@given(st.lists(arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e6, 1e6)), min_size=1, max_size=4),
       st.floats(1e-6, 10.0))
def test_clipped_norm_never_exceeds_limit(grads, limit):
    before = global_norm(grads)
    grads = [g.copy() for g in grads]
    assert clip_gradients(grads, limit) == before
    assert global_norm(grads) <= limit + 1e-12


def test_adam_update_bound_under_tiny_clip():
    rng = np.random.default_rng(0)
    params = [T.parameter(rng.standard_normal(5)), T.parameter(rng.standard_normal((3, 2)))]
    before = [p.data.copy() for p in params]
    grads = [rng.standard_normal(p.shape) * 100 for p in params]
    clip_gradients(grads, 1e-9)
    opt = Adam(params, lr=1e-3)
    opt.step(grads)
    step = np.sqrt(sum(np.sum((p.data - b) ** 2) for p, b in zip(params, before)))
    # first Adam step: |Δw| ≤ lr · ‖g‖ / ε with ‖g‖ ≤ 1e-9
    assert step <= 1e-3 * (1e-9 / opt.eps) * (1 + 1e-12)


def test_adam_first_step_matches_hand_formula():
    p = T.parameter([1.0, -2.0])
    opt = Adam([p], lr=0.1)
    opt.step([np.array([0.5, -4.0])])
    assert np.allclose(p.data, [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 4.0 / (4.0 + 1e-8)], rtol=0, atol=1e-15)


def test_zero_learning_rate_keeps_weights():
    m = IstftModel(SMALL, seed=1)
    before = {k: v.data.copy() for k, v in m.weights().items()}
    train(m, random_batch(SMALL, 6), TrainConfig(lr=0.0, epochs=1, batch_size=4))
    assert all(np.array_equal(before[k], v.data) for k, v in m.weights().items())


def _run(seed, **kw):
    m = IstftModel(SMALL, seed=0)
    data, val = random_batch(SMALL, 12, seed=1), random_batch(SMALL, 4, seed=2)
    log = io.StringIO()
    _, reports = train(m, data, TrainConfig(epochs=4, batch_size=5, lr=1e-2, seed=seed, **kw), val, log)
    return m, reports, log.getvalue()


def test_training_is_deterministic_and_logged():
    m1, r1, log1 = _run(3)
    m2, r2, log2 = _run(3)
    assert [(r.train_loss, r.val_loss) for r in r1] == [(r.train_loss, r.val_loss) for r in r2]
    assert all(np.array_equal(a.data, b.data) for a, b in zip(m1.parameters(), m2.parameters()))
    lines = log1.strip().split("\n")
    assert lines[0] == LOG_HEADER and len(lines) == 5
    assert [ln.split(",")[:3] for ln in lines[1:]] == [ln.split(",")[:3] for ln in log2.strip().split("\n")[1:]]
    _, r3, _ = _run(4)
    assert [r.train_loss for r in r3] != [r.train_loss for r in r1]


def test_dropout_run_is_deterministic():
    cfg = ModelConfig(d_model=8, n_heads=2, dropout=0.2, n_o=1, n_I=1, p=1, n_k=2, n_tau=2)
    out = []
    for _ in range(2):
        m = IstftModel(cfg, seed=0)
        train(m, random_batch(cfg, 8, seed=1), TrainConfig(epochs=2, batch_size=3, seed=5))
        out.append(m.predict(random_batch(cfg, 2, seed=9)))
    assert np.array_equal(out[0], out[1])


def test_best_validation_weights_are_retained():
    data, val = random_batch(SMALL, 16, seed=1), random_batch(SMALL, 6, seed=2)
    m = IstftModel(SMALL, seed=0)
    _, reports = train(m, data, TrainConfig(epochs=25, batch_size=4, lr=2e-2), val)
    vals = [r.val_loss for r in reports]
    assert vals.index(min(vals)) != len(vals) - 1  # noisy random targets: the last epoch is not best
    assert batch_loss(m, val, "mae") == min(vals)


def test_early_stopping_rule():
    data, val = random_batch(SMALL, 16, seed=1), random_batch(SMALL, 6, seed=2)
    _, reports = train(IstftModel(SMALL, seed=0), data,
                       TrainConfig(epochs=200, batch_size=4, lr=2e-2, patience=3), val)
    vals = [r.val_loss for r in reports]
    assert len(vals) < 200
    stale, best = [], np.inf
    for v in vals:
        stale.append(0 if v < best else stale[-1] + 1)
        best = min(best, v)
    # stops at the first epoch that completes three stale epochs
    assert stale[-1] == 3 and max(stale[:-1]) < 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    m = IstftModel(SMALL, seed=0)
    m.head.weight.data[:] = np.inf
    with pytest.raises(NumericError, match="epoch 1"):
        train(m, random_batch(SMALL, 4), TrainConfig(epochs=1))


def test_bad_configs_and_empty_data():
    for kw in (dict(loss="huber"), dict(lr=-1.0), dict(batch_size=0), dict(epochs=0),
               dict(clip=0.0), dict(patience=5, epochs=3)):
        with pytest.raises(ValueError):
            TrainConfig(**kw)
    empty = random_batch(SMALL, 1).take(slice(0, 0))
    assert isinstance(empty, Batch)
    with pytest.raises(ValueError):
        train(IstftModel(SMALL), empty, TrainConfig(epochs=1))
