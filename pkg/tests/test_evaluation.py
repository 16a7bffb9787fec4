import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from istft import evaluation as E
from istft.attention import build_block_mask
from istft.data import Window
from istft.gradcheck import random_batch
from istft.model import IstftModel, ModelConfig

from oracles import eq10


def make_window(Y, n_k, group_id=1, start=0):
    Y = np.asarray(Y, dtype=float)
    n_t = Y.shape[0]
    return Window(group_id, start, n_k, np.arange(n_t) * 0.1, np.zeros((n_t, 0)), np.zeros(0), Y,
                  np.arange(n_t * Y.shape[1]))


def test_error_measure_branches():
    eps, mode = E.error_measure(np.full(6, 0.6), np.full(6, 0.5), n_k=1)
    assert mode == "absolute" and abs(eps - 0.1) < 1e-15
    eps, mode = E.error_measure(np.full(6, 2.2), np.full(6, 2.0), n_k=1)
    assert mode == "relative" and abs(eps - 0.1) < 1e-15


def test_branch_boundary_goes_to_absolute():
    eps, mode = E.error_measure(np.full(4, 1.5), np.ones(4), n_k=1)
    assert mode == "absolute" and eps == 0.5


def test_sum_runs_from_n_k_and_divides_by_n_t():
    ref = np.array([100.0, 0.5, 0.5, 0.5])
    pred = np.array([-100.0, 0.6, 0.6, 0.6])
    eps, mode = E.error_measure(pred, ref, n_k=2)
    assert mode == "absolute" and abs(eps - 0.3 / 4) < 1e-15


def test_zero_reference_in_relative_branch_is_guarded():
    eps, mode = E.error_measure(np.array([5.0, 1.0]), np.array([5.0, 0.0]), n_k=1)
    assert mode == "relative" and eps == 1.0 / 1e-12 / 2
    assert E.error_measure(np.array([5.0, 0.0]), np.array([5.0, 0.0]), n_k=1)[0] == 0.0


series = st.integers(2, 30).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(-50, 50)), arrays(np.float64, n, elements=st.floats(-50, 50)),
    st.integers(1, n)))


@settings(max_examples=200, deadline=None)
@given(series)
def test_error_measure_matches_direct_loops(case):
    pred, ref, n_k = case
    eps, mode = E.error_measure(pred, ref, n_k)
    want, want_mode = eq10(pred, ref, n_k, ref.size)
    assert mode == want_mode
    assert abs(eps - want) <= 1e-14 * max(1.0, want)
    assert eps >= 0.0


def test_error_measure_errors():
    with pytest.raises(ValueError):
        E.error_measure(np.zeros(3), np.zeros(4), 1)
    with pytest.raises(ValueError):
        E.error_measure(np.zeros(3), np.zeros(3), 0)


def test_evaluate_windows_uses_observed_past():
    Y = np.array([[3.0, 0.1], [3.0, 0.2], [6.0, 0.3]])
    w = make_window(Y, n_k=1, group_id=7, start=4)
    reps = E.evaluate_windows([w], np.array([[[3.0, 0.2], [3.0, 0.5]]]))
    assert [(r.group_id, r.output_id, r.start, r.mode) for r in reps] == [(7, 1, 4, "relative"), (7, 2, 4, "absolute")]
    assert abs(reps[0].epsilon - (0 + 0 + 0.5) / 3) < 1e-15
    assert abs(reps[1].epsilon - 0.2 / 3) < 1e-15
    perfect = E.evaluate_windows([w], Y[None, 1:])
    assert all(r.epsilon == 0.0 for r in perfect)


def test_persistence_repeats_last_observation():
    Y = np.arange(10.0).reshape(5, 2)
    p = E.persistence([make_window(Y, n_k=2)])
    assert p.shape == (1, 3, 2)
    assert np.all(p[0] == Y[1])


def test_aggregate():
    r = E.ErrorReport(1, 1, 0, "absolute", 0.2)
    s = E.aggregate([r])
    assert s.mean.tolist() == [0.2] and s.fraction_below.tolist() == [0.0]
    reps = [E.ErrorReport(g, k, 0, "absolute", 0.04) for g in range(5) for k in (1, 2)]
    s = E.aggregate(reps + [E.ErrorReport(9, 2, 0, "relative", 0.5)])
    assert s.output_ids.tolist() == [1, 2]
    assert s.fraction_below.tolist() == [1.0, 5 / 6]
    assert np.allclose(s.mean, [0.04, (0.2 + 0.5) / 6], rtol=1e-15)
    with pytest.raises(ValueError):
        E.aggregate([])


def test_error_csv_round_trip(tmp_path):
    reps = [E.ErrorReport(3, 1, 0, "relative", 0.1 + 1e-17), E.ErrorReport(3, 2, 0, "absolute", 1 / 3)]
    E.write_errors(reps, tmp_path / "e.csv")
    text = (tmp_path / "e.csv").read_text()
    assert text.splitlines()[0] == "group_id,output_id,mode,epsilon"
    back = E.read_errors(tmp_path / "e.csv")
    assert [(r.group_id, r.output_id, r.mode, r.epsilon) for r in back] == \
        [(r.group_id, r.output_id, r.mode, r.epsilon) for r in reps]


def _model(n_o=3, n_k=1, n_tau=2, **kw):
    cfg = ModelConfig(d_model=8, n_heads=2, n_o=n_o, n_k=n_k, n_tau=n_tau, **kw)
    return IstftModel(cfg, seed=1), random_batch(cfg, 3, seed=2)


def test_attention_export_pattern(tmp_path):
    m, b = _model()
    rec = E.export_attention(m, b, tmp_path / "a.csv", index=1)
    labels, mat = E.read_attention(tmp_path / "a.csv")
    assert labels[:4] == ["t1_o1", "t1_o2", "t1_o3", "t2_o1"] and len(labels) == 9
    assert np.count_nonzero(mat) == 54
    assert np.array_equal(mat != 0, build_block_mask(3, 3).allowed)
    assert np.allclose(mat.sum(axis=1), 1.0, atol=1e-14)
    assert np.array_equal(mat, rec.matrix)


def test_attention_export_uniform_with_zero_query_key(tmp_path):
    m, b = _model()
    for w in m.attention.W_Q + m.attention.W_K:
        w.data[:] = 0.0
    rec = E.export_attention(m, b, tmp_path / "a.csv", crop=6)
    allowed = build_block_mask(3, 3).allowed
    want = (allowed / allowed.sum(axis=1, keepdims=True))[:6, :6]
    assert rec.matrix.shape == (6, 6) and rec.labels == E.position_labels(3, 3)[:6]
    assert np.allclose(rec.matrix, want, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        rec.crop(7)


def test_lorenz_like_importance_is_one(tmp_path):
    m, b = _model(n_o=3, n_I=0, p=0)
    rec = E.export_importance(m, b, tmp_path / "i.csv")
    assert rec.past.shape == (3, 1) and np.all(rec.past == 1.0)
    assert np.all(rec.future == 1.0)
    lines = (tmp_path / "i.csv").read_text().splitlines()
    assert lines[0] == "group,variable,weight"
    assert lines[1:3] == ["past_o1,y,1", "future_o1,placeholder,1"]


@pytest.mark.parametrize("n_I, p", [(1, 2), (3, 1), (2, 0)])
def test_importance_groups_sum_to_one(n_I, p):
    m, b = _model(n_o=2, n_I=n_I, p=p, n_k=2)
    for t in m.parameters():
        t.data = t.data + 0.3 * np.random.default_rng(0).standard_normal(t.shape)
    rec = E.importance(m, b, chunk=2)
    if p:
        assert abs(rec.parameters.sum() - 1.0) < 1e-10 and rec.parameter_names == [f"mu_{i + 1}" for i in range(p)]
    assert np.allclose(rec.past.sum(axis=1), 1.0, atol=1e-10)
    assert np.allclose(rec.future.sum(axis=1), 1.0, atol=1e-10)
    assert rec.past_names[-1] == "y" and len(rec.past_names) == n_I + 1
    groups = {g for g, _, _ in rec.rows()}
    assert groups == ({"static"} if p else set()) | {"past_o1", "past_o2", "future_o1", "future_o2"}
