import shutil
import subprocess
import sys

import numpy as np
import pytest

from istft import cli
from istft import data as D
from istft import evaluation as E
from istft.attention import build_block_mask
from istft.gradcheck import CheckResult
from istft.model import Batch, load

TRAIN = ["--n-train", "4", "--n-val", "1", "--n-test", "1", "--n-k", "1", "--n-tau", "2",
         "--n-omega", "3", "--d-model", "8", "--heads", "2", "--epochs", "3", "--batch", "4", "--seed", "5"]


@pytest.fixture(scope="module")
def lorenz(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    path = root / "lorenz.csv"
    assert cli.main(["generate", "lorenz63", "--n-p", "6", "--n-T", "12", "--seed", "7", "--out", str(path)]) == 0
    model = root / "m.npz"
    assert cli.main(["train", "--data", str(path), "--out", str(model)] + TRAIN) == 0
    return root, path, model


def test_generate_shape_and_determinism(tmp_path):
    for name in ("a.csv", "b.csv"):
        assert cli.main(["generate", "lorenz63", "--n-p", "4", "--n-T", "64", "--seed", "7",
                         "--out", str(tmp_path / name)]) == 0
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert len(lines) == 1 + 4 * 64 * 3
    assert lines[0] == "row_id,group_id,time,output_id,y"
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_generate_fhn_small(tmp_path):
    out = tmp_path / "f.csv"
    assert cli.main(["generate", "fhn", "--n-p", "2", "--n-T", "10", "--n-x", "32", "--out", str(out)]) == 0
    d = D.read_csv(out)
    assert (d.n_p, d.n_T, d.n_o, d.n_I, d.p) == (2, 10, 2, 1, 2)


def test_fhn_parameter_outside_box_is_config_error(tmp_path, capsys):
    code = cli.main(["generate", "fhn", "--n-p", "2", "--eps-min", "0.005", "--out", str(tmp_path / "f.csv")])
    assert code == cli.EXIT_CONFIG
    assert "eps" in capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[system]\nn_p = 2\nn_T = 5\n[train]\nseed = 3\n")
    out = tmp_path / "x.csv"
    assert cli.main(["generate", "lorenz63", "--config", str(cfg), "--out", str(out)]) == 0
    assert D.read_csv(out).n_T == 5
    assert cli.main(["generate", "lorenz63", "--config", str(cfg), "--n-T", "7", "--out", str(out)]) == 0
    assert D.read_csv(out).n_T == 7
    cfg.write_text("[system]\nn_p = 2\nbogus = 1\n")
    assert cli.main(["generate", "lorenz63", "--config", str(cfg), "--out", str(out)]) == cli.EXIT_CONFIG
    assert cli.main(["generate", "lorenz63", "--config", str(tmp_path / "none.ini"), "--out", str(out)]) \
        == cli.EXIT_CONFIG


def test_reshape_round_trip(tmp_path):
    raw = tmp_path / "raw.csv"
    assert cli.main(["generate", "lorenz63", "--n-p", "2", "--n-T", "6", "--raw", "--out", str(raw)]) == 0
    assert cli.main(["reshape", "--in", str(raw), "--out", str(tmp_path / "s.csv")]) == 0
    assert cli.main(["reshape", "--inverse", "--in", str(tmp_path / "s.csv"), "--out", str(tmp_path / "r.csv")]) == 0
    assert raw.read_bytes() == (tmp_path / "r.csv").read_bytes()
    assert cli.main(["reshape", "--in", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o.csv")]) == cli.EXIT_DATA


def test_train_writes_model_and_log(lorenz):
    root, _, model = lorenz
    log = (root / "m.log.csv").read_text().splitlines()
    assert log[0] == "epoch,train_loss,val_loss,seconds" and len(log) == 4
    m, stats, extra = load(model)
    assert m.cfg.n_o == 3 and m.cfg.n_tau == 2
    assert len(extra["split"]["test"]) == 1 and stats is not None


def test_train_rerun_and_loss_kinds(lorenz, tmp_path):
    _, data, _ = lorenz
    logs = {}
    for name, loss in (("a", "mae"), ("b", "mae"), ("c", "mse")):
        assert cli.main(["train", "--data", str(data), "--out", str(tmp_path / f"{name}.npz"),
                         "--loss", loss] + TRAIN) == 0
        logs[name] = [ln.split(",")[:3] for ln in (tmp_path / f"{name}.log.csv").read_text().splitlines()[1:]]
    last = lambda k: float(logs[k][-1][1])  # noqa: E731
    assert abs(last("a") - last("b")) <= 1e-12
    assert logs["a"] == logs["b"]
    assert logs["a"] != logs["c"]


def test_train_bad_data(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "m.npz")]
                    + TRAIN) == cli.EXIT_DATA


def test_predict_rows_units_and_library_parity(lorenz, tmp_path):
    root, data, model = lorenz
    out = tmp_path / "p.csv"
    assert cli.main(["predict", "--model", str(model), "--data", str(data), "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    m, stats, extra = load(model)
    n_windows = len(extra["split"]["test"]) * cli.EVAL_WINDOWS
    assert len(rows) - 1 == n_windows * m.cfg.n_tau * m.cfg.n_o
    assert rows[0] == "group_id,start,n_k,time,output_id,y"

    d = D.read_csv(data)
    windows, preds = cli.read_predictions(out, d)
    spec = D.WindowSpec(1, 2, cli.EVAL_WINDOWS)
    sub = D.subset(d, extra["split"]["test"])
    lib = m.predict(Batch.from_windows(D.window(D.normalize(sub, stats), spec)))
    lib = lib * stats.y_std + stats.y_mean  # back to original units
    assert np.max(np.abs(preds - lib)) < 1e-12
    # original units: the Lorenz states sit far outside the normalised range
    assert np.abs(preds).max() > 3.0


def test_evaluate_perfect_predictions_gives_zero(lorenz, tmp_path):
    _, data, model = lorenz
    pred = tmp_path / "p.csv"
    assert cli.main(["predict", "--model", str(model), "--data", str(data), "--groups", "all",
                     "--out", str(pred)]) == 0
    d = D.read_csv(data)
    windows, _ = cli.read_predictions(pred, d)
    cli.write_predictions(windows, np.stack([w.target for w in windows]), pred)
    err = tmp_path / "e.csv"
    assert cli.main(["evaluate", "--data", str(data), "--predictions", str(pred), "--baseline",
                     "--out", str(err)]) == 0
    reps = E.read_errors(err)
    assert len(reps) == 6 * cli.EVAL_WINDOWS * 3
    assert all(r.epsilon == 0.0 for r in reps)


def test_export_attention_matches_block_pattern(lorenz, tmp_path):
    _, data, model = lorenz
    out = tmp_path / "a.csv"
    assert cli.main(["export-attention", "--model", str(model), "--data", str(data), "--group", "2",
                     "--out", str(out)]) == 0
    labels, mat = E.read_attention(out)
    assert len(labels) == 9
    assert np.array_equal(mat != 0, build_block_mask(3, 3).allowed)
    assert np.count_nonzero(mat) == 54
    assert cli.main(["export-attention", "--model", str(model), "--data", str(data), "--window", "9",
                     "--out", str(out)]) == cli.EXIT_CONFIG


def test_export_importance(lorenz, tmp_path):
    _, data, model = lorenz
    out = tmp_path / "i.csv"
    assert cli.main(["export-importance", "--model", str(model), "--data", str(data), "--out", str(out)]) == 0
    rows = [ln.split(",") for ln in out.read_text().splitlines()[1:]]
    assert {(g, v, w) for g, v, w in rows if g.startswith("past")} == {(f"past_o{k}", "y", "1") for k in (1, 2, 3)}


def test_model_data_mismatch_and_corrupt_model(lorenz, tmp_path):
    _, data, model = lorenz
    fhn = tmp_path / "f.csv"
    assert cli.main(["generate", "fhn", "--n-p", "1", "--n-T", "6", "--n-x", "32", "--out", str(fhn)]) == 0
    assert cli.main(["predict", "--model", str(model), "--data", str(fhn), "--out", str(tmp_path / "p.csv")]) \
        == cli.EXIT_DATA
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"garbage")
    assert cli.main(["predict", "--model", str(bad), "--data", str(data), "--out", str(tmp_path / "p.csv")]) \
        == cli.EXIT_DATA


def test_gradcheck_exit_codes(monkeypatch, capsys):
    assert cli.main(["gradcheck"]) == 0
    assert "FAIL" not in capsys.readouterr().out
    monkeypatch.setattr(cli, "check_ops", lambda seed: [CheckResult("matmul", 2e-5, 1e-5)])
    assert cli.main(["gradcheck"]) == cli.EXIT_GRADCHECK
    assert "FAIL matmul" in capsys.readouterr().out


def test_numeric_failure_exit_code(lorenz, tmp_path, monkeypatch):
    _, data, _ = lorenz

    def boom(*a, **k):
        raise cli.NumericError("non-finite loss nan at epoch 1")

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", "--data", str(data), "--out", str(tmp_path / "m.npz")] + TRAIN) == cli.EXIT_NUMERIC


def test_console_script_runs(tmp_path):
    exe = shutil.which("istft")
    cmd = [exe] if exe else [sys.executable, "-m", "istft"]
    res = subprocess.run(cmd + ["generate", "lorenz63", "--n-p", "1", "--n-T", "3", "--out", str(tmp_path / "o.csv")],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert len((tmp_path / "o.csv").read_text().splitlines()) == 10
    res = subprocess.run([sys.executable, "-m", "istft", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "export-attention" in res.stdout
