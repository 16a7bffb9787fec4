"""Command-line entry point: ``istft <command> [options]``.

Settings come from an optional INI-style config file with ``[system]``,
``[data]``, ``[model]`` and ``[train]`` sections of ``key = value`` lines
(keys use underscores, e.g. ``d_model``); command-line flags win over the
file. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric failure, 5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluation as E
from .dynamics import ConfigError, FhnConfig, GenerationError, Lorenz63Config, fhn_generate, lorenz_generate
from .gradcheck import check_model, check_ops
from .model import Batch, IstftModel, ModelConfig, ModelFileError, load, save
from .tensor import ShapeError
from .training import NumericError, TrainConfig, train

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 2, 3, 4, 5
EVAL_WINDOWS = 2  # default windows per group at prediction time: first and last

# key -> (section, type, default)
SETTINGS = {
    "n_p": ("system", int, None),
    "n_T": ("system", int, None),
    "dt": ("system", float, 0.01),
    "n_x": ("system", int, 512),
    "substeps": ("system", int, 10),
    "eps_min": ("system", float, 0.01),
    "eps_max": ("system", float, 0.04),
    "c_min": ("system", float, 0.025),
    "c_max": ("system", float, 0.075),
    "n_train": ("data", int, None),
    "n_val": ("data", int, 0),
    "n_test": ("data", int, 0),
    "n_k": ("data", int, 1),
    "n_tau": ("data", int, None),
    "n_omega": ("data", int, 1),
    "normalize": ("data", str, "yes"),
    "d_model": ("model", int, 16),
    "heads": ("model", int, 1),
    "dropout": ("model", float, 0.0),
    "loss": ("train", str, "mae"),
    "lr": ("train", float, 1e-3),
    "batch": ("train", int, 64),
    "epochs": ("train", int, 100),
    "patience": ("train", int, None),
    "clip": ("train", float, 1.0),
    "seed": ("train", int, 0),
}


class CliConfigError(ValueError):
    pass


class Settings:
    """Flag value, else config-file value, else default."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file = configparser.ConfigParser(interpolation=None)
        self.file.optionxform = str
        path = getattr(args, "config", None)
        if path:
            if not Path(path).is_file():
                raise CliConfigError(f"config file {path} not found")
            try:
                self.file.read(path)
            except configparser.Error as e:
                raise CliConfigError(f"{path}: {e}") from None
            for section in self.file.sections():
                for key in self.file[section]:
                    if key not in SETTINGS or SETTINGS[key][0] != section and key != "seed":
                        raise CliConfigError(f"{path}: unknown key {key!r} in [{section}]")

    def get(self, key: str, default=...):
        section, typ, fallback = SETTINGS[key]
        value = getattr(self.args, key, None)
        if value is not None:
            return value
        for sec in (section, "system", "data", "model", "train") if key == "seed" else (section,):
            if self.file.has_option(sec, key):
                raw = self.file.get(sec, key)
                try:
                    return typ(raw)
                except ValueError:
                    raise CliConfigError(f"[{sec}] {key} = {raw!r} is not a valid {typ.__name__}") from None
        return fallback if default is ... else default

    def require(self, key: str):
        v = self.get(key)
        if v is None:
            raise CliConfigError(f"missing setting {key} (flag --{key.replace('_', '-')} or config)")
        return v


# ------------------------------------------------------------------ helpers


def _read_data(path) -> D.ReshapedDataset:
    if not Path(path).is_file():
        raise D.DataError(f"data file {path} not found")
    return D.read_csv(path)


def _normalised_windows(d: D.ReshapedDataset, stats: D.NormStats, spec: D.WindowSpec):
    return D.window(D.normalize(d, stats), spec)


def _group_selection(arg: str | None, d: D.ReshapedDataset, extra: dict) -> list[int]:
    present = d.group_ids()
    if arg in (None, "test"):
        test = [g for g in extra.get("split", {}).get("test", []) if g in present]
        return test or present
    if arg == "all":
        return present
    try:
        ids = [int(x) for x in arg.split(",")]
    except ValueError:
        raise CliConfigError(f"--groups expects 'test', 'all' or comma-separated ids, got {arg!r}") from None
    missing = set(ids) - set(present)
    if missing:
        raise D.DataError(f"groups {sorted(missing)} are not in the data file")
    return ids


def _model_inputs(model_path, data_path, groups: str | None, n_omega: int | None):
    model, stats, extra = load(model_path)
    d = _read_data(data_path)
    c = model.cfg
    if (d.n_o, d.n_I, d.p) != (c.n_o, c.n_I, c.p):
        raise D.DataError(f"data has (n_o, n_I, p) = {(d.n_o, d.n_I, d.p)}, "
                          f"model expects {(c.n_o, c.n_I, c.p)}")
    stats = stats or D.NormStats.identity(c.n_I, c.p, c.n_o)
    ids = _group_selection(groups, d, extra)
    sub = D.subset(d, ids)
    omega = n_omega or min(EVAL_WINDOWS, sub.n_T - c.n_t + 1)
    windows = D.window(sub, D.WindowSpec(c.n_k, c.n_tau, omega))
    norm = _normalised_windows(sub, stats, D.WindowSpec(c.n_k, c.n_tau, omega))
    return model, stats, windows, Batch.from_windows(norm)


def predict_windows(model: IstftModel, stats: D.NormStats, batch: Batch, chunk: int = 256) -> np.ndarray:
    preds = [model.predict(batch.take(slice(s, s + chunk))) for s in range(0, len(batch), chunk)]
    return D.denormalize_outputs(np.concatenate(preds), stats)


PRED_HEADER = ["group_id", "start", "n_k", "time", "output_id", "y"]


def write_predictions(windows, preds: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(PRED_HEADER)
        for w, p in zip(windows, preds):
            for i, t in enumerate(w.times[w.n_k:]):
                for k in range(p.shape[1]):
                    wr.writerow([w.group_id, w.start, w.n_k, D.fmt(t), k + 1, D.fmt(p[i, k])])


def read_predictions(path, d: D.ReshapedDataset):
    """Rebuild ``(windows, preds)`` from a predictions file and its data set."""
    if not Path(path).is_file():
        raise D.DataError(f"predictions file {path} not found")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != PRED_HEADER:
        raise D.DataError(f"{path}: expected header {','.join(PRED_HEADER)}")
    blocks: dict[tuple[int, int, int], list] = {}
    for r in rows[1:]:
        g, s, nk, t, k, y = r
        blocks.setdefault((int(g), int(s), int(nk)), []).append((float(t), int(k), float(y)))
    windows, preds = [], []
    for (g, s, nk), vals in blocks.items():
        n_o = d.n_o
        if len(vals) % n_o:
            raise D.DataError(f"{path}: window ({g}, {s}) has a partial output bundle")
        n_tau = len(vals) // n_o
        w = D.window(D.subset(d, [g]), D.WindowSpec(nk, n_tau, starts=(s,)))[0]
        times = np.array([v[0] for v in vals[::n_o]])
        if not np.array_equal(times, w.times[nk:]):
            raise D.DataError(f"{path}: times of window ({g}, {s}) do not match the data")
        windows.append(w)
        preds.append(np.array([v[2] for v in vals]).reshape(n_tau, n_o))
    return windows, np.array(preds)


# ----------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    s = Settings(args)
    seed = s.get("seed")
    if args.system == "lorenz63":
        cfg = Lorenz63Config(n_p=s.get("n_p", 4), n_T=s.get("n_T", 64), dt=s.get("dt"), seed=seed)
        raw = lorenz_generate(cfg)
    else:
        cfg = FhnConfig(n_p=s.get("n_p", 126), n_T=s.get("n_T", 500), n_x=s.get("n_x"),
                        substeps=s.get("substeps"),
                        eps_range=(s.get("eps_min"), s.get("eps_max")),
                        c_range=(s.get("c_min"), s.get("c_max")), seed=seed)
        raw = fhn_generate(cfg)
    if args.raw:
        D.write_raw_csv(raw, args.out)
    else:
        D.write_csv(D.reshape(raw), args.out)
    print(f"wrote {raw.n_p} groups x {raw.n_T} instants x {raw.n_o} outputs to {args.out}")
    return 0


def cmd_reshape(args) -> int:
    if not Path(args.input).is_file():
        raise D.DataError(f"input file {args.input} not found")
    if args.inverse:
        D.write_raw_csv(D.unreshape(D.read_csv(args.input)), args.out)
    else:
        D.write_csv(D.reshape(D.read_raw_csv(args.input)), args.out)
    return 0


def cmd_train(args) -> int:
    s = Settings(args)
    seed = s.get("seed")
    d = _read_data(args.data)
    n_p = d.n_p
    n_train = s.get("n_train")
    split = D.SplitSpec(n_train if n_train is not None else n_p - s.get("n_val") - s.get("n_test"),
                        s.get("n_val"), s.get("n_test"))
    train_ids, val_ids, test_ids = D.split_ids(d.group_ids(), split, seed)
    if not train_ids:
        raise D.DataError("the split leaves no training groups")
    train_d = D.subset(d, train_ids)
    stats = (D.compute_stats(train_d) if s.get("normalize").lower() in ("yes", "true", "1")
             else D.NormStats.identity(d.n_I, d.p, d.n_o))
    n_k = s.get("n_k")
    n_tau = s.get("n_tau", d.n_T - n_k)
    spec = D.WindowSpec(n_k, n_tau, s.get("n_omega"))
    train_b = Batch.from_windows(_normalised_windows(train_d, stats, spec))
    val_b = None
    if val_ids:
        val_spec = D.WindowSpec(n_k, n_tau, min(EVAL_WINDOWS, d.n_T - spec.n_t + 1))
        val_b = Batch.from_windows(_normalised_windows(D.subset(d, val_ids), stats, val_spec))
    mcfg = ModelConfig(d_model=s.get("d_model"), n_heads=s.get("heads"), dropout=s.get("dropout"),
                       n_o=d.n_o, n_I=d.n_I, p=d.p, n_k=n_k, n_tau=n_tau)
    tcfg = TrainConfig(loss=s.get("loss"), lr=s.get("lr"), batch_size=s.get("batch"),
                       epochs=s.get("epochs"), patience=s.get("patience"), clip=s.get("clip"), seed=seed)
    model = IstftModel(mcfg, seed=seed)
    log_path = args.log or str(Path(args.out).with_suffix(".log.csv"))
    with open(log_path, "w") as log:
        model, reports = train(model, train_b, tcfg, val=val_b, log=log)
    extra = {"split": {"train": train_ids, "val": val_ids, "test": test_ids},
             "window": {"n_k": n_k, "n_tau": n_tau, "n_omega": spec.n_omega},
             "train": {"loss": tcfg.loss, "lr": tcfg.lr, "batch": tcfg.batch_size,
                       "epochs": tcfg.epochs, "clip": tcfg.clip, "seed": seed},
             "epochs_run": len(reports)}
    save(model, args.out, stats, extra)
    last = reports[-1]
    val = "" if last.val_loss is None else f" val_loss={last.val_loss:.6g}"
    print(f"trained {len(reports)} epochs: train_loss={last.train_loss:.6g}{val}; model -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    model, stats, windows, batch = _model_inputs(args.model, args.data, args.groups, args.n_omega)
    preds = predict_windows(model, stats, batch)
    write_predictions(windows, preds, args.out)
    print(f"wrote {len(windows)} windows x {model.cfg.n_tau} steps x {model.cfg.n_o} outputs to {args.out}")
    return 0


def _print_summary(label: str, reports) -> None:
    summ = E.aggregate(reports)
    for k, m, b, n in zip(summ.output_ids, summ.mean, summ.below, summ.cases):
        print(f"{label} output {k}: mean_eps={m:.6g} below_{summ.threshold:g}={b}/{n}")


def cmd_evaluate(args) -> int:
    d = _read_data(args.data)
    windows, preds = read_predictions(args.predictions, d)
    reports = E.evaluate_windows(windows, preds)
    E.write_errors(reports, args.out)
    _print_summary("model", reports)
    if args.baseline:
        _print_summary("persistence", E.evaluate_windows(windows, E.persistence(windows)))
    return 0


def _single_group(args, extra_groups: str | None) -> str:
    return str(args.group) if args.group is not None else extra_groups


def cmd_export_attention(args) -> int:
    model, _, windows, batch = _model_inputs(args.model, args.data, _single_group(args, None),
                                             args.n_omega)
    idx = args.window
    if not 0 <= idx < len(windows):
        raise CliConfigError(f"--window {idx} outside [0, {len(windows) - 1}]")
    rec = E.export_attention(model, batch, args.out, index=idx, crop=args.crop,
                             group_id=windows[idx].group_id)
    print(f"attention of group {rec.group_id}, window start {windows[idx].start} -> {args.out}")
    return 0


def cmd_export_importance(args) -> int:
    model, _, windows, batch = _model_inputs(args.model, args.data, _single_group(args, None),
                                             args.n_omega)
    gid = windows[0].group_id
    keep = [i for i, w in enumerate(windows) if w.group_id == gid]
    E.export_importance(model, batch.take(keep), args.out)
    print(f"variable importance of group {gid} over {len(keep)} windows -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed or 0
    results = check_ops(seed) + [check_model(seed=seed)]
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:16s} rel_error={r.rel_error:.3e} tol={r.tol:g}")
    return 0 if all(r.ok for r in results) else EXIT_GRADCHECK


# ------------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--config", help="INI-style settings file")
    p.add_argument("--seed", type=int)
    if out:
        p.add_argument("--out", required=True, help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="istft", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a benchmark system to CSV")
    p.add_argument("system", choices=["lorenz63", "fhn"])
    _common(p)
    p.add_argument("--n-p", dest="n_p", type=int)
    p.add_argument("--n-T", dest="n_T", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--n-x", dest="n_x", type=int)
    p.add_argument("--substeps", type=int)
    for k in ("eps_min", "eps_max", "c_min", "c_max"):
        p.add_argument("--" + k.replace("_", "-"), dest=k, type=float)
    p.add_argument("--raw", action="store_true", help="write the one-row-per-instant layout")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("reshape", help="convert raw CSV to the stacked-output layout")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--inverse", action="store_true", help="stacked -> raw instead")
    p.set_defaults(func=cmd_reshape)

    p = sub.add_parser("train", help="fit a model to a stacked-output CSV")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--log", help="loss log CSV (default: <out>.log.csv)")
    for flag, typ in [("n-train", int), ("n-val", int), ("n-test", int), ("n-k", int),
                      ("n-tau", int), ("n-omega", int), ("d-model", int), ("heads", int),
                      ("dropout", float), ("lr", float), ("batch", int), ("epochs", int),
                      ("patience", int), ("clip", float)]:
        p.add_argument("--" + flag, dest=flag.replace("-", "_"), type=typ)
    p.add_argument("--loss", choices=["mae", "mse"])
    p.add_argument("--normalize", choices=["yes", "no"])
    p.set_defaults(func=cmd_train)

    def model_cmd(name, help_, func, group_help):
        q = sub.add_parser(name, help=help_)
        _common(q)
        q.add_argument("--model", required=True)
        q.add_argument("--data", required=True)
        q.add_argument("--n-omega", dest="n_omega", type=int,
                       help=f"windows per group (default {EVAL_WINDOWS}: first and last)")
        q.set_defaults(func=func)
        return q

    p = model_cmd("predict", "forecast held-out windows", cmd_predict, None)
    p.add_argument("--groups", help="'test' (default), 'all' or comma-separated ids")

    p = sub.add_parser("evaluate", help="error measure of a predictions file")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--baseline", action="store_true", help="also report the persistence baseline")
    p.set_defaults(func=cmd_evaluate)

    p = model_cmd("export-attention", "write the averaged attention matrix", cmd_export_attention, None)
    p.add_argument("--group", type=int, help="group id (default: first test group)")
    p.add_argument("--window", type=int, default=0, help="window index within the selection")
    p.add_argument("--crop", type=int, help="keep the top-left N x N block")

    p = model_cmd("export-importance", "write variable-selection weights", cmd_export_importance, None)
    p.add_argument("--group", type=int, help="group id (default: first test group)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and a toy model")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NumericError, GenerationError) as e:
        code, msg = EXIT_NUMERIC, e
    except (D.DataError, ModelFileError, ShapeError, OSError) as e:
        code, msg = EXIT_DATA, e
    except (ConfigError, CliConfigError, ValueError) as e:
        code, msg = EXIT_CONFIG, e
    print(f"istft {args.command}: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
