"""Batch entry point: ``stretnet {synth,train,eval,predict}``.

Any flag may also come from a flat ``key=value`` file given with
``--config``; explicit command-line flags win. Every command writes the
fully resolved flags to ``<out>/config.txt``, which can be fed back through
``--config`` to replay the run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .data import DataError, load_flow, prepare, save_flow, split_3_1_1, make_windows, synthetic_series
from .evaluate import DEFAULT_MAPE_FLOOR, ha_forecast, horizon_report
from .graph import DEFAULT_EMBED_WIDTH, DEFAULT_KAPPA, RoadGraph, read_distances, write_distances
from .model import ModelConfig, STRetNet
from .numerics import ConfigError, DimensionError, NumericError
from .train import FormatError, TrainConfig, load_checkpoint, predict, save_checkpoint, train_loop

log = logging.getLogger("stretnet")

_ERRORS = (DataError, ConfigError, DimensionError, FormatError, NumericError, OSError)


def _common(p, out_required=True):
    p.add_argument("--config", help="flat key=value file supplying defaults for any flag")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p):
    p.add_argument("--p", type=int, default=12, help="history length")
    p.add_argument("--q", type=int, default=12, help="forecast horizon")
    p.add_argument("--fd", type=int, default=64, help="feature width")
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--s-layers", type=int, default=1)
    p.add_argument("--t-layers", type=int, default=1)
    p.add_argument("--embed-width", type=int, default=DEFAULT_EMBED_WIDTH)
    p.add_argument("--ffn-width", type=int, default=None)
    p.add_argument("--no-sblock", action="store_true")
    p.add_argument("--no-tblock", action="store_true")
    p.add_argument("--no-gcn", action="store_true")


def _data_flags(p, distances=True):
    p.add_argument("--data", help="flow file (text matrix, raw binary, or npz)")
    if distances:
        p.add_argument("--distances", help="from,to,cost distance file")
        p.add_argument("--sigma", type=float, default=None, help="distance kernel width (default: std of costs)")
        p.add_argument("--kappa", type=float, default=DEFAULT_KAPPA)
    p.add_argument("--impute", action="store_true", help="forward-fill NaN readings instead of rejecting")
    p.add_argument("--split-order", choices=("train,val,test", "train,test,val"), default="train,val,test")


def build_parser():
    parser = argparse.ArgumentParser(prog="stretnet", description="Spatial-temporal retention traffic forecaster")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic flow + distance dataset")
    _common(s)
    s.add_argument("--kind", choices=("sine", "diffusion", "constant"), default="sine")
    s.add_argument("--nodes", type=int, default=8)
    s.add_argument("--steps", type=int, default=2016)
    s.add_argument("--format", choices=("text", "bin"), default="text")

    t = sub.add_parser("train", help="train a model and keep the best checkpoint")
    _common(t)
    _data_flags(t)
    _model_flags(t)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--patience", type=int, default=15)
    t.add_argument("--rho", type=float, default=0.99)
    t.add_argument("--eps", type=float, default=1e-8)
    t.add_argument("--clip-norm", type=float, default=None)

    e = sub.add_parser("eval", help="horizon metrics on the test split")
    _common(e)
    _data_flags(e, distances=False)
    e.add_argument("--checkpoint")
    e.add_argument("--baseline", choices=("ha",), default=None)
    e.add_argument("--p", type=int, default=12, help="history length (baseline only)")
    e.add_argument("--q", type=int, default=12, help="forecast horizon (baseline only)")
    e.add_argument("--mape-floor", type=float, default=DEFAULT_MAPE_FLOOR)

    pr = sub.add_parser("predict", help="forecast from one input window")
    _common(pr)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--window", required=True, help="text matrix, rows = time steps, columns = sensors")
    return parser


def _parse_bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def read_config(path):
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    sub = _subparser(parser, args.command)
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in read_config(args.config).items():
        if key in ("command", "config"):
            continue
        action = actions.get(key)
        if action is None:
            raise ConfigError(f"{args.config}: unknown key {key!r} for command {args.command}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = _parse_bool(raw)
        elif raw == "":
            defaults[key] = None
        else:
            defaults[key] = action.type(raw) if action.type else raw
    # the config only supplies defaults: re-parse so explicit flags still win,
    # and so required flags may come from the file
    for a in sub._actions:
        if a.dest in defaults:
            a.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def write_resolved(args, out):
    lines = [f"command={args.command}"]
    for key in sorted(vars(args)):
        if key in ("command", "config", "verbose"):
            continue
        value = getattr(args, key)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key.replace('_', '-')}={'' if value is None else value}")
    (out / "config.txt").write_text("\n".join(lines) + "\n")


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise ConfigError("missing required flag(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _split_order(args):
    return tuple(args.split_order.split(","))


def model_config(args, n_nodes):
    return ModelConfig(
        n_nodes=n_nodes, p=args.p, q=args.q, fd=args.fd, heads=args.heads, s_layers=args.s_layers,
        t_layers=args.t_layers, blocks=args.blocks, embed_width=args.embed_width, ffn_width=args.ffn_width,
        disable_s_block=args.no_sblock, disable_t_block=args.no_tblock, disable_gcn=args.no_gcn,
    )


def train_config(args):
    return TrainConfig(batch_size=args.batch, learning_rate=args.lr, max_epochs=args.epochs,
                       patience=args.patience, rho=args.rho, eps=args.eps, seed=args.seed,
                       clip_norm=args.clip_norm)


def cmd_synth(args, out):
    series, distances = synthetic_series(args.nodes, args.steps, args.seed, args.kind)
    name = "flow.bin" if args.format == "bin" else "flow.csv"
    save_flow(out / name, series, args.format)
    write_distances(out / "distances.csv", distances)
    print(f"wrote {out / name} ({series.n_steps} steps x {series.n_nodes} sensors) and {out / 'distances.csv'}")


def cmd_train(args, out):
    _require(args, "data", "distances")
    series = load_flow(args.data, impute=args.impute)
    # validate configuration before touching the data pipeline
    mcfg = model_config(args, series.n_nodes)
    tcfg = train_config(args)
    graph = RoadGraph.from_distances(read_distances(args.distances), series.n_nodes, args.sigma, args.kappa)
    train, val, _ = prepare(series, mcfg.p, mcfg.q, order=_split_order(args))
    model = STRetNet(mcfg, graph, seed=args.seed)
    log.info("training %d parameters on %d/%d train/val windows", model.parameter_count(), len(train), len(val))
    result = train_loop(model, train, val, tcfg)
    save_checkpoint(model, out / "checkpoint.bin", train.normalizer)
    (out / "history.tsv").write_text(result.history_table())
    print(f"best epoch {result.best_epoch}: val L1 {result.best_val:.4f}; "
          f"{len(result.history)} epochs{' (early stop)' if result.stopped_early else ''}")
    if result.diverged:
        raise NumericError("training diverged; best checkpoint retained")


def cmd_eval(args, out):
    _require(args, "data")
    if (args.checkpoint is None) == (args.baseline is None):
        raise ConfigError("give exactly one of --checkpoint or --baseline")
    series = load_flow(args.data, impute=args.impute)
    if args.baseline == "ha":
        windows = make_windows(series, args.p, args.q)
        _, _, test = split_3_1_1(windows, order=_split_order(args))
        pred, name = ha_forecast(test.inputs, args.q), "HA"
    else:
        model, norm = load_checkpoint(args.checkpoint)
        if model.cfg.n_nodes != series.n_nodes:
            raise ConfigError(f"checkpoint expects {model.cfg.n_nodes} sensors, data has {series.n_nodes}")
        if norm is None:
            raise FormatError("checkpoint carries no normalizer")
        windows = make_windows(series, model.cfg.p, model.cfg.q)
        _, _, test = split_3_1_1(windows, order=_split_order(args))
        pred, name = predict(model, test.inputs, norm), "ST-RetNet"
    report = horizon_report(pred, test.targets, name, args.mape_floor)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    for label, row in report.horizons.items():
        mape_txt = "n/a" if row["mape"] is None else f"{row['mape']:.2f}"
        print(f"{label:>6}  MAE {row['mae']:.3f}  MAPE {mape_txt}  RMSE {row['rmse']:.3f}")
    for note in report.notices:
        print("note:", note)


def cmd_predict(args, out):
    model, norm = load_checkpoint(args.checkpoint)
    if norm is None:
        raise FormatError("checkpoint carries no normalizer")
    values = load_flow(args.window, format="text").values
    p, n = model.cfg.p, model.cfg.n_nodes
    if values.shape[1] != n:
        raise ConfigError(f"window has {values.shape[1]} sensors, checkpoint expects {n}")
    if values.shape[0] < p:
        raise DataError(f"window has {values.shape[0]} steps, model needs p={p}")
    window = values[-p:].T[None, :, :, None]
    forecast = predict(model, window, norm)[0, :, :, 0]  # (N, q)
    np.savetxt(out / "predictions.csv", forecast, delimiter=",", fmt="%.17g")
    print(f"wrote {out / 'predictions.csv'} ({n} sensors x {model.cfg.q} steps)")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict}


def main(argv=None):
    try:
        args = parse_args(argv)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(args, out)
        COMMANDS[args.command](args, out)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
