"""Command-line entry point.

Values resolve as: command-line flags, then the JSON ``--config`` file, then
built-in defaults.  Exit codes: 0 success, 1 runtime or data error (one line
``chargepredict: error: <Type>: <message>`` on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as D
from .explain import (ExplainError, attention_importance, causality_table, correlation_table, emit_report,
                      qicvn_importance)
from .models import MODEL_KINDS, gradcheck_model, load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainingError, evaluate, train, write_history

PROG = "chargepredict"
ALL_KINDS = MODEL_KINDS + ("lstm_attn",)


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog=PROG, description="Charge prediction on booking sequences.", formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        sp.add_argument("--config", default=None, help="JSON file of defaults for this subcommand")
        return sp

    def split_args(sp):
        sp.add_argument("--split-year", type=float, default=18.0, help="start of the test label window (years)")
        sp.add_argument("--window", type=float, default=2.0, help="label window length (years)")

    sp = add("generate", "write seeded synthetic booking histories to CSV")
    sp.add_argument("--n", type=int, default=D.GeneratorConfig.n_suspects, help="number of suspects")
    sp.add_argument("--seed", type=int, default=0, help="random seed")
    sp.add_argument("--out", required=True, help="output CSV path")

    sp = add("train", "train a classifier and write checkpoint plus history CSV")
    sp.add_argument("--model", choices=ALL_KINDS, default="bilstm_attn", help="model kind")
    sp.add_argument("--task", choices=D.TASKS, default="any", help="prediction task")
    sp.add_argument("--data", required=True, help="bookings CSV")
    sp.add_argument("--seed", type=int, default=0, help="random seed")
    sp.add_argument("--out", required=True, help="checkpoint JSON path")
    sp.add_argument("--history", default=None, help="history CSV path (default: <out>.history.csv)")
    sp.add_argument("--epochs", type=int, default=100, help="maximum epochs")
    sp.add_argument("--batch-size", type=int, default=32, help="mini-batch size")
    sp.add_argument("--lr", type=float, default=0.001, help="Adam learning rate")
    sp.add_argument("--dropout", type=float, default=0.1, help="dropout rate (ffnn/LSTM kinds)")
    sp.add_argument("--patience", type=int, default=10, help="early-stopping patience in epochs")
    sp.add_argument("--layout", choices=("flat", "sequence"), default=None, help="input layout (default per kind)")
    sp.add_argument("--valid-fraction", type=float, default=0.1, help="validation share of the training samples")
    sp.add_argument("--model-options", default="{}", help="JSON object of model hyperparameters")
    split_args(sp)

    sp = add("eval", "evaluate a checkpoint; prints Acc Prec Recall F1")
    sp.add_argument("--ckpt", required=True, help="checkpoint JSON path")
    sp.add_argument("--data", required=True, help="bookings CSV")
    sp.add_argument("--split", choices=("train", "test"), default="test", help="which split to score")
    sp.add_argument("--average", choices=("weighted", "macro"), default="weighted", help="metric averaging")
    split_args(sp)

    sp = add("explain", "write importance or transition-table reports (JSON, CSV, SVG)")
    sp.add_argument("--ckpt", action="append", default=None,
                    help="checkpoint path; repeat once per level task for --kind causality")
    sp.add_argument("--data", required=True, help="bookings CSV")
    sp.add_argument("--report", required=True, help="output directory")
    sp.add_argument("--kind", choices=("importance", "correlation", "causality"), default="importance",
                    help="report kind")
    sp.add_argument("--source", choices=("attention", "qicvn"), default="attention",
                    help="importance source for causality")
    split_args(sp)

    sp = add("gradcheck", "finite-difference gradient check on a tiny random instance")
    sp.add_argument("--model", choices=ALL_KINDS, default="qicvn", help="model kind")
    sp.add_argument("--tol", type=float, default=1e-4, help="maximum relative error")
    sp.add_argument("--seed", type=int, default=0, help="random seed")

    sp = add("stats", "print the class-balance breakdown by age and race")
    sp.add_argument("--data", required=True, help="bookings CSV")
    sp.add_argument("--task", choices=D.TASKS, default="any", help="prediction task")
    sp.add_argument("--split", choices=("train", "test", "all"), default="all", help="which split")
    split_args(sp)
    return p


def parse_args(argv) -> argparse.Namespace:
    parser = _parser()
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    # required flags may come from the config, so they are checked after it is merged
    required = {}
    for name, sp in action.choices.items():
        for a in sp._actions:
            if a.required:
                a.required = False
                required.setdefault(name, []).append(a)
    args = parser.parse_args(argv)
    sp = action.choices[args.command]
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
        known = {a.dest for a in sp._actions}
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - known - {"command", "config"})
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        sp.set_defaults(**cfg)
        args = parser.parse_args(argv)
    missing = [a.option_strings[0] for a in required.get(args.command, []) if getattr(args, a.dest) is None]
    if missing:
        sp.error(f"the following arguments are required: {', '.join(missing)}")
    return args


def _datasets(args, task):
    records = D.load_csv(args.data)
    return D.build_sequences(records, task, split_year=args.split_year, window=args.window)


def cmd_generate(args):
    records = D.generate_synthetic(D.GeneratorConfig(n_suspects=args.n), seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    D.write_csv(records, args.out)
    print(f"wrote {len(records)} suspects to {args.out}")


def cmd_train(args):
    try:
        options = json.loads(args.model_options) if isinstance(args.model_options, str) else dict(args.model_options)
    except json.JSONDecodeError as exc:
        raise UsageError(f"--model-options is not JSON: {exc}") from exc
    train_ds, test_ds = _datasets(args, args.task)
    fit_ds, valid_ds = D.validation_split(train_ds, args.valid_fraction, seed=args.seed)
    cfg = TrainConfig(model=args.model, task=args.task, epochs=args.epochs, batch_size=args.batch_size,
                      seed=args.seed, dropout=args.dropout, patience=args.patience, lr=args.lr,
                      layout=args.layout, model_options=options)
    ckpt, history = train(cfg, fit_ds, valid_ds)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, args.out)
    write_history(history, args.history or f"{args.out}.history.csv")
    m = evaluate(ckpt, test_ds)
    print(f"{'model':<12} {'task':<7}  Acc.  Prec. Recall  F1")
    print(f"{args.model:<12} {args.task:<7} {m.row()}")


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    train_ds, test_ds = _datasets(args, ckpt.task)
    m = evaluate(ckpt, test_ds if args.split == "test" else train_ds, average=args.average)
    print(" Acc.  Prec. Recall  F1")
    print(m.row())


def cmd_explain(args):
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "correlation":
        _, test = _datasets(args, "any")
        report, stem = correlation_table(test), "correlation"
    else:
        if not args.ckpt:
            raise UsageError(f"--ckpt is required for --kind {args.kind}")
        ckpts = [load_checkpoint(p) for p in args.ckpt]
        _, test = _datasets(args, ckpts[0].task)
        if args.kind == "importance":
            if len(ckpts) != 1:
                raise UsageError("--kind importance takes exactly one --ckpt")
            ck = ckpts[0]
            report = qicvn_importance(ck, test) if ck.kind == "qicvn" else attention_importance(ck, test)
            stem = f"importance_{ck.kind}_{ck.task}"
        else:
            by_level = {}
            for ck in ckpts:
                if not ck.task.startswith("level"):
                    raise ExplainError(f"causality needs level-task checkpoints, got task {ck.task!r}")
                by_level[int(ck.task[-1])] = ck
            report, stem = causality_table(by_level, test, source=args.source), "causality"
    for fmt in ("json", "csv", "svg"):
        emit_report(report, fmt, out / f"{stem}.{fmt}")
    print(f"wrote {stem}.json, {stem}.csv, {stem}.svg to {out}")


def cmd_gradcheck(args):
    rep = gradcheck_model(args.model, seed=args.seed, tol=args.tol)
    print(f"{args.model} max_rel_error {rep.worst:.3e} tol {args.tol:g} {'ok' if rep.ok else 'FAIL'}")
    if not rep.ok:
        raise TrainingError(f"gradient check failed: {rep.worst:.3e} >= {args.tol:g}; flagged {rep.flagged}")


def cmd_stats(args):
    train_ds, test_ds = _datasets(args, args.task)
    if args.split == "all":
        ds = D.Dataset(train_ds.samples + test_ds.samples, "all", args.task)
    else:
        ds = train_ds if args.split == "train" else test_ds
    print(f"{'group':<8} {'n':>7} {'yes%':>6} {'no%':>6}")
    for row in D.class_stats(ds):
        yes = "   n/a" if row["yes"] is None else f"{row['yes']:6.1f}"
        no = "   n/a" if row["no"] is None else f"{row['no']:6.1f}"
        print(f"{row['group']:<8} {row['n']:>7} {yes} {no}")


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "explain": cmd_explain,
            "gradcheck": cmd_gradcheck, "stats": cmd_stats}


def _fail(kind: str, msg: str, code: int) -> int:
    print(f"{PROG}: error: {kind}: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = parse_args(argv)
        COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        return _fail("UsageError", exc, 2)
    except (D.DataError, ExplainError, TrainingError, ValueError, OSError, KeyError) as exc:
        return _fail(type(exc).__name__, exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
