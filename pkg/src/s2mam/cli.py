"""Command-line entry point: ``s2mam {synth,fit,predict,experiment,trace}``.

Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .dataset import (
    SplitSpec, gen_additive_regression, gen_additive_synthetic, gen_moons, inject_corruption,
    load_csv, load_features_csv, save_csv, split_labels,
)
from .errors import NumericalError, ValidationError
from .experiment import ExperimentConfig, apply_overrides, load_config, run_experiment
from .model import FITTERS, load_model, predict, save_model, selected_variables
from .params import HyperParams
from .upper_optimizer import BilevelTrace

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


def _cmd_synth(args) -> int:
    if args.kind == "additive":
        ds = gen_additive_synthetic(args.n, args.p, args.seed)
    elif args.kind == "regression":
        ds = gen_additive_regression(args.n, args.p, seed=args.seed)
    else:
        ds = gen_moons(args.n // 2, args.labeled_per_class, seed=args.seed)
    ds = inject_corruption(ds, args.p_u, args.p_n, seed=args.seed)
    test = None
    if args.kind != "moons":
        ds, test = split_labels(ds, SplitSpec(args.label_ratio, args.test_fraction, True, args.seed))
    save_csv(ds, args.out, reveal_hidden=args.reveal_hidden)
    if test is not None:
        if not args.test_out:
            raise ValidationError("--test-fraction > 0 needs --test-out")
        save_csv(test, args.test_out)
    print(f"wrote {ds.n} rows x {ds.p} features ({ds.l} labeled) to {args.out}")
    return EXIT_OK


def _hyperparams(args) -> HyperParams:
    d = load_config(args.config) if args.config else {}
    d = d.get("hyperparams", d)
    return HyperParams.from_dict(apply_overrides(d, args.set or []))


def _cmd_fit(args) -> int:
    ds = load_csv(args.data, args.label_column, args.task)
    hp = _hyperparams(args)
    model = FITTERS[args.variant](ds, hp, args.seed)
    save_model(model, args.out, embed_training_data=not args.no_embed)
    if args.trace:
        model.trace.to_csv(args.trace)
    sel = [ds.feature_names[j] if ds.feature_names else str(j) for j in selected_variables(model)]
    print(f"fitted {model.variant} on {ds.n} rows ({ds.l} labeled); selected: {', '.join(sel) or '(none)'}")
    return EXIT_OK


def _cmd_predict(args) -> int:
    train_X = None
    if args.train_data:
        train_X = load_csv(args.train_data, args.label_column, "regression").X
    model = load_model(args.model, train_X=train_X)
    X = load_features_csv(args.data, args.label_column)
    pred = predict(model, X)
    with Path(args.out).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["prediction"])
        for v in pred:
            w.writerow([repr(float(v))])
    print(f"wrote {pred.size} predictions to {args.out}")
    return EXIT_OK


def _cmd_experiment(args) -> int:
    d = load_config(args.config) if args.config else {}
    overrides = list(args.set or [])
    if args.repeats is not None:
        overrides.append(f"repeats={args.repeats}")
    if args.out is not None:
        d["output"] = args.out
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    config = ExperimentConfig.from_dict(apply_overrides(d, overrides))
    table = run_experiment(config)
    for c in table.cells:
        def fmt(m, sd):
            return "-" if m is None else f"{m:.4f} +- {sd:.4f}"
        print(f"{c.variant:>10} p_u={c.p_u:<3} p_n={c.p_n:<3} {c.metric}: "
              f"unlabeled {fmt(c.unlabeled_mean, c.unlabeled_sd)}, test {fmt(c.test_mean, c.test_sd)}"
              f" (n={c.count}, failed={c.failures}, {table.wall_s_mean(c.variant, c.p_u, c.p_n) or 0:.1f} s/fit)")
    return EXIT_OK


def _cmd_trace(args) -> int:
    import json

    d = json.loads(Path(args.model_run).read_text())
    if "trace" not in d:
        raise ValidationError(f"{args.model_run} has no trace")
    trace = BilevelTrace.from_dict(d["trace"])
    if args.out:
        trace.to_csv(args.out)
        print(f"wrote {len(trace)} trace rows to {args.out}")
    else:
        w = csv.writer(sys.stdout)
        w.writerow(BilevelTrace.COLUMNS)
        for row in zip(*(getattr(trace, k) for k in BilevelTrace.COLUMNS)):
            w.writerow([repr(v) for v in row])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s2mam", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset as CSV")
    p.add_argument("--kind", choices=("additive", "regression", "moons"), default="additive")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--p", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p-u", type=int, default=0)
    p.add_argument("--p-n", type=int, default=0)
    p.add_argument("--label-ratio", type=float, default=0.05)
    p.add_argument("--test-fraction", type=float, default=0.0)
    p.add_argument("--labeled-per-class", type=int, default=1)
    p.add_argument("--reveal-hidden", action="store_true", help="write hidden labels of unlabeled rows")
    p.add_argument("--out", required=True)
    p.add_argument("--test-out")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("fit", help="fit a model on a CSV dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON/YAML hyperparameters")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a hyperparameter")
    p.add_argument("--variant", choices=sorted(FITTERS), default="s2mam")
    p.add_argument("--task", choices=("classification", "regression"), default="classification")
    p.add_argument("--label-column", default="label")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="also write the bilevel trace CSV")
    p.add_argument("--no-embed", action="store_true", help="do not embed training inputs in the model file")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("predict", help="predict with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--train-data", help="training CSV for models saved without embedded inputs")
    p.add_argument("--label-column", default="label")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("experiment", help="run a repeated-trial experiment")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
    p.add_argument("--repeats", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="report path prefix (.json and .csv are written)")
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("trace", help="dump the bilevel trace stored in a model file")
    p.add_argument("--model-run", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_trace)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
