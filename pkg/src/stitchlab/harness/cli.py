"""``stitchlab`` command line.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import direct_match, similarity, stitch
from ..errors import ConfigError, NumericalError, StitchLabError
from ..nnet import io as nio
from ..nnet.data import synth_dataset
from ..nnet.model import flatten, representation_map
from ..nnet.spec import preset
from ..nnet.train import TrainConfig, train
from .config import load_config
from .records import read_records
from .report import emit_plot_data, format_table, summarize

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _data(args, split: str, n: int):
    return synth_dataset(args.data_seed, n, classes=args.classes, split=split)


def cmd_train(args) -> int:
    spec = preset(args.spec, classes=args.classes, width_multiplier=args.width)
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, lr=args.lr, batch=args.batch, optimizer=args.optimizer)
    model = train(spec, _data(args, "Train", args.n_train), cfg)
    nio.save_model(args.out, model)
    test_acc = None
    if args.n_test:
        from ..nnet.model import accuracy
        test_acc = accuracy(model, _data(args, "Test", args.n_test))
    print(json.dumps({"model": str(args.out), "train_accuracy": model.train_meta["train_accuracy"],
                      "test_accuracy": test_acc}))
    return EXIT_OK


def cmd_extract(args) -> int:
    model = nio.load_model(args.model)
    acts = representation_map(model, _data(args, args.split, args.n), args.layer)
    nio.save_activations(args.out, acts)
    print(json.dumps({"activations": str(args.out), "shape": list(acts.data.shape), "tap": acts.tap}))
    return EXIT_OK


def cmd_match(args) -> int:
    a = flatten(nio.load_activations(args.a))
    b = flatten(nio.load_activations(args.b))
    if args.method == "ls":
        sol = direct_match.ls_match(a, b, with_bias=not args.no_bias)
    elif args.method == "procrustes":
        sol = direct_match.procrustes_match(a, b)
    elif args.method == "rrr":
        if args.k is None:
            raise ConfigError("--k is required for rrr")
        sol = direct_match.rrr_match(a, b, args.k, with_bias=not args.no_bias)
    elif args.method == "lasso":
        if args.alpha is None:
            raise ConfigError("--alpha is required for lasso")
        sol = direct_match.lasso_match(a, b, args.alpha, with_bias=not args.no_bias)
    else:
        acts_b = nio.load_activations(args.b)
        scheme = direct_match.WeightScheme.parse(args.scheme or "Ones")
        model2 = nio.load_model(args.model2) if args.model2 else None
        w = direct_match.weight_refresher(scheme, model2, args.layer, acts_b)
        sol = direct_match.wms_match(a, b, w, epochs=args.epochs, max_rows=None, scheme=str(scheme))
    direct_match.save_solution(args.out, sol)
    print(json.dumps(sol.sidecar()["params"] | {"class": sol.transform_class, "residual_fro": sol.residual_fro}))
    return EXIT_OK


def cmd_stitch(args) -> int:
    m1, m2 = nio.load_model(args.model1), nio.load_model(args.model2)
    f = stitch.frankenstein(m1, m2, args.layer_l, args.layer_m)
    cfg = stitch.StitchTrainConfig(loss=args.loss, init=args.init, form=args.form, k=args.k, lr=args.lr,
                                   epochs=args.epochs, batch=args.batch, l1_weight=args.l1,
                                   cka_penalty_weight=args.cka_weight, seed=args.seed,
                                   metrics=tuple(args.metrics or ()))
    tr, te = _data(args, "Train", args.n_train), _data(args, "Test", args.n_test)
    s, trace = stitch.train_stitcher(f, cfg, tr, te, trace_path=args.trace)
    stitch.save_stitcher(args.out, s)
    print(json.dumps(trace[s.meta["best_epoch"]]))
    return EXIT_OK


def cmd_similarity(args) -> int:
    x = flatten(nio.load_activations(args.a))
    y = flatten(nio.load_activations(args.b))
    for name in args.index:
        print(similarity.compute(name, x, y).to_json())
    return EXIT_OK


def cmd_experiment(args, overrides) -> int:
    cfg = load_config(args.config, args.name, overrides)
    paths = run_experiment_cli(cfg)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return EXIT_OK


def run_experiment_cli(cfg):
    from .experiments import run_experiment
    return run_experiment(cfg)


def cmd_report(args) -> int:
    records = []
    for path in args.records:
        records.extend(read_records(path))
    emit_plot_data(records, args.out)
    print(format_table(summarize(records)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stitchlab", description="Stitch frozen networks and compare matching methods.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp, n_train=True):
        sp.add_argument("--data-seed", type=int, default=0)
        sp.add_argument("--classes", type=int, default=10)
        if n_train:
            sp.add_argument("--n-train", type=int, default=20_000)
            sp.add_argument("--n-test", type=int, default=4_000)

    sp = sub.add_parser("train", help="train a network on the synthetic dataset")
    sp.add_argument("--spec", default="micro10")
    sp.add_argument("--width", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--batch", type=int, default=64)
    sp.add_argument("--optimizer", default="sgd_nesterov")
    sp.add_argument("--out", type=Path, required=True)
    data_args(sp)

    sp = sub.add_parser("extract", help="write activations of one layer")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--layer", required=True)
    sp.add_argument("--split", default="Test", choices=["Train", "Test"])
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--out", type=Path, required=True)
    data_args(sp, n_train=False)

    sp = sub.add_parser("match", help="direct matching between two activation files")
    sp.add_argument("--a", type=Path, required=True)
    sp.add_argument("--b", type=Path, required=True)
    sp.add_argument("--method", default="ls", choices=["ls", "procrustes", "rrr", "lasso", "wms"])
    sp.add_argument("--k", type=int)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--scheme")
    sp.add_argument("--model2", type=Path, help="model 2 file, for gradient weight schemes")
    sp.add_argument("--layer", help="model 2 layer the activations in --b come from")
    sp.add_argument("--epochs", type=int, default=50)
    sp.add_argument("--no-bias", action="store_true")
    sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("stitch", help="train a stitching layer between two models")
    sp.add_argument("--model1", type=Path, required=True)
    sp.add_argument("--model2", type=Path, required=True)
    sp.add_argument("--layer-l", required=True)
    sp.add_argument("--layer-m")
    sp.add_argument("--loss", default="SoftCE_to_Model2")
    sp.add_argument("--init", default="LeastSquares")
    sp.add_argument("--form", default="full")
    sp.add_argument("--k", type=int)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--batch", type=int, default=64)
    sp.add_argument("--l1", type=float, default=0.0)
    sp.add_argument("--cka-weight", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--metrics", nargs="*")
    sp.add_argument("--trace", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    data_args(sp)

    sp = sub.add_parser("similarity", help="similarity indices between two activation files")
    sp.add_argument("--a", type=Path, required=True)
    sp.add_argument("--b", type=Path, required=True)
    sp.add_argument("--index", nargs="+", default=["CKA"], choices=list(similarity.INDEX_NAMES))

    sp = sub.add_parser("experiment", help="run a desk-scale experiment")
    esub = sp.add_subparsers(dest="action", required=True)
    run = esub.add_parser("run", help="run <name>; extra --dotted.key=value flags override the config")
    run.add_argument("name")
    run.add_argument("--config", type=Path)

    sp = sub.add_parser("report", help="summaries and plot bundles from record files")
    sp.add_argument("records", nargs="+", type=Path)
    sp.add_argument("--out", type=Path, default=Path("plots"))
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "experiment":
            bad = [e for e in extra if not (e.startswith("--") and "=" in e)]
            if bad:
                raise ConfigError(f"unrecognized arguments: {' '.join(bad)}")
            return cmd_experiment(args, extra)
        if extra:
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        return {"train": cmd_train, "extract": cmd_extract, "match": cmd_match, "stitch": cmd_stitch,
                "similarity": cmd_similarity, "report": cmd_report}[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (StitchLabError, ValueError, KeyError, OSError) as exc:
        # malformed inputs (bad layer names, unreadable files) are configuration problems
        print(f"config error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
