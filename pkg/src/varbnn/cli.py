"""Command-line interface.

Subcommands: ``gen-data``, ``train``, ``predict``, ``diagnose-prior`` and
``sweep-position``. Structured output is written as JSON lines, one
self-describing record per line.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    GENERATORS,
    Dataset,
    Standardization,
    ingest_csv,
    split_dataset,
    write_csv,
)
from .errors import BNNError, ConfigurationError, DataError
from .layers import FAMILIES, prior_unit_diagnostic
from .model_builder import (
    ModelSpec,
    build_model,
    hybrid_split,
    load_checkpoint,
    load_spec,
    place_variational,
    save_checkpoint,
    spec_to_dict,
)
from .predictive import (
    calibration_metrics,
    classification_metrics,
    format_prediction_report,
    predict_batch,
    predict_classes,
)
from .rng import make_stream
from .trainer import OPTIMIZERS, TrainConfig, train

logger = logging.getLogger("varbnn")


class StageError(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (BNNError, OSError, ValueError) as exc:
        raise StageError(name, exc) from exc


def _record(**fields) -> str:
    return json.dumps(fields)


def override_family(spec: ModelSpec, family: str | None) -> ModelSpec:
    if family is None:
        return spec
    layers = [ls.as_dense().as_variational(family, ls.prior_sigma) if ls.variational else ls
              for ls in spec.layers]
    return spec.with_layers(layers)


def train_config_from_args(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.learning_rate, epochs=args.epochs, batch_size=args.batch_size,
        seed=args.seed, optimizer=args.optimizer, momentum=args.momentum,
        clip_norm=args.clip_norm, kl_weight=args.kl_weight, mc_samples=args.mc_samples,
    )


def evaluate(model, ds: Dataset, n_samples: int, seed: int):
    """Predictions plus metrics; the metric set depends on the model head."""
    if model.spec.head == "categorical":
        preds = predict_classes(model, ds.features, n_samples, make_stream(seed))
        return preds, classification_metrics(preds, ds.targets)
    summaries = predict_batch(model, ds.features, n_samples, make_stream(seed))
    return summaries, calibration_metrics(summaries, ds.targets)


def task_for(spec: ModelSpec) -> str:
    return "classification" if spec.head == "categorical" else "regression"


def class_report(preds, labels) -> str:
    return "".join(_record(record="prediction", label=p.label, probabilities=list(p.probabilities),
                           entropy=p.entropy, actual=int(a)) + "\n"
                   for p, a in zip(preds, labels))


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    gen = GENERATORS[args.kind]
    x, y = gen(args.n, args.seed, noise=args.noise, n_features=args.features)
    _stage("write", write_csv, args.out, x, y, args.target)
    return 0


def cmd_train(args, out=None) -> int:
    out = out or sys.stdout
    spec = _stage("spec", load_spec, args.spec)
    spec = _stage("spec", override_family, spec, args.posterior_family)
    config = _stage("config", train_config_from_args, args)
    ds = _stage("ingest", ingest_csv, args.data, args.target, task_for(spec))
    train_ds, test_ds = _stage("split", split_dataset, ds, args.train_fraction, args.seed)
    if train_ds.features.shape[1] != spec.input_width:
        raise StageError("ingest", DataError(
            f"data has {train_ds.features.shape[1]} features, spec expects {spec.input_width}"))
    model = _stage("build", build_model, spec, args.seed)
    trace = _stage("train", train, model, train_ds.features, train_ds.targets, config)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "target": ds.target_name,
        "columns": list(ds.columns),
        "task": ds.task,
        "standardization": ds.standardization.to_dict(),
        "train_config": asdict(config),
        "train_size": len(train_ds),
    }
    _stage("write", save_checkpoint, model, out_dir / "checkpoint.json", meta)
    _stage("write", trace.write, out_dir / "trace.jsonl")
    last = trace.records[-1] if trace.records else None
    print(_record(record="train", epochs=len(trace), params=model.n_params,
                  final_total=None if last is None else last.total), file=out)
    if len(test_ds):
        _, metrics = _stage("evaluate", evaluate, model, test_ds, args.n_samples, args.seed)
        print(_record(record="metrics", split="test", n=len(test_ds), **metrics.to_dict()),
              file=out)
    return 0


def cmd_predict(args, out=None) -> int:
    out = out or sys.stdout
    model, meta = _stage("load", load_checkpoint, args.checkpoint)
    std = Standardization.from_dict(meta["standardization"]) if "standardization" in meta else None
    target = args.target or meta.get("target", "y")
    ds = _stage("ingest", ingest_csv, args.data, target, task_for(model.spec), std)
    if ds.features.shape[1] != model.spec.input_width:
        raise StageError("ingest", DataError(
            f"data has {ds.features.shape[1]} features, checkpoint expects "
            f"{model.spec.input_width}"))
    preds, metrics = _stage("predict", evaluate, model, ds, args.n_samples, args.seed)
    limit = len(preds) if args.limit is None else args.limit
    if model.spec.head == "categorical":
        report = class_report(preds[:limit], ds.targets[:limit])
    else:
        report = format_prediction_report(preds[:limit], ds.targets[:limit].tolist())
    record = _record(record="metrics", n=len(ds), n_samples=args.n_samples, **metrics.to_dict())
    if args.report:
        Path(args.report).write_text(report)
    else:
        out.write(report)
    if args.metrics:
        Path(args.metrics).write_text(record + "\n")
    else:
        print(record, file=out)
    return 0


def cmd_diagnose_prior(args, out=None) -> int:
    out = out or sys.stdout
    spec = _stage("spec", load_spec, args.spec)
    if spec.depth - 1 < 2 and args.depth is None:
        raise StageError("spec", ConfigurationError("diagnose-prior needs at least 2 hidden "
                                                    "layers"))
    diag = _stage("diagnose", prior_unit_diagnostic, spec, args.samples,
                  make_stream(args.seed), args.depth)
    for i, (k, m, s) in enumerate(zip(diag.excess_kurtosis, diag.means, diag.stds), start=1):
        print(_record(record="prior-units", layer=i, excess_kurtosis=k, mean=m, std=s,
                      n_samples=diag.n_samples), file=out)
    return 0


def sweep_position(spec: ModelSpec, train_ds: Dataset, test_ds: Dataset, config: TrainConfig,
                   n_samples: int = 100, family: str = "mean-field",
                   only: Sequence[str] | None = None) -> list[dict]:
    """Train one model per placement of a single variational layer, plus both
    reference layouts: case1 (all hidden layers variational) and case2 (only the
    output layer variational).

    Every run uses ``config.seed`` for initialisation, shuffling and noise.
    Failed runs are kept in the table with ``status: "failed"``. ``only``
    restricts the table to the given run labels.
    """
    depth = spec.depth
    runs = [(f"position-{p}", p, place_variational(spec, [p], family))
            for p in range(1, depth + 1)]
    runs.append(("case1", None, place_variational(spec, range(1, depth), family)))
    runs.append(("case2", None, place_variational(spec, [depth], family)))
    if only is not None:
        runs = [r for r in runs if r[0] in only]
    rows = []
    for label, position, run_spec in runs:
        det, prob = hybrid_split(run_spec)
        row = {"record": "sweep", "label": label, "position": position,
               "deterministic": det, "probabilistic": prob}
        try:
            model = build_model(run_spec, config.seed)
            train(model, train_ds.features, train_ds.targets, config)
            _, metrics = evaluate(model, test_ds, n_samples, config.seed)
            row.update(metrics.to_dict(), status="ok")
        except BNNError as exc:
            logger.warning("sweep run %s failed: %s", label, exc)
            keys = ("accuracy", "nll") if spec.head == "categorical" else ("rmse", "nll",
                                                                        "coverage95")
            row.update(dict.fromkeys(keys), status="failed", error=str(exc))
        rows.append(row)
    return rows


def cmd_sweep_position(args, out=None) -> int:
    out = out or sys.stdout
    spec = _stage("spec", load_spec, args.spec)
    config = _stage("config", train_config_from_args, args)
    ds = _stage("ingest", ingest_csv, args.data, args.target, task_for(spec))
    train_ds, test_ds = _stage("split", split_dataset, ds, args.train_fraction, args.seed)
    if len(test_ds) == 0:
        raise StageError("split", ConfigurationError("sweep needs a non-empty test split"))
    print(_record(record="header", seed=args.seed, spec=spec_to_dict(spec),
                  train_config=asdict(config), n_train=len(train_ds), n_test=len(test_ds),
                  n_samples=args.n_samples, family=args.posterior_family or "mean-field"),
          file=out)
    rows = sweep_position(spec, train_ds, test_ds, config, args.n_samples,
                          args.posterior_family or "mean-field")
    for row in rows:
        print(json.dumps(row), file=out)
    return 0 if all(r["status"] == "ok" for r in rows) else 1


# -- argument parsing --------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", "--lr", type=float, default=0.01)
    p.add_argument("--optimizer", choices=OPTIMIZERS, default="sgd")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--kl-weight", type=float, default=None,
                   help="weight of the KL term (default: 1 / number of training rows)")
    p.add_argument("--mc-samples", type=int, default=1)
    p.add_argument("--posterior-family", choices=FAMILIES, default=None)
    p.add_argument("--train-fraction", type=float, default=1.0)
    p.add_argument("--n-samples", type=int, default=100,
                   help="Monte Carlo samples for held-out evaluation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varbnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic regression CSV")
    p.add_argument("--kind", choices=sorted(GENERATORS), default="linear")
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--features", type=int, default=1)
    p.add_argument("--target", default="y")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write checkpoint + trace")
    p.add_argument("--spec", required=True, help="spec file or builtin name")
    p.add_argument("--data", required=True)
    p.add_argument("--target", default="y")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="posterior predictive report for a CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", default=None)
    p.add_argument("--n-samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=None, help="report only the first N rows")
    p.add_argument("--report", default=None, help="write report lines here instead of stdout")
    p.add_argument("--metrics", default=None, help="write the metrics record here")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("diagnose-prior", help="excess kurtosis of prior-induced units")
    p.add_argument("--spec", required=True)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_diagnose_prior)

    p = sub.add_parser("sweep-position", help="compare placements of one variational layer")
    p.add_argument("--spec", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", default="y")
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep_position, train_fraction=0.8)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"varbnn {args.command}: error in stage {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
