"""Command-line entry point.

Exit codes: 0 success (no anomaly), 1 anomaly flagged by ``scan``,
2 usage or data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import ScalogramCNNClassifier, derive_seed, train_classifier
from .config import ConfigError, RunConfig
from .evaluation import (EvaluationError, amplitude_similarity_table, expected_coupon_trials,
                         n_way_validation)
from .nn import WeightsFormatError, load_weights, save_weights, weights_checksum
from .siamese import ScanError, count_flags, report_scan, scan_trace
from .synth import (AnomalySpec, DatasetError, DatasetManifest, build_dataset,
                    make_reference_trace, with_anomaly)
from .trace import TraceFormatError, load_trace_csv, save_trace_csv

log = logging.getLogger("cwtscan")

EXIT_OK, EXIT_ANOMALY, EXIT_ERROR = 0, 1, 2
USER_ERRORS = (ConfigError, DatasetError, EvaluationError, ScanError, TraceFormatError,
               WeightsFormatError, OSError, ValueError, KeyError)


class UsageError(Exception):
    pass


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _prepare_out(out, force):
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_classifier(path):
    model, header = load_weights(path)
    names = header.get("class_names") or [str(i) for i in range(model.num_classes)]
    return ScalogramCNNClassifier.from_model(model, names), header


def cmd_generate(cfg, args):
    out = _prepare_out(args.out, args.force)
    manifest = build_dataset(args.dataset, cfg.seed, cfg.synth, cfg.pipeline,
                             cfg.train.train_fraction)
    path = manifest.save(out)
    for name, n in manifest.counts().items():
        print(f"{name}\t{n}")
    print(f"total\t{len(manifest)}")
    return path


def cmd_train(cfg, args):
    manifest = DatasetManifest.load(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = cfg.train if args.task == 1 else cfg.siamese_train
    init = None
    if args.init:
        init, _ = load_weights(args.init)
    clf, cm = train_classifier(manifest, train_cfg, seed=cfg.seed, init_model=init)
    weights = out / "weights.cwtw"
    save_weights(clf.model_, weights, manifest.class_names, extra={"task": args.task})
    cm.render(out / "confusion.png")
    metrics = {
        "task": args.task,
        "dataset": manifest.name,
        "train_fraction": train_cfg.train_fraction,
        "confusion": cm.to_json(),
        "errors": [list(e) for e in cm.errors()],
        "final_loss": round(float(clf.loss_curve_[-1]), 8) if clf.loss_curve_ else None,
        "weights_checksum": weights_checksum(clf.model_),
    }
    path = out / "metrics.json"
    _write_json(path, metrics)
    print(f"test accuracy {cm.accuracy:.4f} ({np.trace(cm.counts)}/{cm.total})")
    return path


def cmd_nway(cfg, args):
    manifest = DatasetManifest.load(args.manifest)
    clf, header = _load_classifier(args.weights)
    if list(clf.classes_) != list(manifest.class_names):
        raise UsageError("weights were trained on a different class set")
    splits = manifest.resplit(cfg.siamese_train.train_fraction)
    X, y = manifest.arrays("test", splits)
    n_way = args.n_way or cfg.eval.n_way
    trials = args.trials or cfg.eval.trials or expected_coupon_trials(len(y))
    result = n_way_validation(clf, X, y, n_way, trials, derive_seed(cfg.seed, cfg.eval.rng_seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .plotting import nway_montage
    nway_montage(X, result.records, out / "nway_montage.png")
    data = dict(result.to_json(), test_size=len(y), dataset=manifest.name,
                model_checksum=weights_checksum(clf.model_))
    path = out / "nway.json"
    _write_json(path, data)
    print(f"{n_way}-way accuracy {result.accuracy:.4f} over k={trials} trials (M={len(y)})")
    return path


def cmd_scan(cfg, args):
    clf, header = _load_classifier(args.weights)
    try:
        reference = load_trace_csv(args.reference)
        query = load_trace_csv(args.query)
    except OSError as exc:
        raise TraceFormatError(str(exc)) from None
    threshold = cfg.eval.threshold if args.threshold is None else args.threshold
    verdicts = scan_trace(clf, reference, query, cfg.pipeline, threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = report_scan(verdicts, out / "scan_report.json", threshold,
                       weights_checksum(clf.model_), timeline_dir=out)
    flags = count_flags(verdicts)
    for name, vs in verdicts.items():
        for v in vs:
            if v.is_anomaly:
                print(f"ANOMALY {name} t={v.window_center_seconds:.1f}s score={v.score:.4f} "
                      f"{v.anchor_class}->{v.query_class}")
    print(f"{flags} anomalous window(s)")
    return path, flags


def cmd_table3(cfg, args):
    manifest = DatasetManifest.load(args.manifest)
    if args.weights:
        clf, _ = _load_classifier(args.weights)
    else:
        X, y = manifest.arrays()
        clf = ScalogramCNNClassifier.from_config(
            cfg.table3_train, classes=list(manifest.class_names),
            random_state=derive_seed(cfg.seed, cfg.table3_train.rng_seed)).fit(X, y)
    rows = amplitude_similarity_table(clf, manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not args.weights:
        save_weights(clf.model_, out / "weights.cwtw", manifest.class_names, extra={"task": 3})
    path = out / "table3.json"
    _write_json(path, {"rows": [{"group": g, "factor": f, "score": round(s, 10)} for g, f, s in rows]})
    print("peak\tfactor\tscore")
    for g, f, s in rows:
        print(f"{g}\t{f:g}\t{s:.4f}")
    return path


def cmd_traces(cfg, args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ref = make_reference_trace(cfg.seed, args.variables, args.duration, cfg.synth)
    if args.factor is not None:
        anomaly = AnomalySpec("amplitude-shift", factor=args.factor)
    else:
        anomaly = AnomalySpec("time-shift", shift_seconds=args.shift)
    qry = with_anomaly(ref, args.variable, anomaly, cfg.pipeline.als)
    save_trace_csv(ref, out / "reference.csv")
    save_trace_csv(qry, out / "query.csv")
    print(f"wrote {out / 'reference.csv'} and {out / 'query.csv'}")
    return out


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration (defaults for every key)")
    common.add_argument("--seed", type=int, help="override the configuration seed")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (results do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="cwtscan", description="Scalogram-based anomaly detection for step-wise process traces.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="materialise a synthetic image dataset")
    p.add_argument("--dataset", type=int, choices=(1, 2, 3), required=True, help="dataset id")

    p = sub.add_parser("train", parents=[common], help="train the scalogram classifier")
    p.add_argument("--manifest", type=Path, required=True, help="dataset manifest.json or directory")
    p.add_argument("--task", type=int, choices=(1, 2), default=1,
                   help="1: classifier split and augmentation; 2: siamese split and histogram equalisation")
    p.add_argument("--init", type=Path, help="start from these weights")

    p = sub.add_parser("nway", parents=[common], help="N-way similarity validation on the test split")
    p.add_argument("--manifest", type=Path, required=True, help="dataset manifest.json or directory")
    p.add_argument("--weights", type=Path, required=True, help="trained weights file")
    p.add_argument("--n-way", type=int, help="candidates per trial (default from config)")
    p.add_argument("--trials", type=int, help="number of trials (default: coupon-collector expectation)")

    p = sub.add_parser("scan", parents=[common], help="compare a query trace against a reference trace")
    p.add_argument("--weights", type=Path, required=True, help="trained weights file")
    p.add_argument("--reference", type=Path, required=True, help="known-good trace CSV")
    p.add_argument("--query", type=Path, required=True, help="trace CSV to check")
    p.add_argument("--threshold", type=float, help="anomaly threshold on the similarity score")

    p = sub.add_parser("table3", parents=[common], help="amplitude similarity table on dataset 3")
    p.add_argument("--manifest", type=Path, required=True, help="dataset-3 manifest.json or directory")
    p.add_argument("--weights", type=Path, help="use these weights instead of training")

    p = sub.add_parser("traces", parents=[common], help="write a synthetic reference/query CSV pair")
    p.add_argument("--variables", type=int, default=2, help="number of variables")
    p.add_argument("--duration", type=float, default=90.0, help="seconds")
    p.add_argument("--variable", default="var1", help="variable receiving the anomaly")
    p.add_argument("--shift", type=float, default=2.0, help="time shift in seconds")
    p.add_argument("--factor", type=float, help="amplitude factor (instead of a time shift)")
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "nway": cmd_nway, "scan": cmd_scan,
            "table3": cmd_table3, "traces": cmd_traces}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        try:
            from threadpoolctl import threadpool_limits
            limits = threadpool_limits(args.threads)
        except ImportError:
            limits = nullcontext()
        with limits:
            result = COMMANDS[args.command](cfg, args)
    except (UsageError, *USER_ERRORS) as exc:
        print(f"cwtscan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.command == "scan":
        return EXIT_ANOMALY if result[1] else EXIT_OK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
