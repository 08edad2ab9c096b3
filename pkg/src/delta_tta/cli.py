"""Command line entry point: ``delta-tta {train-source,run,sweep,export-stream}``.

Failures exit non-zero and print one JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, replace

from . import checkpoint, harness
from .adapt import method_from_name
from .checkpoint import dumps
from .errors import ConfigError, DeltaError, InputError
from .netcore import OptimizerConfig
from .streams import ScenarioSpec, make_scenario


def _hidden(text):
    try:
        return tuple(int(h) for h in text.split(",") if h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer widths {text!r}") from None


def _schedule(text):
    key, _, val = text.partition("=")
    if key.strip().upper() != "L" or not val:
        raise argparse.ArgumentTypeError("schedule must look like L=64")
    return int(val)


def _seeds(text):
    out = []
    for part in text.split(","):
        lo, _, hi = part.partition("-")
        out.extend(range(int(lo), int(hi) + 1) if hi else [int(lo)])
    return out


def _add_task_args(p):
    g = p.add_argument_group("synthetic task")
    g.add_argument("--classes", "-K", type=int, default=10)
    g.add_argument("--dim", "-D", type=int, default=16)
    g.add_argument("--n-train", type=int, default=5000)
    g.add_argument("--n-test", type=int, default=2000)
    g.add_argument("--shift", default="noise:2.0")
    g.add_argument("--hidden", type=_hidden, default=(64, 64))
    g.add_argument("--epochs", type=int, default=20)
    g.add_argument("--task-seed", type=int, default=0)


def _add_method_args(p):
    p.add_argument("--batch-size", "-B", type=int, default=64)
    p.add_argument("--alpha", type=float, default=None, help="TBR/TEMA smoothing (default 0.95)")
    p.add_argument("--lambda", dest="lam", type=float, default=0.9)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--tbr-init", choices=("first", "inherit"), default="first")
    p.add_argument("--schedule", type=_schedule, default=None, metavar="L=N")
    p.add_argument("--format", choices=("json-lines", "csv"), default="json-lines")
    p.add_argument("--out", default=None)


def _add_scenario_args(p, many=False):
    if many:
        p.add_argument("--scenarios", default="is+cb,ds+cb,is+ci,ds+ci")
    else:
        p.add_argument("--scenario", default="is+cb")
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--pi", type=float, default=0.1)
    p.add_argument("--pieces", type=int, default=10)


def _task_config(args):
    return harness.TaskConfig(args.classes, args.dim, args.n_train, args.n_test, args.shift,
                              args.hidden, args.epochs, seed=args.task_seed)


def _load_task(args):
    """Model and test set, from ``--checkpoint`` (recipe in its metadata) or freshly trained."""
    cfg = _task_config(args)
    if getattr(args, "checkpoint", None):
        model, meta = checkpoint.load_model(args.checkpoint, with_meta=True)
        if meta and "task" in meta:
            t = meta["task"]
            cfg = replace(cfg, **{k: (tuple(v) if k == "hidden" else v) for k, v in t.items()})
        _, test = harness.make_synthetic_task(cfg.num_classes, cfg.dim, cfg.n_train, cfg.n_test,
                                              cfg.shift, cfg.seed)
        if model.spec.input_dim != test.dim or model.spec.num_classes != test.num_classes:
            raise ConfigError("checkpoint does not match the task dimensions")
        return model, test
    model, _, test = harness.build_task(cfg)
    return model, test


def _sweep_config(args):
    return harness.SweepConfig(task=_task_config(args), batch_size=args.batch_size, alpha=args.alpha,
                               lam=args.lam, lr=args.lr, optimizer=args.optimizer, init=args.tbr_init,
                               schedule=args.schedule, pieces=args.pieces)


def cmd_train_source(args):
    cfg = _task_config(args)
    model, _, test = harness.build_task(cfg)
    meta = {"task": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()}}
    checkpoint.save_model(model, args.out, meta=meta)
    from .netcore import predict
    acc = float((predict(model, test.x).argmax(1) == test.y).mean())
    print(dumps({"checkpoint": args.out, "source_acc_test": acc}, digits=6))


def cmd_run(args):
    model, test = _load_task(args)
    spec = ScenarioSpec.parse(args.scenario, args.rho, args.pi, pieces=args.pieces, seed=args.seed)
    method = method_from_name(args.method, lam=args.lam, init=args.tbr_init,
                              optimizer=OptimizerConfig(args.optimizer, args.lr))
    report = harness.run_episode(model, make_scenario(test, spec), method, args.batch_size,
                                 args.schedule, alpha=args.alpha)
    if args.out:
        harness.emit_report([report], args.out, args.format)
    print(dumps({**report.record(), "counts": report.counts}, digits=10))


def cmd_sweep(args):
    cfg = _sweep_config(args)
    scenarios = []
    for name in args.scenarios.split(","):
        s = ScenarioSpec.parse(name.strip(), args.rho, args.pi)
        scenarios.append((s.name, s.rho, s.pi))
    methods = [m.strip() for m in args.methods.split(",")]
    for m in methods:
        method_from_name(m)  # fail fast on typos
    result = harness.compare(methods, scenarios, _seeds(args.seeds), cfg)
    if args.out:
        harness.emit_report(result["reports"], args.out, args.format)
    print(f"seeds: {result['seeds']}")
    print(harness.format_summary(result["summary"]))
    for f in result["failures"]:
        print(dumps(f), file=sys.stderr)
    return 1 if result["failures"] else 0


def cmd_export_stream(args):
    _, test = harness.make_synthetic_task(args.classes, args.dim, args.n_train, args.n_test,
                                          args.shift, args.task_seed)
    spec = ScenarioSpec.parse(args.scenario, args.rho, args.pi, pieces=args.pieces, seed=args.seed)
    stream = make_scenario(test, spec)
    try:
        with open(args.out, "w", newline="") as fh:
            if args.format == "csv":
                w = csv.writer(fh)
                w.writerow(("position", "index", "label"))
                w.writerows(stream.manifest())
            else:
                for pos, idx, lbl in stream.manifest():
                    fh.write(json.dumps({"position": pos, "index": idx, "label": lbl}) + "\n")
    except OSError as exc:
        raise InputError(f"cannot write {args.out}: {exc}") from exc
    print(dumps({"manifest": args.out, "length": len(stream), "scenario": spec.name, "seed": spec.seed}))


def build_parser():
    parser = argparse.ArgumentParser(prog="delta-tta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-source", help="train a source model and write a checkpoint")
    _add_task_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("run", help="one adaptation episode")
    _add_task_args(p)
    _add_scenario_args(p)
    _add_method_args(p)
    p.add_argument("--method", default="tent+delta")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--seed", type=int, default=2020)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="methods x scenarios x seeds")
    _add_task_args(p)
    _add_scenario_args(p, many=True)
    _add_method_args(p)
    p.add_argument("--methods", default="tent,tent+delta")
    p.add_argument("--seeds", default="2020-2029")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-stream", help="write a stream manifest (position, index, label)")
    _add_task_args(p)
    _add_scenario_args(p)
    p.add_argument("--seed", type=int, default=2020)
    p.add_argument("--format", choices=("json-lines", "csv"), default="csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_stream)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except DeltaError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
