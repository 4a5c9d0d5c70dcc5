"""
Command line entry point: ``python -m hradapt <command>``.

Commands mirror the experiment pipeline: ``gen``, ``train``, ``eval``,
``baseline``, ``render`` and ``verify``.  Settings come from an optional
JSON config file (``--config``) and are overridden by flags.  Failures
print one JSON line prefixed with ``error:`` on stderr and exit with
status 2.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import harness
from .harness import ExperimentConfig

_FLAGS = [
    ("pde", str),
    ("domain", str),
    ("train_count", int),
    ("eval_count", int),
    ("ref_depth", int),
    ("horizon", int),
    ("target_elements", int),
    ("alpha_count", int),
    ("alpha_min", float),
    ("alpha_max", float),
    ("theta_count", int),
    ("heuristic_steps", int),
    ("seed", int),
    ("out_dir", str),
]
_TRAIN_FLAGS = [
    ("iterations", int),
    ("transitions_per_iter", int),
    ("epochs", int),
    ("minibatch", int),
    ("phase1_iters", int),
    ("lr", float),
    ("p_rand", float),
]


def _add_common(p):
    p.add_argument("--config", help="JSON file with ExperimentConfig fields")
    for name, typ in _FLAGS:
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    p.add_argument("--no-time", dest="record_time", action="store_false", default=None,
                   help="write 0 in the time_s column (byte-reproducible output)")


def _config(args):
    base = {}
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)
    for name, _ in _FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            base[name] = v
    if getattr(args, "record_time", None) is not None:
        base["record_time"] = args.record_time
    train = dict(base.get("train", {}))
    for name, _ in _TRAIN_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            train[name] = v
    base["train"] = train
    return ExperimentConfig(**base)


def build_parser():
    ap = argparse.ArgumentParser(prog="hradapt", description="hr-adaptive mesh refinement experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the train/eval dataset")
    _add_common(p)

    p = sub.add_parser("train", help="train a policy on the train split")
    _add_common(p)
    for name, typ in _TRAIN_FLAGS:
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint and baselines over the penalty sweep")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--methods", default="learned,uniform,oracle,zz")

    p = sub.add_parser("baseline", help="evaluate only the classical baselines")
    _add_common(p)
    p.add_argument("--methods", default="uniform,oracle,zz")

    p = sub.add_parser("render", help="draw a mesh file as SVG")
    p.add_argument("mesh")
    p.add_argument("--field")
    p.add_argument("--quality", action="store_true")
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("verify", help="run randomised invariant checks")
    p.add_argument("-n", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    return ap


def run(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "gen":
        cfg = _config(args)
        files = harness.gen_dataset(cfg)
        print(f"wrote {len(files)} instances under {os.path.join(cfg.out_dir, 'dataset')}")
    elif args.command == "train":
        cfg = _config(args)
        log = None if args.quiet else (lambda r: print(json.dumps(r), flush=True))
        path, _ = harness.cmd_train(cfg, log=log)
        print(f"checkpoint {path}")
    elif args.command in ("eval", "baseline"):
        cfg = _config(args)
        methods = [m for m in args.methods.split(",") if m]
        if args.command == "baseline":
            methods = [m for m in methods if m != "learned"]
        path, rows = harness.cmd_eval(getattr(args, "checkpoint", None), cfg, methods)
        print(f"wrote {len(rows)} rows; pareto summary {path}")
    elif args.command == "render":
        print(harness.cmd_render(args.mesh, args.output, args.field, args.quality))
    elif args.command == "verify":
        results = harness.run_invariant_checks(args.n, args.seed)
        for name, ok, detail in results:
            print(f"{'PASS' if ok else 'FAIL'} {name} {detail}".rstrip())
        if not all(ok for _, ok, _ in results):
            return 1
    return 0


def main(argv=None):
    try:
        return run(argv)
    except SystemExit:
        raise
    except Exception as exc:  # report every failure in one machine-readable line
        print("error: " + json.dumps({"type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
