"""Command-line interface: differential verification, benchmarks, demos."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import serialize
from .bench import MODELS, MODES, format_table, run_bench, write_csv
from .builder import GraphBuilder
from .errors import PforVecError, UnknownDemo
from .interp import Executor
from .randgen import DEFAULT_WEIGHTS, check_case, generate_case
from .tensor import DType


def _parse_weights(text: str) -> dict:
    weights = {}
    for item in text.split(","):
        key, _, val = item.partition("=")
        key = key.strip()
        if key not in DEFAULT_WEIGHTS:
            raise ValueError(f"unknown weight category {key!r}; "
                             f"choose from {sorted(DEFAULT_WEIGHTS)}")
        weights[key] = float(val)
    return weights


N_SWEEP = (0, 1, 3, 7)


def cmd_verify(args) -> int:
    weights = _parse_weights(args.weights) if args.weights else None
    failures = []
    for k in range(args.count):
        seed = args.seed + k
        ok = True
        for n in N_SWEEP:
            case = generate_case(seed, max_depth=args.max_depth, weights=weights, n=n)
            result = check_case(case)
            if args.explain and result.diagnostics is not None:
                print(f"--- seed {seed} n={n} "
                      f"(oracle {result.oracle_dispatches} dispatches, "
                      f"vectorized {result.vectorized_dispatches})")
                print(result.diagnostics.report())
            if not result.ok:
                ok = False
                print(f"FAIL seed {seed} n={n}: {result.message}")
                if args.dump:
                    os.makedirs(args.dump, exist_ok=True)
                    path = os.path.join(args.dump, f"case_{seed}_n{n}.pfg")
                    serialize.dump(case.graph, path)
                    print(f"  wrote {path}")
        if not ok:
            failures.append(seed)
    total = args.count
    print(f"verify: {total - len(failures)}/{total} cases matched "
          f"(seed {args.seed}, max depth {args.max_depth})")
    return 1 if failures else 0


def cmd_bench(args) -> int:
    batches = [int(x) for x in args.batches.split(",")]
    models = sorted(MODELS) if args.model == "all" else [args.model]
    records = []
    for model in models:
        for batch in batches:
            for mode in MODES:
                records.append(run_bench(model, batch, mode, repeats=args.repeats))
    print(format_table(records))
    if args.out:
        write_csv(records, args.out)
        print(f"wrote {args.out}")
    return 0


def _demo_jacobian():
    b = GraphBuilder()
    from .apps import jacobian

    x = b.const(np.array([1.0, 2.0, 3.0]))
    y = b.mul(x, x)
    J = jacobian(b, y, x)
    b.graph.set_outputs([J])
    (res,) = Executor(b.graph).run()
    print("y = x * x at x = [1, 2, 3]")
    print("jacobian dy/dx (diagonal 2x):")
    print(res.data)


def _demo_per_example():
    from .apps import per_example_gradients

    npr = np.random.default_rng(0)
    b = GraphBuilder()
    X = b.const(npr.standard_normal((4, 3)))
    W = b.const(npr.standard_normal((3, 2)))

    def loss_fn(bb, x):
        h = bb.matmul(bb.reshape(x, [1, 3]), bb._imp(W))
        return bb.reduce_sum(bb.square(h), [0, 1])

    (grads,) = per_example_gradients(b, X, loss_fn, [W])
    b.graph.set_outputs([grads])
    (res,) = Executor(b.graph).run()
    print("per-example dLoss/dW for a 4-example batch:", res.shape)
    print(res.data)


def _demo_map():
    from .apps import map_fn

    b = GraphBuilder()
    xs = b.placeholder("xs", DType.F64, (None, 3))
    out = map_fn(b, lambda bb, x: bb.tanh(bb.reduce_sum(bb.square(x), [0])), xs)
    b.graph.set_outputs([out])
    feed = np.arange(6.0).reshape(2, 3)
    (res,) = Executor(b.graph).run(feeds={"xs": feed})
    print("map over a dynamic batch of rows; tanh(sum(x^2)) per row:")
    print(res.data)


DEMOS = {
    "jacobian": _demo_jacobian,
    "per_example": _demo_per_example,
    "map": _demo_map,
}


def cmd_demo(args) -> int:
    if args.name not in DEMOS:
        raise UnknownDemo(f"unknown demo {args.name!r}; choose from {sorted(DEMOS)}")
    DEMOS[args.name]()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pforvec",
                                description="statically vectorized parallel-for")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="differential-test the vectorizer")
    v.add_argument("--seed", type=int, default=42)
    v.add_argument("--count", type=int, default=200)
    v.add_argument("--max-depth", type=int, default=8)
    v.add_argument("--explain", action="store_true",
                   help="print per-node conversion paths for every case")
    v.add_argument("--dump", metavar="DIR",
                   help="serialize failing cases into this directory")
    v.add_argument("--weights", metavar="K=V,...",
                   help="generator category weights, e.g. elementwise=0.5,control=0.3")
    v.set_defaults(fn=cmd_verify)

    bch = sub.add_parser("bench", help="run benchmark models")
    bch.add_argument("--model", default="all", choices=["all"] + sorted(MODELS))
    bch.add_argument("--batches", default="1,16,256")
    bch.add_argument("--repeats", type=int, default=3)
    bch.add_argument("--out", metavar="FILE.csv")
    bch.set_defaults(fn=cmd_bench)

    d = sub.add_parser("demo", help="run a small worked example")
    d.add_argument("name", choices=sorted(DEMOS))
    d.set_defaults(fn=cmd_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (PforVecError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
