"""Benchmark models and measurement harness.

Every model is a parallel-for body built twice from the same definition:
once kept as a parfor block (executed by the SIMD interpreter, dispatch
count grows with the batch) and once statically vectorized (dispatch count
independent of the batch).  Wall time and dispatch counts feed a CSV with
the columns ``model,mode,batch,wall_time_s,dispatch_count,throughput``.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .apps import jacobian, per_example_gradients, pfor
from .builder import GraphBuilder
from .errors import UnknownModel
from .graph import Graph
from .interp import Executor, RngState, VariableStore
from .tensor import DType

CSV_HEADER = ["model", "mode", "batch", "wall_time_s", "dispatch_count", "throughput"]

MODES = ("parfor", "fallback", "vectorize")


@dataclass
class BenchRecord:
    model: str
    mode: str
    batch: int
    wall_time_s: float
    dispatch_count: int
    throughput: float

    def row(self) -> list:
        return [self.model, self.mode, self.batch,
                f"{self.wall_time_s:.6f}", self.dispatch_count,
                f"{self.throughput:.2f}"]


# --------------------------------------------------------------------------
# model builders: build(batch, mode) -> Graph with outputs set


def _rng(batch: int):
    return np.random.default_rng(batch * 7919 + 11)


def build_linear(batch: int, mode: str) -> Graph:
    npr = _rng(batch)
    b = GraphBuilder()
    X = b.const(npr.standard_normal((batch, 64)))
    W = b.const(npr.standard_normal((64, 64)) / 8.0)

    def body(bb, i):
        x = bb.gather(X, i)
        y = bb.matmul(bb.reshape(x, [1, 64]), bb._imp(W))
        return [bb.reshape(y, [64])]

    b.graph.set_outputs(pfor(b, body, batch, mode=mode))
    return b.graph


def _maxpool2x2(bb, x, h: int, w: int):
    """2x2 max pooling of [1, h, w, c], composed from gather/max/transpose."""
    even_h = bb.const(np.arange(0, h, 2, dtype=np.int64), DType.I64)
    odd_h = bb.const(np.arange(1, h, 2, dtype=np.int64), DType.I64)
    even_w = bb.const(np.arange(0, w, 2, dtype=np.int64), DType.I64)
    odd_w = bb.const(np.arange(1, w, 2, dtype=np.int64), DType.I64)
    t = bb.transpose(x, [1, 0, 2, 3])                       # [h,1,w,c]
    m = bb.max_(bb.gather(t, even_h), bb.gather(t, odd_h))  # [h/2,1,w,c]
    t = bb.transpose(m, [2, 1, 0, 3])                       # [w,1,h/2,c]
    m = bb.max_(bb.gather(t, even_w), bb.gather(t, odd_w))  # [w/2,1,h/2,c]
    return bb.transpose(m, [2, 1, 0, 3]), h // 2, w // 2    # [h/2,1... -> below]


def build_mnist_like(batch: int, mode: str) -> Graph:
    npr = _rng(batch)
    b = GraphBuilder()
    X = b.const(npr.standard_normal((batch, 28, 28, 1)))
    F = b.const(npr.standard_normal((3, 3, 1, 8)) / 3.0)
    D = b.const(npr.standard_normal((14 * 14 * 8, 10)) / 40.0)

    def body(bb, i):
        x = bb.reshape(bb.gather(bb._imp(X), i), [1, 28, 28, 1])
        h = bb.relu(bb.conv2d(x, bb._imp(F)))
        p, ph, pw = _maxpool2x2(bb, h, 28, 28)
        # pooled tensor is [ph, 1, pw, c]; flatten and apply the dense layer
        flat = bb.reshape(p, [1, ph * pw * 8])
        y = bb.matmul(flat, bb._imp(D))
        return [bb.reshape(y, [10])]

    b.graph.set_outputs(pfor(b, body, batch, mode=mode))
    return b.graph


def build_lstm_unrolled(batch: int, mode: str, steps: int = 10, units: int = 32) -> Graph:
    npr = _rng(batch)
    b = GraphBuilder()
    X = b.const(npr.standard_normal((batch, steps, units)))
    Wg = b.const(npr.standard_normal((2 * units, 4 * units)) / 8.0)
    Bg = b.const(npr.standard_normal((1, 4 * units)) / 8.0)

    def body(bb, i):
        x = bb.gather(bb._imp(X), i)  # [steps, units]
        h = bb.const(np.zeros((1, units)))
        c = bb.const(np.zeros((1, units)))
        for t in range(steps):
            xt = bb.reshape(bb.gather(x, bb.i64(t)), [1, units])
            z = bb.add(bb.matmul(bb.concat([xt, h], 1), bb._imp(Wg)), bb._imp(Bg))
            gates = bb.reshape(z, [4, units])
            ig = bb.sigmoid(bb.reshape(bb.gather(gates, bb.i64(0)), [1, units]))
            fg = bb.sigmoid(bb.reshape(bb.gather(gates, bb.i64(1)), [1, units]))
            og = bb.sigmoid(bb.reshape(bb.gather(gates, bb.i64(2)), [1, units]))
            gg = bb.tanh(bb.reshape(bb.gather(gates, bb.i64(3)), [1, units]))
            c = bb.add(bb.mul(fg, c), bb.mul(ig, gg))
            h = bb.mul(og, bb.tanh(c))
        return [bb.reshape(h, [units])]

    b.graph.set_outputs(pfor(b, body, batch, mode=mode))
    return b.graph


def build_per_example_grad(batch: int, mode: str) -> Graph:
    npr = _rng(batch)
    b = GraphBuilder()
    X = b.const(npr.standard_normal((batch, 32)))
    W = b.const(npr.standard_normal((32, 16)) / 6.0)

    def loss_fn(bb, x):
        h = bb.tanh(bb.matmul(bb.reshape(x, [1, 32]), bb._imp(W)))
        return bb.reduce_sum(bb.square(h), [0, 1])

    grads = per_example_gradients(b, X, loss_fn, [W], mode=mode)
    b.graph.set_outputs(grads)
    return b.graph


def build_jacobian(batch: int, mode: str) -> Graph:
    npr = _rng(batch)
    b = GraphBuilder()
    x = b.const(npr.standard_normal((64,)))
    W = b.const(npr.standard_normal((64, batch)) / 8.0)
    y = b.tanh(b.reshape(b.matmul(b.reshape(x, [1, 64]), W), [batch]))
    J = jacobian(b, y, x, mode=mode)
    b.graph.set_outputs([J])
    return b.graph


MODELS = {
    "linear": build_linear,
    "mnist_like": build_mnist_like,
    "lstm_unrolled": build_lstm_unrolled,
    "per_example_grad": build_per_example_grad,
    "jacobian": build_jacobian,
}


# --------------------------------------------------------------------------
# measurement


def run_bench(model: str, batch: int, mode: str, repeats: int = 3,
              budget: int | None = None) -> BenchRecord:
    if model not in MODELS:
        raise UnknownModel(f"unknown model {model!r}; choose from {sorted(MODELS)}")
    g = MODELS[model](batch, mode)
    best = float("inf")
    dispatches = 0
    for _ in range(max(1, repeats)):
        ex = Executor(g, store=VariableStore(g.variables), rng=RngState(0), budget=budget)
        t0 = time.perf_counter()
        ex.run()
        dt = time.perf_counter() - t0
        best = min(best, dt)
        dispatches = ex.dispatch_count
    return BenchRecord(model, mode, batch, best, dispatches,
                       batch / best if best > 0 else float("inf"))


def write_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.row())


def format_table(records) -> str:
    lines = [",".join(CSV_HEADER)]
    for r in records:
        lines.append(",".join(str(c) for c in r.row()))
    return "\n".join(lines)
