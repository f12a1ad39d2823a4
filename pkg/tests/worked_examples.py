"""Shared builders for small worked-example loop bodies.

Each function returns a Graph whose outputs come from a parfor block; tests
vectorize these graphs and compare against golden serialized forms and
against the SIMD interpreter.
"""

import numpy as np

from pforvec import GraphBuilder


def pairwise_sum_diff():
    """Body gathers a[i], b[i] and emits their sum and difference."""
    b = GraphBuilder()
    a = b.const(np.array([1.0, 2.0, 3.0, 4.0]))
    c = b.const(np.array([10.0, 20.0, 30.0, 40.0]))

    def body(bb, i):
        x = bb.gather(a, i)
        y = bb.gather(c, i)
        return [bb.add(x, y), bb.sub(x, y)]

    b.graph.set_outputs(b.parfor(body, 4))
    return b.graph


def gather_identity():
    """Body is just gather(X, i) with X.shape[0] == n: vectorizes to X itself."""
    b = GraphBuilder()
    X = b.const(np.arange(12.0).reshape(4, 3))
    b.graph.set_outputs(b.parfor(lambda bb, i: [bb.gather(X, i)], 4))
    return b.graph


def matmul_fold():
    """matmul of a loop-varying lhs against an invariant rhs: fold-reshape path."""
    b = GraphBuilder()
    npr = np.random.default_rng(7)
    X = b.const(npr.standard_normal((4, 2, 3)))
    Y = b.const(npr.standard_normal((3, 5)))

    def body(bb, i):
        return [bb.matmul(bb.gather(bb._imp(X), i), bb._imp(Y))]

    b.graph.set_outputs(b.parfor(body, 4))
    return b.graph


def conv2d_fold():
    """conv2d with a loop-varying image and invariant filter: batch folding."""
    b = GraphBuilder()
    npr = np.random.default_rng(8)
    X = b.const(npr.standard_normal((3, 1, 4, 4, 1)))
    F = b.const(npr.standard_normal((2, 2, 1, 2)))

    def body(bb, i):
        return [bb.conv2d(bb.gather(bb._imp(X), i), bb._imp(F))]

    b.graph.set_outputs(b.parfor(body, 3))
    return b.graph


def reduce_sum_renumber():
    """reduce_sum over axes [1, -1] of a loop-varying rank-3 value."""
    b = GraphBuilder()
    npr = np.random.default_rng(9)
    X = b.const(npr.standard_normal((4, 2, 3, 2)))

    def body(bb, i):
        return [bb.reduce_sum(bb.gather(bb._imp(X), i), [1, -1])]

    b.graph.set_outputs(b.parfor(body, 4))
    return b.graph


def concat_shift():
    """concat of two loop-varying values along axis 0: axis shifts by one."""
    b = GraphBuilder()
    npr = np.random.default_rng(10)
    A = b.const(npr.standard_normal((3, 2, 4)))
    B = b.const(npr.standard_normal((3, 3, 4)))

    def body(bb, i):
        return [bb.concat([bb.gather(bb._imp(A), i), bb.gather(bb._imp(B), i)], 0)]

    b.graph.set_outputs(b.parfor(body, 3))
    return b.graph


def broadcast_reshape():
    """add of an invariant [y,z] against a loop-varying [z]: rank padding."""
    b = GraphBuilder()
    npr = np.random.default_rng(11)
    X = b.const(npr.standard_normal((3, 2)))
    Y = b.const(npr.standard_normal((4, 2)))

    def body(bb, i):
        return [bb.add(bb._imp(X), bb.gather(bb._imp(Y), i))]

    b.graph.set_outputs(b.parfor(body, 4))
    return b.graph


GOLDEN_EXAMPLES = {
    "pairwise_sum_diff": pairwise_sum_diff,
    "gather_identity": gather_identity,
    "matmul_fold": matmul_fold,
    "conv2d_fold": conv2d_fold,
    "reduce_sum_renumber": reduce_sum_renumber,
    "concat_shift": concat_shift,
    "broadcast_reshape": broadcast_reshape,
}


def cond_example():
    """i < 2 ? 2*i : i + 10 over n = 4 iterations: [0, 2, 12, 13]."""
    b = GraphBuilder()

    def body(bb, i):
        pred = bb.less(i, bb.i64(2))
        (r,) = bb.cond(pred,
                       lambda tb: [tb.mul(tb._imp(i), tb.i64(2))],
                       lambda eb: [eb.add(eb._imp(i), eb.i64(10))])
        return [r]

    b.graph.set_outputs(b.parfor(body, 4))
    return b.graph


def while_example():
    """A counter runs from 0 up to the loop index: outputs [0, 1, ..., n-1]."""
    b = GraphBuilder()

    def body(bb, i):
        (r,) = bb.while_loop(
            [bb.i64(0)],
            lambda cb, car: cb.less(car[0], cb._imp(i)),
            lambda wb, car: [wb.add(car[0], wb.i64(1))])
        return [r]

    b.graph.set_outputs(b.parfor(body, 5))
    return b.graph
