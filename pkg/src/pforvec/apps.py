"""High-level applications of the parallel-for construct.

`pfor` builds a loop body once and either keeps it as a parfor block
(interpreted under SIMD semantics) or statically vectorizes it in place.
On top of it: full Jacobians, per-example gradients of a shared model, and
`map_fn`-style auto-batching over a dynamic leading dimension.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .autodiff import gradient
from .builder import GraphBuilder, _CaptureSet
from .graph import Graph, shape_is_static
from .errors import NonDifferentiableOp, VectorizeError
from .tensor import DType
from .vectorize import (
    Diagnostics,
    Policy,
    WrappedValue,
    default_registry,
    vectorize_body,
)


def pfor(b: GraphBuilder, body_fn, iters, mode: str = "vectorize",
         registry=None, policy: Policy | None = None,
         diags: Diagnostics | None = None) -> list:
    """Parallel loop over `iters`; body_fn(bb, i) returns the per-iteration
    outputs.  Returns stacked refs in b's graph.

    mode="parfor" keeps the loop as a block for the SIMD interpreter;
    mode="vectorize" rewrites it into vectorized ops at build time;
    mode="fallback" also rewrites, but forces every convertible op down the
    sequential loop path (a baseline for measuring vectorization wins).
    """
    if mode == "parfor":
        return b.parfor(body_fn, iters)
    if mode == "fallback":
        forced = frozenset(default_registry()) | (policy.force_fallback if policy else frozenset())
        policy = Policy(force_fallback=forced, stateful_assign_fallback=True)
    elif mode != "vectorize":
        raise ValueError(f"unknown pfor mode {mode!r}")
    iters_ref = b._imp(iters if not isinstance(iters, (int, np.integer))
                       else T.scalar(int(iters), DType.I64))
    capset = _CaptureSet()
    bb = GraphBuilder(parent=b, capset=capset)
    i = bb.graph.add_node("loop_var")
    outs = body_fn(bb, bb.graph.out(i))
    outs = list(outs) if isinstance(outs, (list, tuple)) else [outs]
    bb.graph.set_outputs([bb._imp(o) for o in outs])
    caps = [WrappedValue(r, False) for r in capset.refs]
    refs, _ = vectorize_body(bb.graph, caps, iters_ref, b, registry, policy, diags)
    return refs


def jacobian(b: GraphBuilder, output, wrt, mode: str = "vectorize") -> "Ref":
    """d(output)/d(wrt) with shape output.shape + wrt.shape.

    Runs one backward pass per output element inside a parallel loop; the
    seed for element i is a one-hot cotangent built with a scatter.
    """
    g = b.graph
    o_sh = g.ref_shape(output)
    w_sh = g.ref_shape(wrt)
    if not shape_is_static(o_sh) or not shape_is_static(w_sh):
        raise NonDifferentiableOp("jacobian requires static output and input shapes")
    m = int(np.prod(o_sh)) if o_sh else 1

    def body(bb, i):
        seed = bb.scatter_add_rows(i, bb.f64(1.0), m)
        if o_sh != (m,):
            seed = bb.reshape(seed, o_sh)
        (grad,) = gradient(g, output, [wrt], emit=bb, seed=seed)
        return [bb._imp(grad)]

    (rows,) = pfor(b, body, m, mode=mode)
    return b.reshape(rows, tuple(o_sh) + tuple(w_sh))


def per_example_gradients(b: GraphBuilder, inputs, loss_fn, wrt,
                          mode: str = "vectorize") -> list:
    """Per-example gradients of a shared-parameter model.

    `inputs` is a batched tensor [n, ...]; loss_fn(bb, x) builds the scalar
    loss of one example.  Returns, for each ref in `wrt`, the stacked
    per-example gradients with shape [n] + wrt.shape.
    """
    sh = b.graph.ref_shape(inputs)
    if sh is None or not sh or sh[0] is None:
        raise VectorizeError("per_example_gradients needs a known batch dimension")
    n = sh[0]

    def body(bb, i):
        x = bb.gather(inputs, i)
        loss = loss_fn(bb, x)
        return gradient(bb.graph, loss, [bb._imp(w) for w in wrt], emit=bb)

    return pfor(b, body, n, mode=mode)


def map_fn(b: GraphBuilder, fn, xs, mode: str = "vectorize"):
    """Auto-batching: apply a per-example function over a dynamic leading dim."""
    n = b.dim0(xs)

    def body(bb, i):
        r = fn(bb, bb.gather(xs, i))
        return list(r) if isinstance(r, (list, tuple)) else [r]

    outs = pfor(b, body, n, mode=mode)
    return outs if len(outs) != 1 else outs[0]
