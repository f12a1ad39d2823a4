"""Reverse-mode differentiation over straight-line graph regions.

Gradients are themselves graph fragments: each op kind has a vector-Jacobian
rule that emits the backward computation through a GraphBuilder.  Passing a
nested builder (for example a parallel-for body) emits the backward pass
there, capturing forward tensors from the enclosing graph automatically --
this is how per-output-element Jacobian loops are built.

Control-flow blocks and stateful writes have no gradient; comparison, cast
and shape-query ops act as gradient stops (zero cotangent flows through).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .builder import GraphBuilder
from .errors import NonDifferentiableOp, NonScalarOutput
from .graph import BLOCK_KINDS, Graph, Node, Ref, shape_is_static
from .tensor import DType

# kinds through which no cotangent flows; their inputs get zero gradient
STOP_KINDS = frozenset({
    "less", "equal", "logical_not", "cast", "where_true", "dim0", "range_vec",
    "complement", "constant", "placeholder", "capture", "carried", "loop_var",
    "read_variable", "random_uniform",
})

# which data inputs of an op carry gradient
_DIFF_INPUTS = {
    "gather_rows": (True, False),
    "scatter_add_rows": (False, True),
    "slice_leading": (True, False),
    "tile_leading": (True, False),
}


def _diff_input_mask(node: Node):
    if node.kind == "scatter_rows":
        k = node.attrs["num_parts"]
        return (False,) * k + (True,) * k + (False,)
    mask = _DIFF_INPUTS.get(node.kind)
    if mask is not None:
        return mask
    return (True,) * len(node.inputs)


def _static_shape(g: Graph, ref) -> tuple:
    s = g.ref_shape(ref)
    if not shape_is_static(s):
        raise NonDifferentiableOp(f"gradient needs a static shape for {ref}")
    return s


def _unbroadcast(b: GraphBuilder, cot, from_shape, to_shape):
    """Reduce a cotangent over broadcast axes back to the operand shape."""
    if from_shape == to_shape:
        return cot
    extra = len(from_shape) - len(to_shape)
    axes = list(range(extra))
    for i, d in enumerate(to_shape):
        if d == 1 and from_shape[extra + i] != 1:
            axes.append(extra + i)
    if axes:
        cot = b.reduce_sum(cot, axes)
    return b.reshape(cot, to_shape)


def _vjp(g: Graph, node: Node, cot, b: GraphBuilder):
    """Input cotangents of one node; entries are None for no-gradient inputs."""
    kind = node.kind
    ins = [Ref(g, n, p) for n, p in node.inputs]
    out = Ref(g, node.id, 0)
    o_sh = _static_shape(g, out)

    def sh(i):
        return _static_shape(g, ins[i])

    if kind == "add":
        return [_unbroadcast(b, cot, o_sh, sh(0)), _unbroadcast(b, cot, o_sh, sh(1))]
    if kind == "sub":
        return [_unbroadcast(b, cot, o_sh, sh(0)),
                _unbroadcast(b, b.neg(cot), o_sh, sh(1))]
    if kind == "mul":
        return [_unbroadcast(b, b.mul(cot, ins[1]), o_sh, sh(0)),
                _unbroadcast(b, b.mul(cot, ins[0]), o_sh, sh(1))]
    if kind == "div":
        ga = b.div(cot, ins[1])
        gb = b.neg(b.div(b.mul(cot, ins[0]), b.mul(ins[1], ins[1])))
        return [_unbroadcast(b, ga, o_sh, sh(0)), _unbroadcast(b, gb, o_sh, sh(1))]
    if kind in ("max", "min"):
        # ties route the gradient to the first operand
        lt = b.less(ins[0], ins[1]) if kind == "max" else b.less(ins[1], ins[0])
        m_b = b.cast(lt, DType.F64)
        m_a = b.cast(b.logical_not(lt), DType.F64)
        return [_unbroadcast(b, b.mul(cot, m_a), o_sh, sh(0)),
                _unbroadcast(b, b.mul(cot, m_b), o_sh, sh(1))]
    if kind == "neg":
        return [b.neg(cot)]
    if kind == "exp":
        return [b.mul(cot, out)]
    if kind == "log":
        return [b.div(cot, ins[0])]
    if kind == "relu":
        mask = b.cast(b.less(b.f64(0.0), ins[0]), DType.F64)
        return [b.mul(cot, mask)]
    if kind == "tanh":
        return [b.mul(cot, b.sub(b.f64(1.0), b.mul(out, out)))]
    if kind == "sigmoid":
        return [b.mul(cot, b.mul(out, b.sub(b.f64(1.0), out)))]
    if kind == "square":
        return [b.mul(cot, b.mul(b.f64(2.0), ins[0]))]
    if kind == "matmul":
        sa, sb = sh(0), sh(1)
        if len(sa) == 2:
            return [b.matmul(cot, b.transpose(ins[1], [1, 0])),
                    b.matmul(b.transpose(ins[0], [1, 0]), cot)]
        return [b.matmul(cot, b.transpose(ins[1], [0, 2, 1])),
                b.matmul(b.transpose(ins[0], [0, 2, 1]), cot)]
    if kind == "conv2d":
        sf = sh(1)
        k1, k2, c1, c2 = sf
        dx = b.conv2d_input_grad(cot, ins[1])
        cols = b.im2col(ins[0], k1, k2)
        flat_c = b.reshape(cols, [-1, k1 * k2 * c1])
        flat_g = b.reshape(cot, [-1, c2])
        df = b.reshape(b.matmul(b.transpose(flat_c, [1, 0]), flat_g), [k1, k2, c1, c2])
        return [dx, df]
    if kind == "reduce_sum":
        x_sh = sh(0)
        axes = T._normalize_axes(node.attrs["axes"], len(x_sh))
        keep = [1 if i in axes else d for i, d in enumerate(x_sh)]
        expanded = b.reshape(cot, keep)
        ones = b.const(T.ones(x_sh, g.ref_dtype(ins[0])))
        return [b.mul(ones, expanded)]
    if kind == "concat":
        axis = node.attrs["axis"]
        rank = len(o_sh)
        ax = axis + rank if axis < 0 else axis
        perm = [ax] + [i for i in range(rank) if i != ax]
        inv = [perm.index(i) for i in range(rank)]
        moved = b.transpose(cot, perm) if ax != 0 else cot
        grads = []
        offset = 0
        for i in range(len(ins)):
            d = sh(i)[ax]
            idx = b.const(np.arange(offset, offset + d, dtype=np.int64), DType.I64)
            part = b.gather(moved, idx)
            grads.append(b.transpose(part, inv) if ax != 0 else part)
            offset += d
        return grads
    if kind == "gather_rows":
        total = sh(0)[0]
        return [b.scatter_add_rows(ins[1], cot, total), None]
    if kind == "scatter_add_rows":
        return [None, b.gather(cot, ins[0])]
    if kind == "scatter_rows":
        k = node.attrs["num_parts"]
        grads: list = [None] * len(ins)
        for i in range(k):
            grads[k + i] = b.gather(cot, ins[i])
        return grads
    if kind == "reshape":
        return [b.reshape(cot, sh(0))]
    if kind == "transpose":
        perm = list(node.attrs["perm"])
        inv = [perm.index(i) for i in range(len(perm))]
        return [b.transpose(cot, inv)]
    if kind == "stack":
        return [b.gather(cot, b.i64(i)) for i in range(len(ins))]
    if kind == "slice_leading":
        total = sh(0)[0]
        idx = b.const(np.arange(o_sh[0], dtype=np.int64), DType.I64)
        return [b.scatter_add_rows(idx, cot, total), None]
    if kind == "tile_leading":
        return [b.reduce_sum(cot, [0]), None]
    raise NonDifferentiableOp(f"no gradient rule for op kind {kind!r}")


def _active_set(g: Graph, out_nid: int) -> set:
    """Nodes backward-reachable from the output along differentiable edges."""
    active = set()
    stack = [out_nid]
    while stack:
        nid = stack.pop()
        if nid in active:
            continue
        node = g.nodes[nid]
        if node.kind in BLOCK_KINDS:
            raise NonDifferentiableOp(
                f"node {nid}: gradients through {node.kind!r} blocks are not supported")
        active.add(nid)
        if node.kind in STOP_KINDS:
            continue
        mask = _diff_input_mask(node)
        for (p_nid, _), m in zip(node.inputs, mask):
            if m:
                stack.append(p_nid)
    return active


def gradient(g: Graph, output, wrt, emit: GraphBuilder | None = None, seed=None):
    """Cotangents of `output` with respect to each ref in `wrt`.

    Backward nodes are emitted through `emit` (defaults to a builder over the
    forward graph itself).  Without an explicit `seed` the output must be a
    scalar and is seeded with 1.  Unreachable inputs get zero gradients.
    """
    b = emit if emit is not None else GraphBuilder(graph=g)
    out_nid, out_port = g._resolve(output)
    if out_port != 0:
        raise NonDifferentiableOp("gradient only supports port-0 outputs")
    if seed is None:
        o_sh = g.ref_shape((out_nid, out_port))
        if o_sh != ():
            raise NonScalarOutput(f"gradient of a non-scalar output {o_sh} needs a seed")
        seed = b.f64(1.0)
    else:
        seed = b._imp(seed)

    wrt = list(wrt)
    wrt_keys = [g._resolve(r) for r in wrt]
    active = _active_set(g, out_nid)

    cots: dict = {(out_nid, out_port): seed}
    for node in reversed(g.topo_order()):
        if node.id not in active or node.kind in STOP_KINDS:
            continue
        cot = cots.get((node.id, 0))
        if cot is None:
            continue
        if node.output_arity != 1:
            raise NonDifferentiableOp(f"node {node.id}: multi-output gradients unsupported")
        in_cots = _vjp(g, node, cot, b)
        mask = _diff_input_mask(node)
        for (key, ic, m) in zip(node.inputs, in_cots, mask):
            if not m or ic is None:
                continue
            prev = cots.get(key)
            cots[key] = ic if prev is None else b.add(prev, ic)

    grads = []
    for key, ref in zip(wrt_keys, wrt):
        got = cots.get(key)
        if got is None:
            s = g.ref_shape(key)
            d = g.ref_dtype(key)
            if not shape_is_static(s):
                raise NonDifferentiableOp(f"zero gradient for {ref} needs a static shape")
            got = b.const(T.zeros(s, d))
        grads.append(got)
    return grads
