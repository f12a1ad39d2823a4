"""Greedy conversion of parallel-for blocks into vectorized graphs.

Each loop-body node is dispatched, in topological order, to a converter from
a registry keyed by op kind.  Values are wrapped as either *stacked* (leading
axis = iteration count) or loop-invariant (no stacking).  Conditionals
partition the active index set and scatter partial results back; while loops
carry the active index vector alongside materialized stacked state.  Nodes
without a converter fall back to a sequential loop, preserving correctness.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .builder import GraphBuilder, _CaptureSet
from .errors import StatefulNotSupported, VectorizeError
from .graph import (
    BINARY_KINDS,
    BLOCK_KINDS,
    STATEFUL_KINDS,
    UNARY_KINDS,
    Graph,
    Node,
    Ref,
    shape_is_static,
)
from .tensor import DType, TensorValue


@dataclass(frozen=True)
class WrappedValue:
    """A tensor in the generated graph, plus whether it is stacked."""

    ref: Ref
    stacked: bool


class _LazyReplacement:
    """Stacked iteration-id vector, only emitted into the graph when used."""

    stacked = True

    def __init__(self, ctx: "ConversionContext"):
        self._ctx = ctx
        self._ref: Ref | None = None

    @property
    def ref(self) -> Ref:
        if self._ref is None:
            self._ref = self._ctx.builder.range_vec(self._ctx.iters)
        return self._ref


@dataclass
class Policy:
    # kinds forced through the sequential fallback (test / bench hook)
    force_fallback: frozenset = frozenset()
    # route assign-of-variant-value to the sequential fallback instead of erroring
    stateful_assign_fallback: bool = False


@dataclass
class Diagnostics:
    """Which conversion path each body node took, and why."""

    entries: list = field(default_factory=list)  # (node_id, kind, path, reason)

    def record(self, node: Node, path: str, reason: str = ""):
        self.entries.append((node.id, node.kind, path, reason))

    @property
    def fallback_count(self) -> int:
        return sum(1 for e in self.entries if e[2] == "fallback")

    def report(self) -> str:
        lines = []
        for nid, kind, path, reason in self.entries:
            suffix = f" ({reason})" if reason else ""
            lines.append(f"node {nid} [{kind}]: {path}{suffix}")
        return "\n".join(lines)


class ConversionContext:
    """Per-nesting-level conversion state."""

    def __init__(self, builder: GraphBuilder, iters: Ref, registry, policy: Policy,
                 diags: Diagnostics, repl: WrappedValue | None = None,
                 repl_identity: bool = True):
        self.builder = builder
        self.iters = iters
        self.registry = registry
        self.policy = policy
        self.diags = diags
        self._repl = repl
        self.repl_identity = repl_identity

    @property
    def b(self) -> GraphBuilder:
        return self.builder

    @property
    def repl(self):
        """Stacked vector of active iteration ids; built lazily."""
        if self._repl is None:
            self._repl = _LazyReplacement(self)
        return self._repl

    @property
    def n_static(self) -> int | None:
        v = self.iters.graph.const_value(self.iters)
        return int(v.item()) if v is not None else None

    def at(self, builder: GraphBuilder, iters: Ref, repl: WrappedValue | None,
           repl_identity: bool) -> "ConversionContext":
        return ConversionContext(builder, iters, self.registry, self.policy, self.diags,
                                 repl, repl_identity)

    def materialize(self, w: WrappedValue) -> Ref:
        """Stacked form of a wrapped value; tiles loop-invariant values."""
        if w.stacked:
            return w.ref
        return self.builder.tile_leading(w.ref, self.iters)


# --------------------------------------------------------------------------
# converter helpers


def _per_iter_shape(body: Graph, ref) -> tuple | None:
    return body.ref_shape(ref)


def _rank_pad_stacked(ctx, ref: Ref, per_iter_shape, target_rank: int) -> Ref:
    """Insert leading 1-dims after the stacking axis to reach target rank."""
    r = len(per_iter_shape)
    if r >= target_rank:
        return ref
    if not shape_is_static(per_iter_shape):
        raise VectorizeError("rank padding requires a static per-iteration shape")
    target = [-1] + [1] * (target_rank - r) + list(per_iter_shape)
    if ctx.n_static is not None:
        target[0] = ctx.n_static
    return ctx.b.reshape(ref, target)


def _stacked_reshape(ctx, ref: Ref, per_iter_target) -> Ref:
    lead = ctx.n_static if ctx.n_static is not None else -1
    return ctx.b.reshape(ref, [lead] + list(per_iter_target))


# --------------------------------------------------------------------------
# stateless converters; return wrapped outputs, or None to route to fallback


def _conv_elementwise_binary(ctx, body, node, win):
    a, b = win
    if not a.stacked and not b.stacked:
        return [WrappedValue(ctx.b._add(node.kind, [a.ref, b.ref]), False)]
    sa = _per_iter_shape(body, node.inputs[0])
    sb = _per_iter_shape(body, node.inputs[1])
    if sa is None or sb is None:
        return None
    target_rank = max(len(sa), len(sb))
    try:
        ar = _rank_pad_stacked(ctx, a.ref, sa, target_rank) if a.stacked else a.ref
        br = _rank_pad_stacked(ctx, b.ref, sb, target_rank) if b.stacked else b.ref
    except VectorizeError:
        return None
    return [WrappedValue(ctx.b._add(node.kind, [ar, br]), True)]


def _conv_elementwise_unary(ctx, body, node, win):
    x = win[0]
    return [WrappedValue(ctx.b._add(node.kind, [x.ref], dict(node.attrs)), x.stacked)]


def _conv_matmul(ctx, body, node, win):
    a, b = win
    sa = _per_iter_shape(body, node.inputs[0])
    sb = _per_iter_shape(body, node.inputs[1])
    if not a.stacked and not b.stacked:
        return [WrappedValue(ctx.b.matmul(a.ref, b.ref), False)]
    if sa is None or sb is None:
        return None
    ra, rb = len(sa), len(sb)
    if ra == 2 and rb == 2:
        if a.stacked and b.stacked:
            return [WrappedValue(ctx.b.matmul(a.ref, b.ref), True)]
        if a.stacked and not b.stacked:
            # reshape [n,x,y] -> [n*x,y], multiply, reshape back
            if shape_is_static(sa) and sb[1] is not None:
                x, y = sa
                r = ctx.b.matmul(ctx.b.reshape(a.ref, [-1, y]), b.ref)
                return [WrappedValue(_stacked_reshape(ctx, r, [x, sb[1]]), True)]
            m = ctx.materialize(b)
            return [WrappedValue(ctx.b.matmul(a.ref, m), True)]
        # invariant lhs x stacked rhs: transpose into the previous case
        if shape_is_static(sb) and sa[0] is not None:
            y, z = sb
            bt = ctx.b.transpose(b.ref, [0, 2, 1])
            r = ctx.b.matmul(ctx.b.reshape(bt, [-1, y]), ctx.b.transpose(a.ref, [1, 0]))
            r = _stacked_reshape(ctx, r, [z, sa[0]])
            return [WrappedValue(ctx.b.transpose(r, [0, 2, 1]), True)]
        m = ctx.materialize(a)
        return [WrappedValue(ctx.b.matmul(m, b.ref), True)]
    if ra == 3 and rb == 3:
        if not shape_is_static(sa) or not shape_is_static(sb):
            return None
        am = ctx.materialize(a) if not a.stacked else a.ref
        bm = ctx.materialize(b) if not b.stacked else b.ref
        r = ctx.b.matmul(ctx.b.reshape(am, [-1, sa[1], sa[2]]),
                         ctx.b.reshape(bm, [-1, sb[1], sb[2]]))
        return [WrappedValue(_stacked_reshape(ctx, r, [sa[0], sa[1], sb[2]]), True)]
    return None


def _fold_leading(ctx, body, node, win, apply_fn):
    """Fold the stacking axis into the per-iteration batch axis of input 0."""
    x = win[0]
    sx = _per_iter_shape(body, node.inputs[0])
    if not x.stacked:
        refs = [w.ref for w in win]
        return [WrappedValue(apply_fn(refs), False)] if all(not w.stacked for w in win) else None
    if any(w.stacked for w in win[1:]):
        return None
    if not shape_is_static(sx) or len(sx) != 4:
        return None
    folded = ctx.b.reshape(x.ref, [-1] + list(sx[1:]))
    out = apply_fn([folded] + [w.ref for w in win[1:]])
    out_tail = ctx.b.graph.ref_shape(out)
    if out_tail is None or not shape_is_static(out_tail[1:]):
        return None
    return [WrappedValue(_stacked_reshape(ctx, out, [sx[0]] + list(out_tail[1:])), True)]


def _conv_conv2d(ctx, body, node, win):
    return _fold_leading(ctx, body, node, win, lambda rs: ctx.b.conv2d(rs[0], rs[1]))


def _conv_conv2d_input_grad(ctx, body, node, win):
    return _fold_leading(ctx, body, node, win, lambda rs: ctx.b.conv2d_input_grad(rs[0], rs[1]))


def _conv_im2col(ctx, body, node, win):
    k1, k2 = node.attrs["k1"], node.attrs["k2"]
    return _fold_leading(ctx, body, node, win, lambda rs: ctx.b.im2col(rs[0], k1, k2))


def _conv_reduce_sum(ctx, body, node, win):
    x = win[0]
    axes = node.attrs["axes"]
    if not x.stacked:
        return [WrappedValue(ctx.b.reduce_sum(x.ref, axes), False)]
    shifted = tuple(a + 1 if a >= 0 else a for a in axes)
    return [WrappedValue(ctx.b.reduce_sum(x.ref, shifted), True)]


def _conv_concat(ctx, body, node, win):
    axis = node.attrs["axis"]
    if all(not w.stacked for w in win):
        return [WrappedValue(ctx.b.concat([w.ref for w in win], axis), False)]
    refs = [ctx.materialize(w) for w in win]
    return [WrappedValue(ctx.b.concat(refs, axis + 1 if axis >= 0 else axis), True)]


def _conv_gather_rows(ctx, body, node, win):
    x, idx = win
    if x.stacked:
        if idx.stacked:
            return None
        # invariant index into a stacked tensor: gather along axis 1
        sx = _per_iter_shape(body, node.inputs[0])
        if sx is None:
            return None
        perm = [1, 0] + list(range(2, len(sx) + 1))
        t = ctx.b.transpose(x.ref, perm)
        g = ctx.b.gather(t, idx.ref)
        s_idx = _per_iter_shape(body, node.inputs[1])
        if s_idx is None:
            return None
        if len(s_idx) == 0:
            return [WrappedValue(g, True)]
        return [WrappedValue(ctx.b.transpose(g, perm), True)]
    s_idx = _per_iter_shape(body, node.inputs[1])
    if not idx.stacked:
        return [WrappedValue(ctx.b.gather(x.ref, idx.ref), False)]
    if s_idx is None:
        return None
    if len(s_idx) == 0:
        # per-iteration scalar index
        if idx is ctx._repl and ctx.repl_identity:
            sx = x.ref.graph.ref_shape(x.ref)
            n = ctx.n_static
            if sx is not None and sx and sx[0] is not None:
                if n is not None and sx[0] == n:
                    return [WrappedValue(x.ref, True)]
                return [WrappedValue(ctx.b.slice_leading(x.ref, ctx.iters), True)]
        return [WrappedValue(ctx.b.gather(x.ref, idx.ref), True)]
    # per-iteration index vector: gather by the flattened indices
    sx = x.ref.graph.ref_shape(x.ref)
    if not shape_is_static(s_idx) or sx is None or not shape_is_static(sx[1:]):
        return None
    flat = ctx.b.reshape(idx.ref, [-1])
    g = ctx.b.gather(x.ref, flat)
    return [WrappedValue(_stacked_reshape(ctx, g, [s_idx[0]] + list(sx[1:])), True)]


def _conv_scatter_add_rows(ctx, body, node, win):
    idx, upd = win
    total = node.attrs["total"]
    if not idx.stacked and not upd.stacked:
        return [WrappedValue(ctx.b.scatter_add_rows(idx.ref, upd.ref, total), False)]
    s_idx = _per_iter_shape(body, node.inputs[0])
    s_upd = _per_iter_shape(body, node.inputs[1])
    if s_idx is None or len(s_idx) != 0 or not shape_is_static(s_upd):
        return None
    dt = body.ref_dtype(node.inputs[1])
    if dt is None:
        return None
    # one-hot expansion: out[j] = onehot(idx[j]) outer-product update[j]
    idxm = ctx.materialize(idx)
    updm = ctx.materialize(upd)
    rng = ctx.b.const(np.arange(total, dtype=np.int64), DType.I64)
    lead = ctx.n_static if ctx.n_static is not None else -1
    onehot = ctx.b.cast(ctx.b.equal(ctx.b.reshape(idxm, [lead, 1]), rng), dt)
    oh = ctx.b.reshape(onehot, [lead, total] + [1] * len(s_upd))
    um = ctx.b.reshape(updm, [lead, 1] + list(s_upd))
    return [WrappedValue(ctx.b.mul(oh, um), True)]


def _conv_reshape(ctx, body, node, win):
    x = win[0]
    target = list(node.attrs["shape"])
    if not x.stacked:
        return [WrappedValue(ctx.b.reshape(x.ref, target), False)]
    if -1 in target:
        # resolve the wildcard from the statically inferred per-iteration shape
        per = node.out_shapes[0]
        if not shape_is_static(per):
            return None
        target = list(per)
    return [WrappedValue(_stacked_reshape(ctx, x.ref, target), True)]


def _conv_transpose(ctx, body, node, win):
    x = win[0]
    perm = list(node.attrs["perm"])
    if not x.stacked:
        return [WrappedValue(ctx.b.transpose(x.ref, perm), False)]
    return [WrappedValue(ctx.b.transpose(x.ref, [0] + [p + 1 for p in perm]), True)]


def _conv_stack(ctx, body, node, win):
    if all(not w.stacked for w in win):
        return [WrappedValue(ctx.b.stack([w.ref for w in win]), False)]
    refs = [ctx.materialize(w) for w in win]
    s = ctx.b.stack(refs)  # [k, n, ...]
    r = ctx.b.graph.ref_shape(s)
    rank = len(r) if r is not None else None
    if rank is None:
        return None
    perm = [1, 0] + list(range(2, rank))
    return [WrappedValue(ctx.b.transpose(s, perm), True)]


def _conv_slice_leading(ctx, body, node, win):
    x, m = win
    if m.stacked:
        return None
    if not x.stacked:
        return [WrappedValue(ctx.b.slice_leading(x.ref, m.ref), False)]
    sx = _per_iter_shape(body, node.inputs[0])
    if sx is None:
        return None
    rank = len(sx) + 1
    perm = [1, 0] + list(range(2, rank))
    t = ctx.b.transpose(x.ref, perm)
    s = ctx.b.slice_leading(t, m.ref)
    return [WrappedValue(ctx.b.transpose(s, perm), True)]


def _conv_dim0(ctx, body, node, win):
    x = win[0]
    if not x.stacked:
        return [WrappedValue(ctx.b.dim0(x.ref), False)]
    sx = _per_iter_shape(body, node.inputs[0])
    if sx is None or not sx or sx[0] is None:
        return None
    return [WrappedValue(ctx.b.i64(sx[0]), False)]


def _conv_tile_leading(ctx, body, node, win):
    x, m = win
    if m.stacked:
        return None
    if not x.stacked:
        return [WrappedValue(ctx.b.tile_leading(x.ref, m.ref), False)]
    sx = _per_iter_shape(body, node.inputs[0])
    if sx is None:
        return None
    t = ctx.b.tile_leading(x.ref, m.ref)  # [m, n, ...]
    perm = [1, 0] + list(range(2, len(sx) + 2))
    return [WrappedValue(ctx.b.transpose(t, perm), True)]


def default_registry() -> dict:
    reg = {}
    for k in BINARY_KINDS:
        reg[k] = _conv_elementwise_binary
    for k in UNARY_KINDS:
        reg[k] = _conv_elementwise_unary
    reg["cast"] = _conv_elementwise_unary
    reg["matmul"] = _conv_matmul
    reg["conv2d"] = _conv_conv2d
    reg["conv2d_input_grad"] = _conv_conv2d_input_grad
    reg["im2col"] = _conv_im2col
    reg["reduce_sum"] = _conv_reduce_sum
    reg["concat"] = _conv_concat
    reg["gather_rows"] = _conv_gather_rows
    reg["scatter_add_rows"] = _conv_scatter_add_rows
    reg["reshape"] = _conv_reshape
    reg["transpose"] = _conv_transpose
    reg["stack"] = _conv_stack
    reg["slice_leading"] = _conv_slice_leading
    reg["dim0"] = _conv_dim0
    reg["tile_leading"] = _conv_tile_leading
    return reg


_DEFAULT_REGISTRY = default_registry()


# --------------------------------------------------------------------------
# stateful conversion


def _convert_stateful(ctx: ConversionContext, body, node, win):
    kind = node.kind
    name = node.attrs.get("name")
    if kind == "read_variable":
        ctx.diags.record(node, "fast", "idempotent: read once, loop-invariant")
        return [WrappedValue(ctx.b.read_variable(name), False)]
    if kind == "assign_add":
        # commutative update: reduce all per-iteration updates, apply once
        upd = ctx.materialize(win[0])
        red = ctx.b.reduce_sum(upd, [0])
        ctx.b.assign_add(name, red)
        ctx.diags.record(node, "fast", "commutative update reduced over iterations")
        return []
    if kind == "assign":
        if win[0].stacked:
            if kind in ctx.policy.force_fallback or ctx.policy.stateful_assign_fallback:
                return _fallback_loop(ctx, body, node, win, "assign of loop-variant value")
            raise StatefulNotSupported(
                f"node {node.id}: assign of a loop-variant value is not SIMD compatible")
        n = ctx.n_static
        if n is not None:
            if n > 0:
                ctx.b.assign(name, win[0].ref)
        else:
            # guard: zero active iterations must not write
            vref = win[0].ref

            def _do(tb):
                tb.assign(name, vref)
                return []

            ctx.b.cond(ctx.b.less(ctx.b.i64(0), ctx.iters), _do, lambda eb: [])
        ctx.diags.record(node, "fast", "loop-invariant assign executed once")
        return []
    if kind == "random_uniform":
        # overloaded SIMD semantics: one draw with the rank increased by one
        ctx.diags.record(node, "fast", "single draw with rank increased by one")
        return [WrappedValue(ctx.b.random_uniform(node.attrs["shape"], n=ctx.iters), True)]
    raise VectorizeError(f"unhandled stateful kind {kind!r}")


# --------------------------------------------------------------------------
# sequential fallback


def _fallback_loop(ctx: ConversionContext, body, node, win, reason: str):
    """Run the original node once per iteration inside a sequential while."""
    b = ctx.b
    row_shapes = node.out_shapes
    row_dtypes = node.out_dtypes
    if any(not shape_is_static(s) for s in row_shapes) or any(d is None for d in row_dtypes):
        raise VectorizeError(
            f"node {node.id} [{node.kind}]: fallback requires static output shapes")
    accs = [b.tile_leading(b.const(T.zeros(s, d)), ctx.iters)
            for s, d in zip(row_shapes, row_dtypes)]
    iters = ctx.iters
    wrapped_in = list(win)
    arity = len(row_shapes)

    def cond_fn(cb, car):
        return cb.less(car[0], iters)

    def body_fn(bb, car):
        j = car[0]
        ins = [bb.gather(w.ref, j) if w.stacked else bb._imp(w.ref) for w in wrapped_in]
        if node.kind in ("assign", "assign_add"):
            bb.graph.add_node(node.kind, ins, dict(node.attrs))
            new_accs = list(car[1:1 + arity])
        else:
            out_ref = bb._add(node.kind, ins, dict(node.attrs))
            new_accs = []
            for p in range(arity):
                o = bb.graph.out(out_ref.nid, p)
                row = bb.reshape(o, [1] + list(row_shapes[p]))
                jv = bb.reshape(j, [1])
                comp = bb.complement(jv, iters)
                old = car[1 + p]
                new_accs.append(bb.scatter_rows([jv, comp], [row, bb.gather(old, comp)], iters))
        return [bb.add(j, bb.i64(1))] + new_accs

    outs = b.while_loop([b.i64(0)] + accs, cond_fn, body_fn)
    ctx.diags.record(node, "fallback", reason)
    return [WrappedValue(outs[1 + p], True) for p in range(arity)]


# --------------------------------------------------------------------------
# control-flow conversion


def _branch_empty_outputs(eb: GraphBuilder, sub: Graph):
    outs = []
    for o in sub.outputs:
        s = sub.ref_shape(o)
        d = sub.ref_dtype(o)
        if not shape_is_static(s) or d is None:
            raise VectorizeError("conditional branch output needs a static shape")
        outs.append(eb.const(T.zeros((0,) + tuple(s), d)))
    return outs


def _convert_cond(ctx: ConversionContext, body, node, win):
    blk = node.block
    w_c, w_caps = win[0], win[1:]
    then_g, else_g = blk.subgraphs["then"], blk.subgraphs["else"]
    if len(then_g.outputs) != len(else_g.outputs):
        raise VectorizeError(f"node {node.id}: branch output arities differ")

    if not w_c.stacked:
        # loop-invariant condition: ordinary conditional, subsetting skipped
        def _branch(sub):
            def fn(tb):
                sctx = ctx.at(tb, ctx.iters, ctx._repl, ctx.repl_identity)
                outs = _convert_graph(sub, sctx, {"capture": list(w_caps)})
                return [sctx.materialize(w) for w in outs]
            return fn

        refs = ctx.b.cond(w_c.ref, _branch(then_g), _branch(else_g))
        ctx.diags.record(node, "fast", "loop-invariant condition")
        return [WrappedValue(r, True) for r in refs]

    b = ctx.b
    c_vec = w_c.ref
    i_then = b.where_true(c_vec)
    i_else = b.where_true(b.logical_not(c_vec))
    parts = []
    for sub, idx in ((then_g, i_then), (else_g, i_else)):
        n_b = b.dim0(idx)

        def _run(gb, sub=sub, idx=idx, n_b=n_b):
            sub_repl = WrappedValue(gb.gather(ctx.repl.ref, idx), True)
            sub_ctx = ctx.at(gb, gb._imp(n_b), sub_repl, False)
            caps = [WrappedValue(gb.gather(w.ref, idx), True) if w.stacked else w
                    for w in w_caps]
            outs = _convert_graph(sub, sub_ctx, {"capture": caps})
            return [sub_ctx.materialize(w) for w in outs]

        guarded = b.cond(b.less(b.i64(0), n_b), _run,
                         lambda eb, sub=sub: _branch_empty_outputs(eb, sub))
        parts.append(guarded)
    outs = []
    for k in range(len(then_g.outputs)):
        outs.append(WrappedValue(
            b.scatter_rows([i_then, i_else], [parts[0][k], parts[1][k]], ctx.iters), True))
    ctx.diags.record(node, "generic", "active set partitioned and scattered back")
    return outs


def _dry_convert(ctx: ConversionContext, sub: Graph, bindings) -> list:
    """Convert into a throwaway builder just to learn output stackedness."""
    tb = GraphBuilder(parent=ctx.builder, capset=_CaptureSet())
    sctx = ConversionContext(tb, ctx.iters, ctx.registry, ctx.policy, Diagnostics(),
                             None, ctx.repl_identity)
    return _convert_graph(sub, sctx, bindings)


def _convert_while(ctx: ConversionContext, body, node, win):
    blk = node.block
    k = blk.num_carried
    w_init, w_caps = list(win[:k]), list(win[k:])
    cond_g, body_g = blk.subgraphs["cond"], blk.subgraphs["body"]
    if len(body_g.outputs) != k:
        raise VectorizeError(f"node {node.id}: while carried arity mismatch")

    # decide between the invariant-condition fast path and index bookkeeping
    stackedness = [w.stacked for w in w_init]
    fast = True
    for _ in range(k + 1):
        car = [WrappedValue(w.ref, s or w.stacked) for w, s in zip(w_init, stackedness)]
        c_out = _dry_convert(ctx, cond_g, {"capture": w_caps, "carried": car})
        if c_out[0].stacked:
            fast = False
            break
        b_out = _dry_convert(ctx, body_g, {"capture": w_caps, "carried": car})
        widened = [s or w.stacked for s, w in zip(stackedness, b_out)]
        if widened == stackedness:
            break
        stackedness = widened
    b = ctx.b

    if fast:
        init = [ctx.materialize(w) if s and not w.stacked else w.ref
                for w, s in zip(w_init, stackedness)]

        def cond_fn(cb, car):
            sctx = ctx.at(cb, ctx.iters, ctx._repl, ctx.repl_identity)
            car_w = [WrappedValue(r, s) for r, s in zip(car, stackedness)]
            out = _convert_graph(cond_g, sctx, {"capture": w_caps, "carried": car_w})
            if out[0].stacked:
                raise VectorizeError("while condition became loop-variant on the fast path")
            return out[0].ref

        def body_fn(bb, car):
            sctx = ctx.at(bb, ctx.iters, ctx._repl, ctx.repl_identity)
            car_w = [WrappedValue(r, s) for r, s in zip(car, stackedness)]
            out = _convert_graph(body_g, sctx, {"capture": w_caps, "carried": car_w})
            return [sctx.materialize(w) if s else w.ref for w, s in zip(out, stackedness)]

        refs = b.while_loop(init, cond_fn, body_fn)
        ctx.diags.record(node, "fast", "loop-invariant condition: no index bookkeeping")
        return [WrappedValue(r, s) for r, s in zip(refs, stackedness)]

    # general path: carry the active index vector plus fully stacked state
    init = [b.range_vec(ctx.iters)] + [ctx.materialize(w) for w in w_init]
    total = ctx.iters

    def cond_fn(cb, car):
        return cb.less(cb.i64(0), cb.dim0(car[0]))

    def body_fn(bb, car):
        i_act = car[0]
        states = car[1:]
        l_act = bb.dim0(i_act)
        sub_repl = WrappedValue(bb.gather(ctx.repl.ref, i_act), True)
        sctx = ctx.at(bb, l_act, sub_repl, False)
        caps = [WrappedValue(bb.gather(w.ref, i_act), True) if w.stacked else w
                for w in w_caps]
        car_w = [WrappedValue(bb.gather(s, i_act), True) for s in states]
        c_out = _convert_graph(cond_g, sctx, {"capture": caps, "carried": car_w})
        c_vec = sctx.materialize(c_out[0])
        keep = bb.where_true(c_vec)
        i_surv = bb.gather(i_act, keep)

        def _step(gb):
            repl2 = WrappedValue(gb.gather(ctx.repl.ref, i_surv), True)
            l2 = gb.dim0(gb._imp(i_surv))
            sctx2 = ctx.at(gb, l2, repl2, False)
            caps2 = [WrappedValue(gb.gather(w.ref, i_surv), True) if w.stacked else w
                     for w in w_caps]
            car2 = [WrappedValue(gb.gather(s, i_surv), True) for s in states]
            outs = _convert_graph(body_g, sctx2, {"capture": caps2, "carried": car2})
            comp = gb.complement(i_surv, total)
            new_states = []
            for w, s in zip(outs, states):
                rows = sctx2.materialize(w)
                new_states.append(gb.scatter_rows(
                    [i_surv, comp], [rows, gb.gather(s, comp)], total))
            return new_states

        new_states = bb.cond(bb.less(bb.i64(0), bb.dim0(i_surv)), _step,
                             lambda eb: [eb._imp(s) for s in states])
        return [i_surv] + list(new_states)

    refs = b.while_loop(init, cond_fn, body_fn)
    ctx.diags.record(node, "generic", "active-index bookkeeping loop")
    return [WrappedValue(r, True) for r in refs[1:]]


# --------------------------------------------------------------------------
# main walk


def _anchor_nodes(g: Graph, emitted, outs):
    anchors = [nid for nid in emitted
               if g.nodes[nid].kind in STATEFUL_KINDS or g.nodes[nid].kind in BLOCK_KINDS]
    if anchors:
        return anchors
    return [w.ref.nid for w in outs if isinstance(w, WrappedValue) and w.ref.graph is g]


def _convert_node(body: Graph, node: Node, win, ctx: ConversionContext, bindings):
    kind = node.kind
    if kind == "capture":
        return [bindings["capture"][node.attrs["index"]]]
    if kind == "carried":
        return [bindings["carried"][node.attrs["index"]]]
    if kind == "loop_var":
        return [ctx.repl]
    if kind == "constant":
        return [WrappedValue(ctx.b.const(node.attrs["value"]), False)]
    if kind == "placeholder":
        ref = ctx.b.placeholder(node.attrs["name"], node.attrs["dtype"], node.attrs["shape"])
        return [WrappedValue(ref, False)]
    if kind == "cond":
        return _convert_cond(ctx, body, node, win)
    if kind == "while":
        return _convert_while(ctx, body, node, win)
    if kind in STATEFUL_KINDS and kind not in ctx.policy.force_fallback:
        return _convert_stateful(ctx, body, node, win)
    if kind in ctx.policy.force_fallback:
        return _fallback_loop(ctx, body, node, win, "forced by policy")
    if all(not w.stacked for w in win):
        # every input is loop-invariant: re-emit the node once, unstacked
        ref = ctx.b._add(kind, [w.ref for w in win], dict(node.attrs))
        ctx.diags.record(node, "fast", "all inputs loop-invariant")
        return [WrappedValue(ctx.b.graph.out(ref.nid, p), False)
                for p in range(ctx.b.graph.nodes[ref.nid].output_arity)]
    conv = ctx.registry.get(kind)
    if conv is None:
        return _fallback_loop(ctx, body, node, win, "no registered converter")
    out = conv(ctx, body, node, win)
    if out is None:
        return _fallback_loop(ctx, body, node, win, "unsupported input combination")
    ctx.diags.record(node, "fast", "")
    return out


def _convert_graph(sub: Graph, ctx: ConversionContext, bindings) -> list:
    g = ctx.b.graph
    wrapped: dict = {}
    anchors: dict = {}
    for node in sub.topo_order():
        before = g._next_id
        win = [wrapped[r] for r in node.inputs]
        outs = _convert_node(sub, node, win, ctx, bindings)
        emitted = list(range(before, g._next_id))
        # mirror the original control dependencies onto the generated nodes
        if node.control_deps:
            dep_anchors = set()
            for c in node.control_deps:
                dep_anchors.update(anchors.get(c, ()))
            for nid in emitted:
                g.nodes[nid].control_deps.update(dep_anchors - {nid})
        anchors[node.id] = _anchor_nodes(g, emitted, outs)
        for p, w in enumerate(outs):
            wrapped[(node.id, p)] = w
    return [wrapped[o] for o in sub.outputs]


def vectorize_body(body: Graph, cap_wrapped, iters: Ref, builder: GraphBuilder,
                   registry=None, policy: Policy | None = None,
                   diags: Diagnostics | None = None) -> tuple:
    """Convert a parallel-for body; returns (stacked output refs, diagnostics)."""
    registry = registry if registry is not None else _DEFAULT_REGISTRY
    policy = policy or Policy()
    diags = diags if diags is not None else Diagnostics()
    body = _expand_parfors(body, registry, policy, diags)
    ctx = ConversionContext(builder, iters, registry, policy, diags)
    outs = _convert_graph(body, ctx, {"capture": list(cap_wrapped)})
    return [ctx.materialize(w) for w in outs], diags


def _expand_parfors(src: Graph, registry, policy, diags) -> Graph:
    """Copy a graph, replacing every nested parfor with its vectorized form."""
    if not any(n.kind == "parfor" for n in src.nodes.values()) and \
       not any(n.block and _has_parfor(n.block) for n in src.nodes.values()):
        return src
    dst = Graph()
    dst.variables = dict(src.variables)
    dst.outer_variables = dict(src.outer_variables)
    b = GraphBuilder(graph=dst)
    refmap: dict = {}
    anchors: dict = {}
    for node in src.topo_order():
        before = dst._next_id
        ins = [refmap[r] for r in node.inputs]
        if node.kind == "parfor":
            caps = [WrappedValue(r, False) for r in ins[1:]]
            outs, _ = vectorize_body(node.block.subgraphs["body"], caps, ins[0], b,
                                     registry, policy, diags)
            for p, r in enumerate(outs):
                refmap[(node.id, p)] = r
        elif node.block is not None:
            subs = {name: _expand_parfors(sg, registry, policy, diags)
                    for name, sg in node.block.subgraphs.items()}
            blk = type(node.block)(node.block.kind, subs, node.block.num_carried,
                                   node.block.out_arity)
            new = dst.add_node(node.kind, ins, dict(node.attrs), block=blk)
            for p in range(new.output_arity):
                refmap[(node.id, p)] = dst.out(new, p)
        else:
            new = dst.add_node(node.kind, ins, dict(node.attrs))
            for p in range(new.output_arity):
                refmap[(node.id, p)] = dst.out(new, p)
        emitted = list(range(before, dst._next_id))
        if node.control_deps:
            dep = set()
            for c in node.control_deps:
                dep.update(anchors.get(c, ()))
            for nid in emitted:
                dst.nodes[nid].control_deps.update(dep - {nid})
        a = [nid for nid in emitted
             if dst.nodes[nid].kind in STATEFUL_KINDS or dst.nodes[nid].kind in BLOCK_KINDS]
        anchors[node.id] = a if a else emitted[-1:]
    dst.set_outputs([refmap[o] for o in src.outputs])
    return dst


def _has_parfor(block) -> bool:
    for sg in block.subgraphs.values():
        for n in sg.nodes.values():
            if n.kind == "parfor":
                return True
            if n.block is not None and _has_parfor(n.block):
                return True
    return False


def vectorize_graph(g: Graph, registry=None, policy: Policy | None = None) -> tuple:
    """Copy a whole graph, vectorizing every parfor block it contains.

    Returns (new graph, diagnostics).  Graph outputs are carried over.
    """
    registry = registry if registry is not None else _DEFAULT_REGISTRY
    policy = policy or Policy()
    diags = Diagnostics()
    dst = _expand_parfors(g, registry, policy, diags)
    if dst is g:
        # no parfor anywhere: still return an isomorphic copy
        dst = _copy_graph(g)
    return dst, diags


def _copy_graph(src: Graph) -> Graph:
    dst = Graph()
    dst.variables = dict(src.variables)
    dst.outer_variables = dict(src.outer_variables)
    refmap = {}
    idmap = {}
    for node in src.topo_order():
        ins = [refmap[r] for r in node.inputs]
        blk = None
        if node.block is not None:
            blk = type(node.block)(node.block.kind,
                                   {n: _copy_graph(sg) for n, sg in node.block.subgraphs.items()},
                                   node.block.num_carried, node.block.out_arity)
        new = dst.add_node(node.kind, ins, dict(node.attrs),
                           control_deps=[idmap[c] for c in node.control_deps], block=blk)
        idmap[node.id] = new.id
        for p in range(new.output_arity):
            refmap[(node.id, p)] = dst.out(new, p)
    dst.set_outputs([refmap[o] for o in src.outputs])
    return dst
