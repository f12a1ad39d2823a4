"""Dataflow IR: nodes, control deps, nested control-flow blocks, variables.

A Graph owns an id-ordered set of nodes.  Control flow is structured: a
conditional, while loop or parallel-for appears as a single opaque node whose
Block holds the sub-fragments (each itself a Graph).  Sub-fragments reference
enclosing tensors through `capture` nodes, loop-carried state through
`carried` nodes and the parallel-for loop variable through `loop_var`.

Construction is single-writer; a completed, validated graph is immutable by
convention and safe to share across threads for reading and execution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import (
    ArityMismatch,
    BadAttr,
    BadPermutation,
    CycleDetected,
    DTypeMismatch,
    IncompatibleShapes,
    NonScalarCondition,
    RankError,
    UnknownInput,
)
from .tensor import DType, TensorValue

BINARY_KINDS = frozenset(T.BINARY_OPS)
UNARY_KINDS = frozenset(T.UNARY_OPS)
BLOCK_KINDS = frozenset({"cond", "while", "parfor"})
STATEFUL_KINDS = frozenset({"read_variable", "assign", "assign_add", "random_uniform"})
SOURCE_KINDS = frozenset({"constant", "placeholder", "loop_var", "capture", "carried"})
OTHER_KINDS = frozenset({
    "cast", "matmul", "conv2d", "conv2d_input_grad", "im2col",
    "reduce_sum", "concat", "gather_rows", "scatter_rows", "scatter_add_rows",
    "reshape", "transpose", "stack", "slice_leading",
    "where_true", "dim0", "range_vec", "tile_leading", "complement",
})
ALL_KINDS = BINARY_KINDS | UNARY_KINDS | BLOCK_KINDS | STATEFUL_KINDS | SOURCE_KINDS | OTHER_KINDS


@dataclass(frozen=True)
class OpSignature:
    kind: str
    attrs: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Ref:
    """Handle to one output port of a node in a particular graph."""

    graph: "Graph"
    nid: int
    port: int = 0

    def __repr__(self):
        return f"Ref(%{self.nid}:{self.port})"


class Block:
    """Nested control-flow construct attached to one opaque node."""

    def __init__(self, kind: str, subgraphs: dict, num_carried: int = 0, out_arity: int = 0):
        assert kind in BLOCK_KINDS
        self.kind = kind
        self.subgraphs = subgraphs  # parfor: body; cond: then/else; while: cond/body
        self.num_carried = num_carried
        self.out_arity = out_arity


class Node:
    def __init__(self, nid: int, sig: OpSignature, inputs, control_deps, block: Block | None = None):
        self.id = nid
        self.sig = sig
        self.inputs = list(inputs)          # list of (nid, port)
        self.control_deps = set(control_deps)
        self.block = block
        self.out_dtypes: list = []
        self.out_shapes: list = []          # tuples (dims may be None) or None

    @property
    def kind(self) -> str:
        return self.sig.kind

    @property
    def attrs(self) -> dict:
        return self.sig.attrs

    @property
    def output_arity(self) -> int:
        return len(self.out_dtypes)


def shape_is_static(shape) -> bool:
    return shape is not None and all(d is not None for d in shape)


class Graph:
    def __init__(self):
        self.nodes: dict[int, Node] = {}
        self.variables: dict[str, TensorValue] = {}
        # declarations visible from enclosing graphs; used for inference only
        self.outer_variables: dict[str, TensorValue] = {}
        self.outputs: list = []  # list of (nid, port); meaningful for sub-fragments
        self._next_id = 0

    # -- construction ------------------------------------------------------

    def declare_variable(self, name: str, init: TensorValue):
        if name in self.variables:
            raise BadAttr(f"variable {name!r} already declared")
        self.variables[name] = T.tensor(init)

    def _resolve(self, ref) -> tuple:
        if isinstance(ref, Ref):
            if ref.graph is not self:
                raise UnknownInput(f"ref {ref} belongs to a different graph")
            return (ref.nid, ref.port)
        if isinstance(ref, Node):
            return (ref.id, 0)
        if isinstance(ref, int):
            return (ref, 0)
        if isinstance(ref, tuple) and len(ref) == 2:
            return (int(ref[0]), int(ref[1]))
        raise UnknownInput(f"cannot interpret input {ref!r}")

    def add_node(self, kind: str, inputs=(), attrs=None, control_deps=(), block: Block | None = None) -> Node:
        """Append a node; validates attrs and runs static shape inference."""
        attrs = dict(attrs or {})
        if kind not in ALL_KINDS:
            raise BadAttr(f"unknown op kind {kind!r}")
        if (kind in BLOCK_KINDS) != (block is not None):
            raise BadAttr(f"kind {kind!r} block mismatch")
        ins = [self._resolve(r) for r in inputs]
        nid = self._next_id
        for i_nid, port in ins:
            if i_nid not in self.nodes:
                raise UnknownInput(f"node {nid}: unknown input node {i_nid}")
            if not 0 <= port < self.nodes[i_nid].output_arity:
                raise UnknownInput(f"node {nid}: bad port {i_nid}:{port}")
        ctrl = set()
        for c in control_deps:
            c_nid = c.id if isinstance(c, Node) else (c.nid if isinstance(c, Ref) else int(c))
            if c_nid not in self.nodes:
                raise UnknownInput(f"node {nid}: unknown control dep {c_nid}")
            ctrl.add(c_nid)
        _validate_attrs(kind, attrs)
        node = Node(nid, OpSignature(kind, attrs), ins, ctrl, block)
        dts, shs = _infer(self, node)
        node.out_dtypes, node.out_shapes = dts, shs
        self.nodes[nid] = node
        self._next_id += 1
        return node

    def build_block(self, kind: str, block: Block, inputs, control_deps=()) -> Node:
        """Register a control-flow block as one opaque node."""
        return self.add_node(kind, inputs, {}, control_deps, block)

    def out(self, node, port: int = 0) -> Ref:
        nid = node.id if isinstance(node, Node) else int(node)
        return Ref(self, nid, port)

    def set_outputs(self, refs):
        self.outputs = [self._resolve(r) for r in refs]

    # -- queries -----------------------------------------------------------

    def node(self, nid: int) -> Node:
        return self.nodes[nid]

    def ref_dtype(self, ref):
        nid, port = self._resolve(ref)
        return self.nodes[nid].out_dtypes[port]

    def ref_shape(self, ref):
        nid, port = self._resolve(ref)
        return self.nodes[nid].out_shapes[port]

    def const_value(self, ref) -> TensorValue | None:
        """The payload if ref points at a constant node, else None."""
        nid, port = self._resolve(ref)
        node = self.nodes[nid]
        if node.kind == "constant" and port == 0:
            return node.attrs["value"]
        return None

    def topo_order(self) -> list:
        """Kahn's algorithm over data + control edges; ties by ascending id."""
        preds = {nid: set() for nid in self.nodes}
        succs = {nid: set() for nid in self.nodes}
        for nid, node in self.nodes.items():
            for p_nid, _ in node.inputs:
                if p_nid != nid:
                    preds[nid].add(p_nid)
                    succs[p_nid].add(nid)
            for c in node.control_deps:
                preds[nid].add(c)
                succs[c].add(nid)
            if any(p == nid for p, _ in node.inputs):
                raise CycleDetected(f"node {nid} is a self-edge", [nid])
        import heapq

        ready = [nid for nid, ps in preds.items() if not ps]
        heapq.heapify(ready)
        order = []
        while ready:
            nid = heapq.heappop(ready)
            order.append(nid)
            for s in succs[nid]:
                preds[s].discard(nid)
                if not preds[s]:
                    heapq.heappush(ready, s)
        if len(order) != len(self.nodes):
            stuck = sorted(set(self.nodes) - set(order))
            raise CycleDetected(f"cycle through nodes {stuck}", stuck)
        return [self.nodes[nid] for nid in order]

    def validate(self, _var_names=None) -> list:
        """Collect all invariant violations; returns a list of strings."""
        errors = []
        var_names = set(self.variables) if _var_names is None else _var_names | set(self.variables)
        try:
            self.topo_order()
        except CycleDetected as e:
            errors.append(str(e))
        for nid, node in self.nodes.items():
            for p_nid, port in node.inputs:
                if p_nid not in self.nodes:
                    errors.append(f"node {nid}: unknown input {p_nid}")
                elif not 0 <= port < self.nodes[p_nid].output_arity:
                    errors.append(f"node {nid}: bad port {p_nid}:{port}")
            try:
                _validate_attrs(node.kind, node.attrs)
            except BadAttr as e:
                errors.append(f"node {nid}: {e}")
            if node.kind in ("read_variable", "assign", "assign_add"):
                if node.attrs.get("name") not in var_names:
                    errors.append(f"node {nid}: unknown variable {node.attrs.get('name')!r}")
            if node.block is not None:
                errors.extend(f"node {nid}: {e}" for e in _validate_block(self, node, var_names))
        for nid, port in self.outputs:
            if nid not in self.nodes or not 0 <= port < self.nodes[nid].output_arity:
                errors.append(f"bad graph output {nid}:{port}")
        return errors


def _validate_block(g: Graph, node: Node, var_names) -> list:
    errors = []
    blk = node.block
    expected = {"parfor": ["body"], "cond": ["then", "else"], "while": ["cond", "body"]}[blk.kind]
    if sorted(blk.subgraphs) != sorted(expected):
        return [f"{blk.kind} block has subgraphs {sorted(blk.subgraphs)}, expected {expected}"]
    n_fixed = {"parfor": 1, "cond": 1, "while": blk.num_carried}[blk.kind]
    n_caps = len(node.inputs) - n_fixed
    if n_caps < 0:
        return [f"{blk.kind} block has too few inputs"]
    for name, sub in blk.subgraphs.items():
        errors.extend(f"{name}: {e}" for e in sub.validate(_var_names=var_names))
        for snode in sub.nodes.values():
            if snode.kind == "capture" and not 0 <= snode.attrs["index"] < n_caps:
                errors.append(f"{name}: capture index {snode.attrs['index']} out of range")
            if snode.kind == "carried":
                if blk.kind != "while":
                    errors.append(f"{name}: carried node outside while block")
                elif not 0 <= snode.attrs["index"] < blk.num_carried:
                    errors.append(f"{name}: carried index {snode.attrs['index']} out of range")
            if snode.kind == "loop_var" and not (blk.kind == "parfor" and name == "body"):
                errors.append(f"{name}: loop_var outside parfor body")
    if blk.kind == "cond":
        t, e = blk.subgraphs["then"], blk.subgraphs["else"]
        if len(t.outputs) != len(e.outputs):
            errors.append("then/else output arity mismatch")
        if len(t.outputs) != blk.out_arity:
            errors.append("cond out_arity mismatch")
        c_dt, c_sh = g.ref_dtype(node.inputs[0]), g.ref_shape(node.inputs[0])
        if c_dt is not None and c_dt != DType.BOOL:
            errors.append("cond condition is not bool")
        if c_sh is not None and len(c_sh) != 0:
            errors.append("cond condition is not scalar")
    if blk.kind == "while":
        body, cnd = blk.subgraphs["body"], blk.subgraphs["cond"]
        if len(body.outputs) != blk.num_carried:
            errors.append(f"while body returns {len(body.outputs)} values, carries {blk.num_carried}")
        if len(cnd.outputs) != 1:
            errors.append("while cond must return exactly one value")
        else:
            dt = cnd.ref_dtype(cnd.outputs[0])
            sh = cnd.ref_shape(cnd.outputs[0])
            if dt is not None and dt != DType.BOOL:
                errors.append("while cond output is not bool")
            if sh is not None and len(sh) != 0:
                errors.append("while cond output is not scalar")
    if blk.kind == "parfor":
        it_dt = g.ref_dtype(node.inputs[0])
        it_sh = g.ref_shape(node.inputs[0])
        if it_dt is not None and it_dt != DType.I64:
            errors.append("parfor iters is not i64")
        if it_sh is not None and len(it_sh) != 0:
            errors.append("parfor iters is not scalar")
        if len(blk.subgraphs["body"].outputs) != blk.out_arity:
            errors.append("parfor out_arity mismatch")
    return errors


# --------------------------------------------------------------------------
# attribute validation


def _validate_attrs(kind: str, attrs: dict):
    def need(names):
        missing = [n for n in names if n not in attrs]
        extra = [n for n in attrs if n not in names]
        if missing or extra:
            raise BadAttr(f"{kind}: missing attrs {missing}, unexpected {extra}")

    if kind == "constant":
        need(["value"])
        if not isinstance(attrs["value"], TensorValue):
            raise BadAttr("constant: value must be a TensorValue")
    elif kind == "placeholder":
        need(["name", "dtype", "shape"])
        if not isinstance(attrs["dtype"], DType):
            raise BadAttr("placeholder: dtype must be a DType")
    elif kind in ("capture", "carried"):
        need(["index", "dtype", "shape"])
        if not isinstance(attrs["index"], int) or attrs["index"] < 0:
            raise BadAttr(f"{kind}: index must be a non-negative int")
    elif kind == "cast":
        need(["dtype"])
        if not isinstance(attrs["dtype"], DType):
            raise BadAttr("cast: dtype must be a DType")
    elif kind == "reduce_sum":
        need(["axes"])
        if not all(isinstance(a, int) for a in attrs["axes"]):
            raise BadAttr("reduce_sum: axes must be ints")
    elif kind == "concat":
        need(["axis"])
        if not isinstance(attrs["axis"], int):
            raise BadAttr("concat: axis must be an int")
    elif kind == "reshape":
        need(["shape"])
        shape = attrs["shape"]
        if not all(isinstance(d, int) and (d >= 0 or d == -1) for d in shape):
            raise BadAttr(f"reshape: bad target shape {shape}")
        if list(shape).count(-1) > 1:
            raise BadAttr("reshape: more than one -1 dim")
    elif kind == "transpose":
        need(["perm"])
        perm = list(attrs["perm"])
        if sorted(perm) != list(range(len(perm))):
            raise BadPermutation(f"transpose: {perm} is not a permutation")
    elif kind == "scatter_rows":
        need(["num_parts"])
        if not isinstance(attrs["num_parts"], int) or attrs["num_parts"] < 1:
            raise BadAttr("scatter_rows: num_parts must be a positive int")
    elif kind == "scatter_add_rows":
        need(["total"])
        if not isinstance(attrs["total"], int) or attrs["total"] < 0:
            raise BadAttr("scatter_add_rows: total must be a non-negative int")
    elif kind == "im2col":
        need(["k1", "k2"])
        if not all(isinstance(attrs[k], int) and attrs[k] >= 1 for k in ("k1", "k2")):
            raise BadAttr("im2col: k1/k2 must be positive ints")
    elif kind in ("read_variable", "assign", "assign_add"):
        need(["name"])
    elif kind == "random_uniform":
        need(["shape"])
        if not all(isinstance(d, int) and d >= 0 for d in attrs["shape"]):
            raise BadAttr(f"random_uniform: bad shape {attrs['shape']}")
    else:
        need([])


# --------------------------------------------------------------------------
# static shape / dtype inference


def _const_int(g: Graph, ref) -> int | None:
    v = g.const_value(ref)
    if v is not None and v.dtype == DType.I64 and v.rank == 0:
        return int(v.item())
    return None


def _broadcast_partial(kind, a, b):
    """Broadcast shapes where individual dims may be unknown (None)."""
    if a is None or b is None:
        return None
    rank = max(len(a), len(b))
    a = (1,) * (rank - len(a)) + tuple(a)
    b = (1,) * (rank - len(b)) + tuple(b)
    out = []
    for da, db in zip(a, b):
        if da is None and db is None:
            out.append(None)
        elif da is None:
            out.append(db if db != 1 else None)
        elif db is None:
            out.append(da if da != 1 else None)
        elif da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise IncompatibleShapes(f"{kind}: cannot broadcast {a} with {b}")
    return tuple(out)


def _infer(g: Graph, node: Node):
    """Returns (out_dtypes, out_shapes). Raises on statically-known errors."""
    kind, attrs = node.kind, node.attrs
    in_dt = [g.nodes[nid].out_dtypes[p] for nid, p in node.inputs]
    in_sh = [g.nodes[nid].out_shapes[p] for nid, p in node.inputs]

    def arity(n):
        if len(node.inputs) != n:
            raise BadAttr(f"{kind}: expected {n} inputs, got {len(node.inputs)}")

    if kind == "constant":
        v = attrs["value"]
        arity(0)
        return [v.dtype], [v.shape]
    if kind == "placeholder":
        arity(0)
        return [attrs["dtype"]], [tuple(attrs["shape"])]
    if kind == "loop_var":
        arity(0)
        return [DType.I64], [()]
    if kind in ("capture", "carried"):
        arity(0)
        sh = attrs["shape"]
        return [attrs["dtype"]], [tuple(sh) if sh is not None else None]

    if kind in BINARY_KINDS:
        arity(2)
        a_dt, b_dt = in_dt
        if a_dt is not None and b_dt is not None:
            if a_dt != b_dt:
                raise DTypeMismatch(f"{kind}: {a_dt.value} vs {b_dt.value}")
            if a_dt == DType.BOOL and kind not in T.COMPARISON_OPS:
                raise DTypeMismatch(f"{kind}: not defined on bool")
            if kind == "div" and a_dt != DType.F64:
                raise DTypeMismatch("div: only defined on f64")
        out_dt = DType.BOOL if kind in T.COMPARISON_OPS else a_dt
        return [out_dt], [_broadcast_partial(kind, in_sh[0], in_sh[1])]

    if kind in UNARY_KINDS:
        arity(1)
        dt = in_dt[0]
        if dt is not None:
            if kind == "logical_not":
                if dt != DType.BOOL:
                    raise DTypeMismatch("logical_not: requires bool")
            elif dt == DType.BOOL:
                raise DTypeMismatch(f"{kind}: not defined on bool")
            elif kind in ("exp", "log", "tanh", "sigmoid") and dt != DType.F64:
                raise DTypeMismatch(f"{kind}: requires f64")
        return [dt], [in_sh[0]]

    if kind == "cast":
        arity(1)
        return [attrs["dtype"]], [in_sh[0]]

    if kind == "matmul":
        arity(2)
        a, b = in_sh
        if a is not None and b is not None:
            if len(a) == 2 and len(b) == 2:
                if a[1] is not None and b[0] is not None and a[1] != b[0]:
                    raise IncompatibleShapes(f"matmul: {a} x {b}")
                return [in_dt[0]], [(a[0], b[1])]
            if len(a) == 3 and len(b) == 3:
                if a[2] is not None and b[1] is not None and a[2] != b[1]:
                    raise IncompatibleShapes(f"batch matmul: {a} x {b}")
                if a[0] is not None and b[0] is not None and a[0] != b[0]:
                    raise IncompatibleShapes(f"batch matmul: leading {a[0]} vs {b[0]}")
                return [in_dt[0]], [(a[0] if a[0] is not None else b[0], a[1], b[2])]
            raise RankError(f"matmul: unsupported ranks {len(a)} x {len(b)}")
        return [in_dt[0]], [None]

    if kind == "conv2d":
        arity(2)
        x, f = in_sh
        if x is not None and f is not None:
            if len(x) != 4 or len(f) != 4:
                raise RankError(f"conv2d: ranks {len(x)}, {len(f)}")
            if x[3] is not None and f[2] is not None and x[3] != f[2]:
                raise IncompatibleShapes(f"conv2d: channels {x[3]} vs {f[2]}")
            return [in_dt[0]], [(x[0], x[1], x[2], f[3])]
        return [in_dt[0]], [None]

    if kind == "conv2d_input_grad":
        arity(2)
        gy, f = in_sh
        if gy is not None and f is not None:
            if len(gy) != 4 or len(f) != 4:
                raise RankError(f"conv2d_input_grad: ranks {len(gy)}, {len(f)}")
            return [in_dt[0]], [(gy[0], gy[1], gy[2], f[2])]
        return [in_dt[0]], [None]

    if kind == "im2col":
        arity(1)
        x = in_sh[0]
        if x is not None:
            if len(x) != 4:
                raise RankError(f"im2col: rank {len(x)}")
            k = attrs["k1"] * attrs["k2"]
            c = x[3]
            return [in_dt[0]], [(x[0], x[1], x[2], None if c is None else k * c)]
        return [in_dt[0]], [None]

    if kind == "reduce_sum":
        arity(1)
        sh = in_sh[0]
        if sh is not None:
            axes = T._normalize_axes(attrs["axes"], len(sh))
            return [in_dt[0]], [tuple(d for i, d in enumerate(sh) if i not in axes)]
        return [in_dt[0]], [None]

    if kind == "concat":
        if not node.inputs:
            raise BadAttr("concat: needs at least one input")
        dt = next((d for d in in_dt if d is not None), None)
        if any(s is None for s in in_sh):
            return [dt], [None]
        rank = len(in_sh[0])
        if any(len(s) != rank for s in in_sh):
            raise IncompatibleShapes(f"concat: mixed ranks {in_sh}")
        ax = attrs["axis"] + rank if attrs["axis"] < 0 else attrs["axis"]
        if not 0 <= ax < max(rank, 1):
            raise T.AxisOutOfRange(f"concat: axis {attrs['axis']} out of range for rank {rank}")
        out = list(in_sh[0])
        for s in in_sh[1:]:
            for i in range(rank):
                if i != ax and s[i] is not None and out[i] is not None and s[i] != out[i]:
                    raise IncompatibleShapes(f"concat: {s} vs {in_sh[0]}")
        dims = [s[ax] for s in in_sh]
        out[ax] = sum(dims) if all(d is not None for d in dims) else None
        return [dt], [tuple(out)]

    if kind == "gather_rows":
        arity(2)
        x, idx = in_sh
        if in_dt[1] is not None and in_dt[1] != DType.I64:
            raise DTypeMismatch("gather_rows: index must be i64")
        if idx is not None and len(idx) > 1:
            raise RankError(f"gather_rows: index rank {len(idx)}")
        if x is not None and len(x) == 0:
            raise RankError("gather_rows: cannot gather from a scalar")
        if x is None or idx is None:
            return [in_dt[0]], [None]
        if len(idx) == 0:
            return [in_dt[0]], [tuple(x[1:])]
        return [in_dt[0]], [(idx[0],) + tuple(x[1:])]

    if kind == "scatter_rows":
        k = attrs["num_parts"]
        if len(node.inputs) != 2 * k + 1:
            raise BadAttr(f"scatter_rows: expected {2 * k + 1} inputs, got {len(node.inputs)}")
        total = _const_int(g, Ref(g, *node.inputs[-1]))
        parts = in_sh[k:2 * k]
        tail = next((tuple(s[1:]) for s in parts if s is not None and len(s) >= 1), None)
        dt = next((d for d in in_dt[k:2 * k] if d is not None), None)
        if tail is None:
            return [dt], [None]
        return [dt], [(total,) + tail]

    if kind == "scatter_add_rows":
        arity(2)
        idx, upd = in_sh
        if in_dt[0] is not None and in_dt[0] != DType.I64:
            raise DTypeMismatch("scatter_add_rows: index must be i64")
        total = attrs["total"]
        if idx is None or upd is None:
            return [in_dt[1]], [None]
        tail = tuple(upd) if len(idx) == 0 else tuple(upd[1:])
        return [in_dt[1]], [(total,) + tail]

    if kind == "reshape":
        arity(1)
        target = list(attrs["shape"])
        sh = in_sh[0]
        if -1 not in target:
            if shape_is_static(sh):
                if int(np.prod(target)) != int(np.prod(sh)):
                    raise IncompatibleShapes(f"reshape: {sh} -> {target} changes element count")
            return [in_dt[0]], [tuple(target)]
        if shape_is_static(sh):
            rest = int(np.prod([d for d in target if d != -1]))
            size = int(np.prod(sh))
            if rest == 0:
                target[target.index(-1)] = 0
            elif size % rest != 0:
                raise IncompatibleShapes(f"reshape: cannot infer -1 in {target} for {sh}")
            else:
                target[target.index(-1)] = size // rest
            return [in_dt[0]], [tuple(target)]
        return [in_dt[0]], [tuple(None if d == -1 else d for d in target)]

    if kind == "transpose":
        arity(1)
        perm = list(attrs["perm"])
        sh = in_sh[0]
        if sh is not None:
            if len(sh) != len(perm):
                raise BadPermutation(f"transpose: perm {perm} vs rank {len(sh)}")
            return [in_dt[0]], [tuple(sh[p] for p in perm)]
        return [in_dt[0]], [None]

    if kind == "stack":
        if not node.inputs:
            raise BadAttr("stack: needs at least one input")
        dt = next((d for d in in_dt if d is not None), None)
        sh = next((s for s in in_sh if s is not None), None)
        if sh is None:
            return [dt], [None]
        return [dt], [(len(node.inputs),) + tuple(sh)]

    if kind == "slice_leading":
        arity(2)
        x = in_sh[0]
        if in_dt[1] is not None and in_dt[1] != DType.I64:
            raise DTypeMismatch("slice_leading: count must be i64")
        n = _const_int(g, Ref(g, *node.inputs[1]))
        if x is None:
            return [in_dt[0]], [None]
        if len(x) == 0:
            raise RankError("slice_leading: cannot slice a scalar")
        return [in_dt[0]], [(n,) + tuple(x[1:])]

    if kind == "where_true":
        arity(1)
        if in_dt[0] is not None and in_dt[0] != DType.BOOL:
            raise DTypeMismatch("where_true: requires bool input")
        if in_sh[0] is not None and len(in_sh[0]) != 1:
            raise RankError("where_true: requires a rank-1 input")
        return [DType.I64], [(None,)]

    if kind == "dim0":
        arity(1)
        if in_sh[0] is not None and len(in_sh[0]) == 0:
            raise RankError("dim0: scalar has no leading dim")
        return [DType.I64], [()]

    if kind == "range_vec":
        arity(1)
        n = _const_int(g, Ref(g, *node.inputs[0]))
        return [DType.I64], [(n,)]

    if kind == "tile_leading":
        arity(2)
        n = _const_int(g, Ref(g, *node.inputs[1]))
        x = in_sh[0]
        return [in_dt[0]], [None if x is None else (n,) + tuple(x)]

    if kind == "complement":
        arity(2)
        if in_dt[0] is not None and in_dt[0] != DType.I64:
            raise DTypeMismatch("complement: index must be i64")
        return [DType.I64], [(None,)]

    if kind == "read_variable":
        arity(0)
        v = g.variables.get(attrs["name"]) or g.outer_variables.get(attrs["name"])
        if v is not None:
            return [v.dtype], [v.shape]
        return [None], [None]

    if kind in ("assign", "assign_add"):
        arity(1)
        return [], []

    if kind == "random_uniform":
        sh = tuple(attrs["shape"])
        if len(node.inputs) == 0:
            return [DType.F64], [sh]
        arity(1)
        n = _const_int(g, Ref(g, *node.inputs[0]))
        return [DType.F64], [(n,) + sh]

    if kind in BLOCK_KINDS:
        return _infer_block(g, node)

    raise BadAttr(f"no inference rule for kind {kind!r}")


def _merge_shape(a, b):
    if a is None or b is None:
        return None
    if len(a) != len(b):
        return None
    return tuple(da if da == db else None for da, db in zip(a, b))


def _infer_block(g: Graph, node: Node):
    blk = node.block
    if blk.kind == "parfor":
        body = blk.subgraphs["body"]
        it_dt = g.ref_dtype(node.inputs[0])
        if it_dt is not None and it_dt != DType.I64:
            raise DTypeMismatch("parfor: iters must be i64")
        n = _const_int(g, Ref(g, *node.inputs[0]))
        dts, shs = [], []
        for o in body.outputs:
            dts.append(body.ref_dtype(o))
            s = body.ref_shape(o)
            shs.append(None if s is None else (n,) + tuple(s))
        return dts, shs
    if blk.kind == "cond":
        c_dt = g.ref_dtype(node.inputs[0])
        if c_dt is not None and c_dt != DType.BOOL:
            raise NonScalarCondition("cond: condition must be a bool scalar")
        c_sh = g.ref_shape(node.inputs[0])
        if c_sh is not None and c_sh != ():
            raise NonScalarCondition(
                f"cond: condition must be a scalar, got shape {list(c_sh)}")
        t, e = blk.subgraphs["then"], blk.subgraphs["else"]
        if len(t.outputs) != len(e.outputs):
            raise ArityMismatch(f"cond: then returns {len(t.outputs)}, else {len(e.outputs)}")
        dts, shs = [], []
        for to, eo in zip(t.outputs, e.outputs):
            dts.append(t.ref_dtype(to) or e.ref_dtype(eo))
            shs.append(_merge_shape(t.ref_shape(to), e.ref_shape(eo)))
        return dts, shs
    # while
    body = blk.subgraphs["body"]
    if len(body.outputs) != blk.num_carried:
        raise ArityMismatch(f"while: body returns {len(body.outputs)}, carries {blk.num_carried}")
    dts, shs = [], []
    for k in range(blk.num_carried):
        init_dt = g.ref_dtype(node.inputs[k])
        init_sh = g.ref_shape(node.inputs[k])
        body_dt = body.ref_dtype(body.outputs[k])
        if init_dt is not None and body_dt is not None and init_dt != body_dt:
            raise DTypeMismatch(f"while: carried {k} dtype {init_dt.value} vs body {body_dt.value}")
        dts.append(init_dt or body_dt)
        shs.append(_merge_shape(init_sh, body.ref_shape(body.outputs[k])))
    return dts, shs
