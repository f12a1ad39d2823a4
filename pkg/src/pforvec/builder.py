"""Convenience layer for constructing graphs and nested control-flow blocks.

A GraphBuilder wraps one Graph.  Sub-fragment builders (for conditionals,
while loops and parallel-for bodies) hold a reference to their parent; using
a tensor from an enclosing graph automatically registers it as a block
capture, chaining through intermediate levels as needed.
"""

from __future__ import annotations

from . import tensor as T
from .graph import Block, Graph, Node, Ref
from .tensor import DType, TensorValue


class _CaptureSet:
    """Ordered captures of one block, shared by its subgraph builders."""

    def __init__(self):
        self.refs: list[Ref] = []
        self._index: dict = {}

    def index_of(self, ref: Ref) -> int:
        key = (ref.nid, ref.port)
        if key not in self._index:
            self._index[key] = len(self.refs)
            self.refs.append(ref)
        return self._index[key]


class GraphBuilder:
    def __init__(self, graph: Graph | None = None, parent: "GraphBuilder | None" = None,
                 capset: _CaptureSet | None = None):
        self.graph = graph if graph is not None else Graph()
        self.parent = parent
        if parent is not None and graph is None:
            self.graph.outer_variables = {**parent.graph.outer_variables,
                                          **parent.graph.variables}
        self.capset = capset
        self._cap_nodes: dict[int, Ref] = {}

    # -- value import ------------------------------------------------------

    def _imp(self, value) -> Ref:
        """Turn anything tensor-like into a Ref in this builder's graph."""
        if isinstance(value, Node):
            value = self.graph.out(value)
        if isinstance(value, Ref):
            if value.graph is self.graph:
                return value
            if self.parent is None:
                raise ValueError(f"{value} does not belong to this graph")
            outer = self.parent._imp(value)
            return self._capture(outer)
        return self.const(value)

    def _capture(self, outer: Ref) -> Ref:
        assert self.capset is not None
        idx = self.capset.index_of(outer)
        if idx not in self._cap_nodes:
            node = self.graph.add_node("capture", attrs={
                "index": idx,
                "dtype": outer.graph.ref_dtype(outer),
                "shape": outer.graph.ref_shape(outer),
            })
            self._cap_nodes[idx] = self.graph.out(node)
        return self._cap_nodes[idx]

    def _carried(self, index: int, dtype, shape) -> Ref:
        node = self.graph.add_node("carried", attrs={"index": index, "dtype": dtype, "shape": shape})
        return self.graph.out(node)

    def _add(self, kind, inputs=(), attrs=None, ctrl=()) -> Ref:
        ins = [self._imp(r) for r in inputs]
        node = self.graph.add_node(kind, ins, attrs, control_deps=[self._imp(c).nid for c in ctrl])
        return self.graph.out(node)

    # -- sources -----------------------------------------------------------

    def const(self, value, dtype: DType | None = None) -> Ref:
        return self._add("constant", attrs={"value": T.tensor(value, dtype)})

    def f64(self, value) -> Ref:
        return self.const(value, DType.F64)

    def i64(self, value) -> Ref:
        return self.const(value, DType.I64)

    def placeholder(self, name: str, dtype: DType, shape) -> Ref:
        return self._add("placeholder", attrs={"name": name, "dtype": dtype, "shape": tuple(shape)})

    # -- elementwise -------------------------------------------------------

    def add(self, a, b):
        return self._add("add", [a, b])

    def sub(self, a, b):
        return self._add("sub", [a, b])

    def mul(self, a, b):
        return self._add("mul", [a, b])

    def div(self, a, b):
        return self._add("div", [a, b])

    def max_(self, a, b):
        return self._add("max", [a, b])

    def min_(self, a, b):
        return self._add("min", [a, b])

    def less(self, a, b):
        return self._add("less", [a, b])

    def equal(self, a, b):
        return self._add("equal", [a, b])

    def neg(self, x):
        return self._add("neg", [x])

    def exp(self, x):
        return self._add("exp", [x])

    def log(self, x):
        return self._add("log", [x])

    def relu(self, x):
        return self._add("relu", [x])

    def tanh(self, x):
        return self._add("tanh", [x])

    def sigmoid(self, x):
        return self._add("sigmoid", [x])

    def square(self, x):
        return self._add("square", [x])

    def logical_not(self, x):
        return self._add("logical_not", [x])

    def cast(self, x, dtype: DType):
        return self._add("cast", [x], {"dtype": dtype})

    # -- linear algebra / shape ops ---------------------------------------

    def matmul(self, a, b):
        return self._add("matmul", [a, b])

    def conv2d(self, x, f):
        return self._add("conv2d", [x, f])

    def conv2d_input_grad(self, gy, f):
        return self._add("conv2d_input_grad", [gy, f])

    def im2col(self, x, k1: int, k2: int):
        return self._add("im2col", [x], {"k1": k1, "k2": k2})

    def reduce_sum(self, x, axes):
        return self._add("reduce_sum", [x], {"axes": tuple(axes)})

    def concat(self, xs, axis: int):
        return self._add("concat", list(xs), {"axis": axis})

    def gather(self, x, idx):
        return self._add("gather_rows", [x, idx])

    def scatter_rows(self, index_sets, parts, total):
        return self._add("scatter_rows", list(index_sets) + list(parts) + [total],
                         {"num_parts": len(list(index_sets))})

    def scatter_add_rows(self, idx, updates, total: int):
        return self._add("scatter_add_rows", [idx, updates], {"total": total})

    def reshape(self, x, shape):
        return self._add("reshape", [x], {"shape": tuple(shape)})

    def transpose(self, x, perm):
        return self._add("transpose", [x], {"perm": tuple(perm)})

    def stack(self, xs):
        return self._add("stack", list(xs))

    def slice_leading(self, x, n):
        return self._add("slice_leading", [x, n])

    def where_true(self, x):
        return self._add("where_true", [x])

    def dim0(self, x):
        return self._add("dim0", [x])

    def range_vec(self, n):
        return self._add("range_vec", [n])

    def tile_leading(self, x, n):
        return self._add("tile_leading", [x, n])

    def complement(self, idx, total):
        return self._add("complement", [idx, total])

    # -- state -------------------------------------------------------------

    def variable(self, name: str, init) -> str:
        self.graph.declare_variable(name, T.tensor(init))
        return name

    def read_variable(self, name: str, ctrl=()):
        return self._add("read_variable", attrs={"name": name}, ctrl=ctrl)

    def assign(self, name: str, value, ctrl=()) -> Node:
        ins = [self._imp(value)]
        return self.graph.add_node("assign", ins, {"name": name},
                                   control_deps=[self._imp(c).nid for c in ctrl])

    def assign_add(self, name: str, value, ctrl=()) -> Node:
        ins = [self._imp(value)]
        return self.graph.add_node("assign_add", ins, {"name": name},
                                   control_deps=[self._imp(c).nid for c in ctrl])

    def random_uniform(self, shape, n=None):
        ins = [] if n is None else [n]
        return self._add("random_uniform", ins, {"shape": tuple(shape)})

    # -- control-flow blocks ----------------------------------------------

    def cond(self, c, then_fn, else_fn, ctrl=()):
        """Scalar-bool conditional; both branches must return the same arity."""
        c = self._imp(c)
        capset = _CaptureSet()
        tb = GraphBuilder(parent=self, capset=capset)
        t_outs = [tb._imp(o) for o in then_fn(tb)]
        tb.graph.set_outputs(t_outs)
        eb = GraphBuilder(parent=self, capset=capset)
        e_outs = [eb._imp(o) for o in else_fn(eb)]
        eb.graph.set_outputs(e_outs)
        blk = Block("cond", {"then": tb.graph, "else": eb.graph}, out_arity=len(t_outs))
        node = self.graph.build_block("cond", blk, [c] + capset.refs,
                                      control_deps=[self._imp(x).nid for x in ctrl])
        return [self.graph.out(node, k) for k in range(blk.out_arity)]

    def while_loop(self, init, cond_fn, body_fn, ctrl=()):
        """Loop with carried values; cond_fn must produce a scalar bool."""
        init = [self._imp(v) for v in init]
        dts = [self.graph.ref_dtype(v) for v in init]
        shs = [self.graph.ref_shape(v) for v in init]
        capset = _CaptureSet()
        cb = GraphBuilder(parent=self, capset=capset)
        c_car = [cb._carried(k, dts[k], shs[k]) for k in range(len(init))]
        cb.graph.set_outputs([cb._imp(cond_fn(cb, c_car))])
        bb = GraphBuilder(parent=self, capset=capset)
        b_car = [bb._carried(k, dts[k], shs[k]) for k in range(len(init))]
        new_car = [bb._imp(v) for v in body_fn(bb, b_car)]
        bb.graph.set_outputs(new_car)
        blk = Block("while", {"cond": cb.graph, "body": bb.graph}, num_carried=len(init))
        node = self.graph.build_block("while", blk, init + capset.refs,
                                      control_deps=[self._imp(x).nid for x in ctrl])
        return [self.graph.out(node, k) for k in range(len(init))]

    def parfor(self, body_fn, iters, ctrl=()) -> list:
        """Build a parallel-for block node; returns its stacked output refs."""
        node = self.parfor_node(body_fn, iters, ctrl)
        return [self.graph.out(node, k) for k in range(node.block.out_arity)]

    def parfor_node(self, body_fn, iters, ctrl=()) -> Node:
        iters = self._imp(iters if not isinstance(iters, int) else T.scalar(iters, DType.I64))
        capset = _CaptureSet()
        bb = GraphBuilder(parent=self, capset=capset)
        i = bb.graph.add_node("loop_var")
        outs = [bb._imp(o) for o in body_fn(bb, bb.graph.out(i))]
        bb.graph.set_outputs(outs)
        blk = Block("parfor", {"body": bb.graph}, out_arity=len(outs))
        return self.graph.build_block("parfor", blk, [iters] + capset.refs,
                                      control_deps=[self._imp(x).nid for x in ctrl])
