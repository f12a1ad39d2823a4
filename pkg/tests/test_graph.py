"""Graph construction, validation, topological order, shape inference."""

import numpy as np
import pytest

from pforvec import DType, Graph, GraphBuilder, scalar, tensor
from pforvec.errors import (
    BadAttr,
    CycleDetected,
    NonScalarCondition,
    UnknownInput,
)
from pforvec.graph import Ref, shape_is_static


def test_add_node_assigns_sequential_ids():
    b = GraphBuilder()
    r0 = b.f64(1.0)
    r1 = b.f64(2.0)
    r2 = b.add(r0, r1)
    assert [r0.nid, r1.nid, r2.nid] == [0, 1, 2]


def test_unknown_kind_rejected():
    g = Graph()
    with pytest.raises(BadAttr):
        g.add_node("frobnicate")


def test_unknown_input_rejected():
    g = Graph()
    g.add_node("constant", attrs={"value": scalar(1.0)})
    with pytest.raises(UnknownInput):
        g.add_node("neg", [(5, 0)])
    with pytest.raises(UnknownInput):
        g.add_node("neg", [(0, 3)])  # constant has a single output port


def test_ref_from_other_graph_rejected():
    a, b = GraphBuilder(), GraphBuilder()
    x = a.f64(1.0)
    with pytest.raises(UnknownInput):
        b.graph.add_node("neg", [x])


def test_topo_order_ties_break_by_ascending_id():
    b = GraphBuilder()
    xs = [b.f64(float(k)) for k in range(5)]
    b.add(xs[3], xs[1])
    order = [n.id for n in b.graph.topo_order()]
    assert order == sorted(order)


def test_topo_order_respects_control_deps():
    b = GraphBuilder()
    b.variable("v", 0.0)
    w = b.assign("v", b.f64(1.0))
    r = b.read_variable("v", ctrl=[w])
    order = [n.id for n in b.graph.topo_order()]
    assert order.index(w.id) < order.index(r.nid)


def test_cycle_detection():
    b = GraphBuilder()
    x = b.f64(1.0)
    y = b.neg(x)
    # forge a back edge to provoke the cycle detector
    b.graph.nodes[x.nid].inputs.append((y.nid, 0))
    with pytest.raises(CycleDetected):
        b.graph.topo_order()


def test_validate_reports_unknown_variable():
    g = Graph()
    g.add_node("read_variable", attrs={"name": "ghost"})
    errors = g.validate()
    assert any("ghost" in e for e in errors)


def test_validate_clean_graph():
    b = GraphBuilder()
    b.graph.set_outputs([b.add(b.f64(1.0), b.f64(2.0))])
    assert b.graph.validate() == []


# --------------------------------------------------------------------------
# static inference


def test_infer_elementwise_broadcast():
    b = GraphBuilder()
    r = b.add(b.const(np.zeros((2, 3))), b.const(np.zeros((3,))))
    assert b.graph.ref_shape(r) == (2, 3)
    assert b.graph.ref_dtype(r) == DType.F64


def test_infer_comparison_is_bool():
    b = GraphBuilder()
    r = b.less(b.f64(1.0), b.f64(2.0))
    assert b.graph.ref_dtype(r) == DType.BOOL


def test_infer_matmul_and_reduce():
    b = GraphBuilder()
    m = b.matmul(b.const(np.zeros((2, 3))), b.const(np.zeros((3, 5))))
    assert b.graph.ref_shape(m) == (2, 5)
    r = b.reduce_sum(b.const(np.zeros((2, 3, 4))), [1, -1])
    assert b.graph.ref_shape(r) == (2,)


def test_infer_through_placeholder_unknown_dims():
    b = GraphBuilder()
    x = b.placeholder("x", DType.F64, (None, 3))
    r = b.add(x, b.const(np.zeros((3,))))
    assert b.graph.ref_shape(r) == (None, 3)
    assert not shape_is_static(b.graph.ref_shape(r))
    n = b.dim0(x)
    assert b.graph.ref_shape(n) == ()
    assert b.graph.ref_dtype(n) == DType.I64


def test_infer_gather_and_concat():
    b = GraphBuilder()
    X = b.const(np.zeros((5, 3)))
    row = b.gather(X, b.i64(1))
    assert b.graph.ref_shape(row) == (3,)
    sub = b.gather(X, b.const(np.array([0, 1], dtype=np.int64)))
    assert b.graph.ref_shape(sub) == (2, 3)
    c = b.concat([X, X], 1)
    assert b.graph.ref_shape(c) == (5, 6)


def test_infer_conv2d():
    b = GraphBuilder()
    y = b.conv2d(b.const(np.zeros((2, 5, 6, 3))), b.const(np.zeros((3, 3, 3, 4))))
    assert b.graph.ref_shape(y) == (2, 5, 6, 4)


def test_infer_range_and_tile():
    b = GraphBuilder()
    n = b.i64(4)
    rv = b.range_vec(n)
    assert b.graph.ref_shape(rv) == (4,)
    tl = b.tile_leading(b.const(np.zeros((3,))), n)
    assert b.graph.ref_shape(tl) == (4, 3)


def test_const_value_roundtrip():
    b = GraphBuilder()
    c = b.const(np.array([1.0, 2.0]))
    v = b.graph.const_value(c)
    assert v is not None and list(v.data) == [1.0, 2.0]
    assert b.graph.const_value(b.neg(c)) is None


# --------------------------------------------------------------------------
# blocks


def test_cond_requires_scalar_bool_condition():
    b = GraphBuilder()
    vec = b.const(np.array([True, False]))
    with pytest.raises(NonScalarCondition):
        b.cond(vec, lambda tb: [tb.f64(1.0)], lambda eb: [eb.f64(2.0)])


def test_cond_output_shapes():
    b = GraphBuilder()
    p = b.less(b.f64(0.0), b.f64(1.0))
    (r,) = b.cond(p,
                  lambda tb: [tb.const(np.zeros((2, 3)))],
                  lambda eb: [eb.const(np.ones((2, 3)))])
    assert b.graph.ref_shape(r) == (2, 3)


def test_while_carried_shapes():
    b = GraphBuilder()
    outs = b.while_loop(
        [b.i64(0), b.const(np.zeros((3,)))],
        lambda cb, car: cb.less(car[0], cb.i64(4)),
        lambda wb, car: [wb.add(car[0], wb.i64(1)), wb.neg(car[1])])
    assert b.graph.ref_shape(outs[0]) == ()
    assert b.graph.ref_shape(outs[1]) == (3,)


def test_parfor_output_is_stacked():
    b = GraphBuilder()
    outs = b.parfor(lambda bb, i: [bb.cast(i, DType.F64)], 5)
    assert b.graph.ref_shape(outs[0]) == (5,)


def test_parfor_dynamic_iters_unknown_leading_dim():
    b = GraphBuilder()
    n = b.placeholder("n", DType.I64, ())
    outs = b.parfor(lambda bb, i: [bb.cast(i, DType.F64)], n)
    assert b.graph.ref_shape(outs[0]) == (None,)


def test_block_capture_chain_through_levels():
    b = GraphBuilder()
    outer = b.const(np.arange(3.0))

    def body(bb, i):
        (r,) = bb.cond(bb.less(i, bb.i64(1)),
                       lambda tb: [tb.neg(tb._imp(outer))],
                       lambda eb: [eb._imp(outer)])
        return [r]

    outs = b.parfor(body, 2)
    assert b.graph.ref_shape(outs[0]) == (2, 3)
    assert b.graph.validate() == []


def test_variable_declarations_visible_in_blocks():
    b = GraphBuilder()
    b.variable("w", np.ones((2,)))

    def body(bb, i):
        return [bb.read_variable("w")]

    outs = b.parfor(body, 3)
    assert b.graph.ref_shape(outs[0]) == (3, 2)
    assert b.graph.validate() == []


def test_ref_repr_stable():
    b = GraphBuilder()
    x = b.f64(0.0)
    assert isinstance(x, Ref)
    assert tensor(1.5).shape == ()
