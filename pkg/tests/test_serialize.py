"""Text format round trips, error positions, float fidelity."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pforvec import GraphBuilder, dumps, loads
from pforvec.errors import ParseError
from pforvec.interp import Executor
from pforvec.randgen import generate_case
from pforvec.tensor import DType, allclose


def roundtrip(g):
    text = dumps(g)
    g2 = loads(text)
    assert dumps(g2) == text, "serialization is not a fixed point"
    return g2


def test_simple_roundtrip():
    b = GraphBuilder()
    x = b.const(np.array([0.5, 1.5]))
    b.graph.set_outputs([b.add(x, x)])
    g2 = roundtrip(b.graph)
    assert len(g2.nodes) == 2
    assert g2.nodes[1].kind == "add"
    assert g2.outputs == [(1, 0)]


def test_variable_roundtrip():
    b = GraphBuilder()
    b.variable("w", np.array([[1.0, 2.0], [3.0, 4.0]]))
    b.graph.set_outputs([b.read_variable("w")])
    g2 = roundtrip(b.graph)
    assert "w" in g2.variables
    assert np.allclose(g2.variables["w"].data, [[1.0, 2.0], [3.0, 4.0]])


def test_placeholder_unknown_dims_roundtrip():
    b = GraphBuilder()
    x = b.placeholder("x", DType.F64, (None, 3))
    b.graph.set_outputs([b.neg(x)])
    g2 = roundtrip(b.graph)
    assert g2.nodes[0].attrs["shape"] == (None, 3)
    assert g2.nodes[0].attrs["name"] == "x"


def test_string_escaping():
    b = GraphBuilder()
    b.placeholder('we"ird\\name', DType.F64, ())
    g2 = roundtrip(b.graph)
    assert g2.nodes[0].attrs["name"] == 'we"ird\\name'


def test_float_fidelity():
    specials = [0.1, 1.0 / 3.0, 1e-300, -1e300, math.pi,
                float("inf"), float("-inf")]
    b = GraphBuilder()
    c = b.const(np.array(specials))
    b.graph.set_outputs([c])
    g2 = roundtrip(b.graph)
    got = g2.nodes[0].attrs["value"].data
    assert all(x == y for x, y in zip(got, specials))


def test_nan_roundtrip():
    b = GraphBuilder()
    b.graph.set_outputs([b.const(np.array([float("nan")]))])
    g2 = roundtrip(b.graph)
    assert math.isnan(g2.nodes[0].attrs["value"].data[0])


def test_bool_and_int_tensor_roundtrip():
    b = GraphBuilder()
    b.const(np.array([True, False]))
    b.const(np.array([-3, 0, 7], dtype=np.int64))
    g2 = roundtrip(b.graph)
    assert list(g2.nodes[0].attrs["value"].data) == [True, False]
    assert list(g2.nodes[1].attrs["value"].data) == [-3, 0, 7]


def test_control_deps_roundtrip():
    b = GraphBuilder()
    b.variable("v", 0.0)
    w = b.assign("v", b.f64(2.0))
    r = b.read_variable("v", ctrl=[w])
    b.graph.set_outputs([r])
    g2 = roundtrip(b.graph)
    assert g2.nodes[r.nid].control_deps == {w.id}


def test_multi_output_port_refs():
    b = GraphBuilder()
    outs = b.while_loop(
        [b.i64(0), b.f64(0.0)],
        lambda cb, car: cb.less(car[0], cb.i64(3)),
        lambda wb, car: [wb.add(car[0], wb.i64(1)), wb.add(car[1], wb.f64(0.5))])
    b.graph.set_outputs([outs[1]])
    text = dumps(b.graph)
    assert ":1" in text
    roundtrip(b.graph)


def test_nested_blocks_roundtrip():
    b = GraphBuilder()

    def body(bb, i):
        (r,) = bb.cond(bb.less(i, bb.i64(2)),
                       lambda tb: [tb.mul(tb._imp(i), tb.i64(2))],
                       lambda eb: [eb.add(eb._imp(i), eb.i64(10))])
        return [r]

    b.graph.set_outputs(b.parfor(body, 4))
    g2 = roundtrip(b.graph)
    (want,) = Executor(b.graph).run()
    (got,) = Executor(g2).run()
    assert allclose(want, got)


def test_nested_variable_reference_roundtrip():
    b = GraphBuilder()
    b.variable("state", np.zeros((2,)))
    b.graph.set_outputs(b.parfor(lambda bb, i: [bb.read_variable("state")], 3))
    g2 = roundtrip(b.graph)
    assert g2.validate() == []


@pytest.mark.parametrize("seed", range(25))
def test_random_graph_roundtrip(seed):
    case = generate_case(seed)
    roundtrip(case.graph)


@given(st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_random_graph_roundtrip_hypothesis(seed):
    roundtrip(generate_case(seed).graph)


# --------------------------------------------------------------------------
# parse errors


def test_parse_error_reports_position():
    with pytest.raises(ParseError) as ei:
        loads("%0 = constant[value=f64[]{1.0}]()\n%1 = @bogus()\n")
    assert ei.value.line == 2
    assert ei.value.col == 6


def test_parse_error_undefined_reference():
    with pytest.raises(ParseError) as ei:
        loads("%0 = neg(%4)\n")
    assert "%4" in str(ei.value)


def test_parse_error_bad_block_kind():
    text = "%0 = neg { body {\noutputs()\n} }\n"
    with pytest.raises(ParseError):
        loads(text)


def test_parse_error_trailing_input():
    with pytest.raises(ParseError):
        loads("outputs()\njunk\n")


def test_comments_and_whitespace_ignored():
    g = loads("# a comment\n%0 = constant[value=i64[]{7}]()   # trailing\noutputs(%0)\n")
    assert int(g.nodes[0].attrs["value"].item()) == 7
