"""Vectorizer: golden forms, control flow, stackedness, fallback, policy."""

import pathlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pforvec import (
    DType,
    Executor,
    GraphBuilder,
    Policy,
    RngState,
    VariableStore,
    allclose,
    dumps,
    vectorize_graph,
)
from pforvec.errors import StatefulNotSupported
from pforvec.randgen import check_case, generate_case
from pforvec.vectorize import default_registry

from worked_examples import GOLDEN_EXAMPLES, cond_example, while_example

GOLDEN_DIR = pathlib.Path(__file__).parent / "golden"


def oracle_vs_vectorized(g, tol=1e-9, policy=None, seed=0):
    ref = Executor(g, store=VariableStore(g.variables), rng=RngState(seed)).run()
    g2, diags = vectorize_graph(g, policy=policy)
    got = Executor(g2, store=VariableStore(g2.variables), rng=RngState(seed)).run()
    assert len(ref) == len(got)
    for r, v in zip(ref, got):
        assert r.dtype == v.dtype and r.shape == v.shape
        assert allclose(r, v, tol), f"max delta {np.max(np.abs(r.data - v.data))}"
    return g2, diags


# --------------------------------------------------------------------------
# golden worked examples


@pytest.mark.parametrize("name", sorted(GOLDEN_EXAMPLES))
def test_golden_form(name):
    g = GOLDEN_EXAMPLES[name]()
    g2, _ = vectorize_graph(g)
    want = (GOLDEN_DIR / f"{name}.pfg").read_text()
    assert dumps(g2) == want


@pytest.mark.parametrize("name", sorted(GOLDEN_EXAMPLES))
def test_golden_numerics(name):
    oracle_vs_vectorized(GOLDEN_EXAMPLES[name]())


def test_pairwise_body_becomes_add_sub():
    g2, _ = vectorize_graph(GOLDEN_EXAMPLES["pairwise_sum_diff"]())
    kinds = sorted(n.kind for n in g2.nodes.values())
    assert kinds == ["add", "constant", "constant", "constant", "sub"]


def test_gather_identity_adds_no_compute():
    src = GOLDEN_EXAMPLES["gather_identity"]()
    g2, _ = vectorize_graph(src)
    assert all(n.kind == "constant" for n in g2.nodes.values())
    out_nid, _ = g2.outputs[0]
    assert g2.nodes[out_nid].kind == "constant"


def test_reduce_sum_axes_renumbered():
    g2, _ = vectorize_graph(GOLDEN_EXAMPLES["reduce_sum_renumber"]())
    (node,) = [n for n in g2.nodes.values() if n.kind == "reduce_sum"]
    assert node.attrs["axes"] == (2, -1)


def test_concat_axis_shifted():
    g2, _ = vectorize_graph(GOLDEN_EXAMPLES["concat_shift"]())
    (node,) = [n for n in g2.nodes.values() if n.kind == "concat"]
    assert node.attrs["axis"] == 1


def test_matmul_fold_structure():
    g2, _ = vectorize_graph(GOLDEN_EXAMPLES["matmul_fold"]())
    kinds = [n.kind for n in g2.nodes.values() if n.kind != "constant"]
    assert kinds == ["reshape", "matmul", "reshape"]


def test_conv2d_fold_structure():
    g2, _ = vectorize_graph(GOLDEN_EXAMPLES["conv2d_fold"]())
    kinds = [n.kind for n in g2.nodes.values() if n.kind != "constant"]
    assert kinds == ["reshape", "conv2d", "reshape"]


# --------------------------------------------------------------------------
# control flow


def test_cond_example_values():
    g2, _ = oracle_vs_vectorized(cond_example())
    (r,) = Executor(g2).run()
    assert r.dtype == DType.I64
    assert list(r.data) == [0, 2, 12, 13]


def test_while_example_values():
    g2, _ = oracle_vs_vectorized(while_example())
    (r,) = Executor(g2).run()
    assert r.dtype == DType.I64
    assert list(r.data) == [0, 1, 2, 3, 4]


def test_cond_partition_covers_all_iterations():
    # the generated graph partitions by where_true / complement; together the
    # two index sets must cover 0..n-1, which the stitched output shape shows
    for n in (0, 1, 2, 5, 9):
        b = GraphBuilder()

        def body(bb, i):
            (r,) = bb.cond(bb.less(i, bb.i64(3)),
                           lambda tb: [tb.mul(tb._imp(i), tb.i64(2))],
                           lambda eb: [eb.add(eb._imp(i), eb.i64(100))])
            return [r]

        b.graph.set_outputs(b.parfor(body, n))
        g2, _ = oracle_vs_vectorized(b.graph)
        (r,) = Executor(g2).run()
        assert r.shape == (n,)
        want = [2 * i if i < 3 else i + 100 for i in range(n)]
        assert list(r.data) == want


def test_cond_invariant_condition_fast_path():
    b = GraphBuilder()
    flag = b.less(b.f64(0.0), b.f64(1.0))

    def body(bb, i):
        (r,) = bb.cond(bb._imp(flag),
                       lambda tb: [tb.cast(tb._imp(i), DType.F64)],
                       lambda eb: [eb.f64(-1.0)])
        return [r]

    b.graph.set_outputs(b.parfor(body, 4))
    g2, _ = oracle_vs_vectorized(b.graph)
    # no per-iteration partitioning: the generated graph needs no scatter
    assert not any(n.kind == "scatter_rows" for n in g2.nodes.values())


def test_while_invariant_condition_fast_path():
    b = GraphBuilder()

    def body(bb, i):
        (cnt, acc) = bb.while_loop(
            [bb.i64(0), bb.cast(i, DType.F64)],
            lambda cb, car: cb.less(car[0], cb.i64(3)),
            lambda wb, car: [wb.add(car[0], wb.i64(1)), wb.mul(car[1], wb.f64(2.0))])
        return [acc]

    b.graph.set_outputs(b.parfor(body, 4))
    g2, _ = oracle_vs_vectorized(b.graph)
    (r,) = Executor(g2).run()
    assert list(r.data) == [0.0, 8.0, 16.0, 24.0]
    assert not any(n.kind == "scatter_rows" for n in g2.nodes.values())


def test_while_data_dependent_active_set():
    g2, _ = oracle_vs_vectorized(while_example())
    # the general path does per-trip index bookkeeping
    assert any(n.kind == "while" for n in g2.nodes.values())


def test_cond_in_while_nested():
    b = GraphBuilder()

    def body(bb, i):
        def w_body(wb, car):
            (step,) = wb.cond(wb.less(car[1], wb.f64(2.0)),
                              lambda tb: [tb.f64(1.0)],
                              lambda eb: [eb.f64(0.25)])
            return [wb.add(car[0], wb.i64(1)), wb.add(car[1], step)]

        outs = bb.while_loop(
            [bb.i64(0), bb.cast(i, DType.F64)],
            lambda cb, car: cb.less(car[0], cb._imp(i)),
            w_body)
        return [outs[1]]

    b.graph.set_outputs(b.parfor(body, 5))
    oracle_vs_vectorized(b.graph)


def test_nested_parfor_expanded():
    b = GraphBuilder()

    def outer(bb, i):
        inner = bb.parfor_node(
            lambda ib, j: [ib.add(ib._imp(i), ib.mul(j, ib.i64(10)))], 3)
        return [bb.graph.out(inner, 0)]

    b.graph.set_outputs(b.parfor(outer, 2))
    g2, _ = oracle_vs_vectorized(b.graph)
    assert not any(n.kind == "parfor" for n in g2.nodes.values())
    (r,) = Executor(g2).run()
    assert r.data.tolist() == [[0, 10, 20], [1, 11, 21]]


# --------------------------------------------------------------------------
# stackedness


def test_invariant_body_computed_once_then_tiled():
    b = GraphBuilder()
    X = b.const(np.arange(6.0).reshape(2, 3))

    def body(bb, i):
        return [bb.tanh(bb.neg(bb._imp(X)))]

    b.graph.set_outputs(b.parfor(body, 5))
    g2, diags = oracle_vs_vectorized(b.graph)
    assert diags.fallback_count == 0
    # invariant compute happens once; only the output is materialized
    tiles = [n for n in g2.nodes.values() if n.kind == "tile_leading"]
    assert len(tiles) == 1
    assert sum(1 for n in g2.nodes.values() if n.kind == "tanh") == 1


def test_stacked_values_never_tiled():
    b = GraphBuilder()
    X = b.const(np.arange(8.0).reshape(4, 2))

    def body(bb, i):
        return [bb.square(bb.gather(bb._imp(X), i))]

    b.graph.set_outputs(b.parfor(body, 4))
    g2, diags = oracle_vs_vectorized(b.graph)
    assert diags.fallback_count == 0
    assert not any(n.kind == "tile_leading" for n in g2.nodes.values())


def test_mixed_rank_broadcast_padding():
    b = GraphBuilder()
    X = b.const(np.arange(6.0).reshape(3, 2))
    Y = b.const(np.arange(10.0).reshape(5, 2))

    def body(bb, i):
        return [bb.mul(bb._imp(X), bb.gather(bb._imp(Y), i))]

    b.graph.set_outputs(b.parfor(body, 5))
    g2, diags = oracle_vs_vectorized(b.graph)
    assert diags.fallback_count == 0


def test_dispatch_count_independent_of_n():
    counts = {}
    for n in (3, 64):
        b = GraphBuilder()
        npr = np.random.default_rng(0)
        X = b.const(npr.standard_normal((n, 6)))
        W = b.const(npr.standard_normal((6, 6)))

        def body(bb, i):
            x = bb.gather(bb._imp(X), i)
            return [bb.reshape(bb.matmul(bb.reshape(x, [1, 6]), bb._imp(W)), [6])]

        b.graph.set_outputs(b.parfor(body, n))
        g2, _ = vectorize_graph(b.graph)
        ex = Executor(g2)
        ex.run()
        counts[n] = ex.dispatch_count
    assert counts[3] == counts[64]


# --------------------------------------------------------------------------
# fallback and policy


def test_force_fallback_matches_fast_path():
    for seed in range(20):
        case = generate_case(seed, weights={"stateful": 0.0})
        policy = Policy(force_fallback=frozenset(default_registry()))
        oracle_vs_vectorized(case.graph, policy=policy, seed=seed)


def test_force_fallback_dispatch_linear_in_n():
    counts = {}
    for n in (4, 8):
        b = GraphBuilder()
        X = b.const(np.arange(2.0 * n).reshape(n, 2))

        def body(bb, i):
            return [bb.square(bb.gather(bb._imp(X), i))]

        b.graph.set_outputs(b.parfor(body, n))
        g2, diags = vectorize_graph(
            b.graph, policy=Policy(force_fallback=frozenset(default_registry())))
        assert diags.fallback_count > 0
        ex = Executor(g2)
        ex.run()
        counts[n] = ex.dispatch_count
    assert counts[8] > counts[4]


def test_diagnostics_report_mentions_reason():
    b = GraphBuilder()
    X = b.const(np.arange(8.0).reshape(4, 2))

    def body(bb, i):
        return [bb.square(bb.gather(bb._imp(X), i))]

    b.graph.set_outputs(b.parfor(body, 4))
    _, diags = vectorize_graph(
        b.graph, policy=Policy(force_fallback=frozenset({"square"})))
    assert diags.fallback_count == 1
    assert "forced by policy" in diags.report()


def test_stacked_assign_rejected_without_policy():
    b = GraphBuilder()
    b.variable("v", 0.0)

    def body(bb, i):
        w = bb.assign("v", bb.cast(i, DType.F64))
        return [bb.read_variable("v", ctrl=[w])]

    b.graph.set_outputs(b.parfor(body, 3))
    with pytest.raises(StatefulNotSupported):
        vectorize_graph(b.graph)
    # permitted under the fallback policy and then equivalent to the oracle
    oracle_vs_vectorized(b.graph, policy=Policy(stateful_assign_fallback=True))


def test_assign_add_accumulates_once():
    b = GraphBuilder()
    b.variable("acc", 0.0)

    def body(bb, i):
        w = bb.assign_add("acc", bb.cast(i, DType.F64))
        return [bb.read_variable("acc", ctrl=[w])]

    b.graph.set_outputs(b.parfor(body, 4))
    g2, _ = oracle_vs_vectorized(b.graph)
    assigns = [n for n in g2.nodes.values() if n.kind == "assign_add"]
    assert len(assigns) == 1


def test_random_uniform_single_draw():
    b = GraphBuilder()

    def body(bb, i):
        return [bb.random_uniform((3,))]

    b.graph.set_outputs(b.parfor(body, 5))
    g2, _ = vectorize_graph(b.graph)
    (r,) = Executor(g2, rng=RngState(0)).run()
    assert r.shape == (5, 3)
    draws = [n for n in g2.nodes.values() if n.kind == "random_uniform"]
    assert len(draws) == 1


def test_vectorize_graph_without_parfor_is_copy():
    b = GraphBuilder()
    b.graph.set_outputs([b.add(b.f64(1.0), b.f64(2.0))])
    g2, diags = vectorize_graph(b.graph)
    assert g2 is not b.graph
    (r,) = Executor(g2).run()
    assert r.item() == 3.0


def test_dynamic_iteration_count():
    b = GraphBuilder()
    n = b.placeholder("n", DType.I64, ())
    b.graph.set_outputs(b.parfor(lambda bb, i: [bb.mul(bb.cast(i, DType.F64),
                                                       bb.f64(3.0))], n))
    g2, _ = vectorize_graph(b.graph)
    for k in (0, 1, 6):
        (r,) = Executor(g2).run(feeds={"n": k})
        assert list(r.data) == [3.0 * j for j in range(k)]


# --------------------------------------------------------------------------
# randomized differential property


@given(st.integers(0, 10**6), st.sampled_from([0, 1, 3, 7]))
@settings(max_examples=60, deadline=None)
def test_random_bodies_match_oracle(seed, n):
    case = generate_case(seed, n=n)
    result = check_case(case)
    assert result.ok, f"seed {seed} n={n}: {result.message}"


@given(st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_control_heavy_bodies_match_oracle(seed):
    case = generate_case(seed, weights={"control": 0.6, "elementwise": 0.3,
                                        "linalg": 0.1, "stateful": 0.0})
    result = check_case(case)
    assert result.ok, f"seed {seed}: {result.message}"
