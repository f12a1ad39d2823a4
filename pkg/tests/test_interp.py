"""Reference executor: sequential semantics, SIMD parfor semantics, budget."""

import numpy as np
import pytest

from pforvec import (
    DType,
    Executor,
    GraphBuilder,
    RngState,
    VariableStore,
    execute,
    scalar,
)
from pforvec.errors import (
    BudgetExceeded,
    ExecError,
    IndexOutOfBounds,
    PforVecError,
    ShapeVariance,
)


def run1(b, ref, **kw):
    b.graph.set_outputs([ref])
    return Executor(b.graph, **kw).run()[0]


# --------------------------------------------------------------------------
# sequential


def test_arithmetic_chain():
    b = GraphBuilder()
    r = b.mul(b.add(b.f64(2.0), b.f64(3.0)), b.f64(4.0))
    assert run1(b, r).item() == 20.0


def test_placeholder_feed():
    b = GraphBuilder()
    x = b.placeholder("x", DType.F64, (None,))
    b.graph.set_outputs([b.neg(x)])
    (out,) = Executor(b.graph).run(feeds={"x": np.array([1.0, -2.0])})
    assert list(out.data) == [-1.0, 2.0]
    with pytest.raises(ExecError):
        Executor(b.graph).run()


def test_while_counts():
    b = GraphBuilder()
    outs = b.while_loop(
        [b.i64(0), b.f64(1.0)],
        lambda cb, car: cb.less(car[0], cb.i64(5)),
        lambda wb, car: [wb.add(car[0], wb.i64(1)), wb.mul(car[1], wb.f64(2.0))])
    b.graph.set_outputs(outs)
    i, p = Executor(b.graph).run()
    assert i.item() == 5
    assert p.item() == 32.0


def test_while_zero_trips():
    b = GraphBuilder()
    outs = b.while_loop(
        [b.i64(9)],
        lambda cb, car: cb.less(car[0], cb.i64(0)),
        lambda wb, car: [wb.add(car[0], wb.i64(1))])
    b.graph.set_outputs(outs)
    assert Executor(b.graph).run()[0].item() == 9


def test_cond_takes_one_branch():
    b = GraphBuilder()
    (r,) = b.cond(b.less(b.f64(1.0), b.f64(2.0)),
                  lambda tb: [tb.f64(10.0)],
                  lambda eb: [eb.f64(20.0)])
    assert run1(b, r).item() == 10.0


def test_state_chain_with_control_deps():
    b = GraphBuilder()
    b.variable("v", 1.0)
    w1 = b.assign("v", b.f64(5.0))
    w2 = b.assign_add("v", b.f64(2.5), ctrl=[w1])
    r = b.read_variable("v", ctrl=[w2])
    assert run1(b, r).item() == 7.5


def test_variable_write_shape_checked():
    b = GraphBuilder()
    b.variable("v", np.zeros((2,)))
    b.assign("v", b.const(np.zeros((3,))))
    b.graph.set_outputs([b.read_variable("v")])
    with pytest.raises(PforVecError):
        Executor(b.graph).run()


def test_runtime_gather_out_of_bounds_wrapped():
    b = GraphBuilder()
    X = b.const(np.zeros((2, 2)))
    idx = b.placeholder("i", DType.I64, ())
    b.graph.set_outputs([b.gather(X, idx)])
    with pytest.raises(ExecError) as ei:
        Executor(b.graph).run(feeds={"i": 5})
    assert isinstance(ei.value.__cause__, IndexOutOfBounds)


# --------------------------------------------------------------------------
# dispatch counting and budget


def test_dispatch_count_sequential():
    b = GraphBuilder()
    r = b.add(b.f64(1.0), b.f64(2.0))
    b.graph.set_outputs([r])
    ex = Executor(b.graph)
    ex.run()
    assert ex.dispatch_count == 3  # two constants + one add


def test_parfor_dispatch_grows_linearly():
    counts = {}
    for n in (2, 4, 8):
        b = GraphBuilder()
        outs = b.parfor(lambda bb, i: [bb.add(bb.cast(i, DType.F64), bb.f64(1.0))], n)
        b.graph.set_outputs(outs)
        ex = Executor(b.graph)
        ex.run()
        counts[n] = ex.dispatch_count
    assert counts[8] - counts[4] == 2 * (counts[4] - counts[2])


def test_budget_exceeded():
    b = GraphBuilder()
    outs = b.while_loop(
        [b.i64(0)],
        lambda cb, car: cb.less(car[0], cb.i64(10**7)),
        lambda wb, car: [wb.add(car[0], wb.i64(1))])
    b.graph.set_outputs(outs)
    with pytest.raises(BudgetExceeded):
        Executor(b.graph, budget=1000).run()


def test_budget_env_var(monkeypatch):
    monkeypatch.setenv("PFORVEC_STEP_BUDGET", "7")
    b = GraphBuilder()
    r = b.f64(0.0)
    for _ in range(10):
        r = b.neg(r)
    b.graph.set_outputs([r])
    with pytest.raises(BudgetExceeded):
        Executor(b.graph).run()


# --------------------------------------------------------------------------
# SIMD parfor semantics


def test_parfor_stacks_outputs():
    b = GraphBuilder()
    outs = b.parfor(lambda bb, i: [bb.mul(bb.cast(i, DType.F64), bb.f64(2.0))], 4)
    b.graph.set_outputs(outs)
    (r,) = Executor(b.graph).run()
    assert list(r.data) == [0.0, 2.0, 4.0, 6.0]


def test_parfor_zero_iterations():
    b = GraphBuilder()
    outs = b.parfor(lambda bb, i: [bb.const(np.zeros((2, 3)))], 0)
    b.graph.set_outputs(outs)
    (r,) = Executor(b.graph).run()
    assert r.shape == (0, 2, 3)


def test_parfor_shape_variance_detected():
    b = GraphBuilder()
    X = b.const(np.arange(6.0).reshape(3, 2))

    def body(bb, i):
        # slice length varies with the loop index
        return [bb.slice_leading(bb._imp(X), i)]

    b.graph.set_outputs(b.parfor(body, 3))
    with pytest.raises((ShapeVariance, ExecError)):
        Executor(b.graph).run()


def test_simd_cond_partitions_active_set():
    b = GraphBuilder()

    def body(bb, i):
        (r,) = bb.cond(bb.less(i, bb.i64(2)),
                       lambda tb: [tb.mul(tb._imp(i), tb.i64(2))],
                       lambda eb: [eb.add(eb._imp(i), eb.i64(10))])
        return [r]

    b.graph.set_outputs(b.parfor(body, 4))
    (r,) = Executor(b.graph).run()
    assert list(r.data) == [0, 2, 12, 13]


def test_simd_while_active_set_shrinks():
    b = GraphBuilder()

    def body(bb, i):
        (r,) = bb.while_loop(
            [bb.i64(0)],
            lambda cb, car: cb.less(car[0], cb._imp(i)),
            lambda wb, car: [wb.add(car[0], wb.i64(1))])
        return [r]

    b.graph.set_outputs(b.parfor(body, 5))
    (r,) = Executor(b.graph).run()
    assert list(r.data) == [0, 1, 2, 3, 4]


def test_simd_stateful_lock_step():
    # every iteration's assign_add lands before any ctrl-dep read runs
    b = GraphBuilder()
    b.variable("acc", 0.0)

    def body(bb, i):
        w = bb.assign_add("acc", bb.f64(1.0))
        return [bb.read_variable("acc", ctrl=[w])]

    b.graph.set_outputs(b.parfor(body, 4))
    ex = Executor(b.graph)
    (r,) = ex.run()
    assert list(r.data) == [4.0, 4.0, 4.0, 4.0]
    assert ex.store.values["acc"].item() == 4.0


def test_simd_stateful_ascending_order():
    # writes within a lock step fire in ascending iteration order
    b = GraphBuilder()
    b.variable("last", 0.0)

    def body(bb, i):
        w = bb.assign("last", bb.cast(i, DType.F64))
        return [bb.read_variable("last", ctrl=[w])]

    b.graph.set_outputs(b.parfor(body, 3))
    ex = Executor(b.graph)
    (r,) = ex.run()
    assert list(r.data) == [2.0, 2.0, 2.0]
    assert ex.store.values["last"].item() == 2.0


def test_nested_parfor_simd():
    b = GraphBuilder()

    def outer(bb, i):
        inner = bb.parfor_node(
            lambda ib, j: [ib.add(ib._imp(i), ib.mul(j, ib.i64(10)))], 3)
        return [bb.graph.out(inner, 0)]

    b.graph.set_outputs(b.parfor(outer, 2))
    (r,) = Executor(b.graph).run()
    assert r.data.tolist() == [[0, 10, 20], [1, 11, 21]]


# --------------------------------------------------------------------------
# randomness


def test_rng_deterministic_in_seed_and_counter():
    a = RngState(7).draw((4,))
    b = RngState(7).draw((4,))
    c = RngState(8).draw((4,))
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_rng_counter_advances():
    r = RngState(0)
    first = r.draw((3,))
    second = r.draw((3,))
    assert r.counter == 2
    assert not np.array_equal(first.data, second.data)


def test_rng_values_in_unit_interval():
    v = RngState(123).draw((1000,))
    assert v.data.min() >= 0.0
    assert v.data.max() < 1.0
    assert abs(v.data.mean() - 0.5) < 0.05


def test_random_uniform_node():
    b = GraphBuilder()
    r = b.random_uniform((2, 3))
    out = run1(b, r, rng=RngState(5))
    assert out.shape == (2, 3)
    b2 = GraphBuilder()
    r2 = b2.random_uniform((2, 3))
    out2 = run1(b2, r2, rng=RngState(5))
    assert np.array_equal(out.data, out2.data)


def test_execute_wrapper():
    b = GraphBuilder()
    b.graph.set_outputs([b.add(b.f64(1.0), b.f64(1.0))])
    (r,) = execute(b.graph)
    assert r.item() == 2.0


def test_variable_store_log():
    store = VariableStore({"v": scalar(0.0)})
    b = GraphBuilder()
    b.variable("v", 0.0)
    w = b.assign("v", b.f64(1.0))
    b.graph.set_outputs([b.read_variable("v", ctrl=[w])])
    ex = Executor(b.graph, store=store)
    ex.run()
    kinds = [entry[1] for entry in store.log]
    assert kinds == ["write", "read"]
