"""Random loop-body generation for differential testing.

Builds seeded random parallel-for programs mixing elementwise math, linear
algebra, nested control flow and stateful ops, then checks the statically
vectorized graph against the SIMD interpreter on the same inputs, variable
store and random stream.  Outputs that depend on random draws are compared
by shape and dtype only (the two executions consume the counter-based
stream in different orders by design).
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np

from .builder import GraphBuilder
from .errors import PforVecError
from .graph import Graph
from .interp import Executor, RngState, VariableStore
from .tensor import DType, allclose
from .vectorize import Policy, vectorize_graph

DEFAULT_WEIGHTS = {
    "elementwise": 0.60,
    "linalg": 0.15,
    "control": 0.15,
    "stateful": 0.10,
}

_SHAPES = [(), (3,), (4,), (2, 3)]


@dataclass
class GeneratedCase:
    seed: int
    graph: Graph
    tainted: list            # per graph output: depends on random draws
    var_tainted: dict = field(default_factory=dict)


@dataclass
class CaseResult:
    seed: int
    ok: bool
    message: str = ""
    oracle_dispatches: int = 0
    vectorized_dispatches: int = 0
    diagnostics: object = None


class _Val:
    __slots__ = ("ref", "shape", "taint")

    def __init__(self, ref, shape, taint=False):
        self.ref = ref
        self.shape = tuple(shape)
        self.taint = taint


class _BodyGen:
    """Emits one random loop body into a builder."""

    def __init__(self, rnd: random.Random, weights: dict, max_depth: int,
                 case: GeneratedCase, outer_pool: list):
        self.rnd = rnd
        self.weights = dict(DEFAULT_WEIGHTS)
        if weights:
            self.weights.update(weights)
        self.max_depth = max_depth
        self.case = case
        self.outer_pool = outer_pool  # loop-invariant _Vals from the outer graph

    def _pick_kind(self) -> str:
        kinds = list(self.weights)
        w = [self.weights[k] for k in kinds]
        return self.rnd.choices(kinds, weights=w, k=1)[0]

    def _pool_pick(self, pool, shape=None):
        cands = [v for v in pool if shape is None or v.shape == shape]
        return self.rnd.choice(cands) if cands else None

    def _seed_pool(self, bb: GraphBuilder, i, pool: list):
        # the loop index, a couple of invariant captures, and a gathered row
        idx_f = bb.cast(i, DType.F64)
        pool.append(_Val(idx_f, ()))
        for v in self.rnd.sample(self.outer_pool, k=min(2, len(self.outer_pool))):
            pool.append(_Val(bb._imp(v.ref), v.shape, v.taint))
        return pool

    def _emit_elementwise(self, bb, pool):
        if self.rnd.random() < 0.35:
            v = self._pool_pick(pool)
            op = self.rnd.choice(["neg", "tanh", "sigmoid", "relu", "square"])
            pool.append(_Val(getattr(bb, op)(v.ref), v.shape, v.taint))
            return
        a = self._pool_pick(pool)
        b_shape = a.shape if self.rnd.random() < 0.7 else ()
        bv = self._pool_pick(pool, b_shape) or a
        op = self.rnd.choice(["add", "sub", "mul", "max_", "min_", "div"])
        if op == "div":
            denom = bb.add(bb.square(bv.ref), bb.f64(1.0))
            r = bb.div(a.ref, denom)
        else:
            r = getattr(bb, op)(a.ref, bv.ref)
        shape = a.shape if len(a.shape) >= len(bv.shape) else bv.shape
        pool.append(_Val(r, shape, a.taint or bv.taint))

    def _emit_linalg(self, bb, pool):
        which = self.rnd.choice(["matmul", "reduce", "concat", "reshape"])
        if which == "matmul":
            a = self._pool_pick(pool, (2, 3))
            if a is None:
                a = _Val(bb.const(np.full((2, 3), 0.5)), (2, 3))
                pool.append(a)
            b = self._pool_pick(pool, (3,))
            if b is None:
                b = _Val(bb.const(np.full((3,), 0.25)), (3,))
                pool.append(b)
            m = bb.matmul(a.ref, bb.reshape(b.ref, [3, 1]))
            pool.append(_Val(bb.reshape(m, [2]), (2,), a.taint or b.taint))
        elif which == "reduce":
            v = self._pool_pick(pool)
            if v.shape:
                ax = self.rnd.randrange(len(v.shape))
                out = tuple(d for j, d in enumerate(v.shape) if j != ax)
                pool.append(_Val(bb.reduce_sum(v.ref, [ax]), out, v.taint))
            else:
                pool.append(_Val(bb.square(v.ref), (), v.taint))
        elif which == "concat":
            v = self._pool_pick(pool, (3,))
            w = self._pool_pick(pool, (3,))
            if v is not None and w is not None:
                pool.append(_Val(bb.concat([v.ref, w.ref], 0), (6,), v.taint or w.taint))
        else:
            v = self._pool_pick(pool, (2, 3))
            if v is not None:
                pool.append(_Val(bb.reshape(v.ref, [6]), (6,), v.taint))
            else:
                v = self._pool_pick(pool, (3,))
                if v is not None:
                    pool.append(_Val(bb.reshape(v.ref, [3, 1]), (3, 1), v.taint))

    def _emit_control(self, bb, pool, depth):
        if depth >= self.max_depth:
            return self._emit_elementwise(bb, pool)
        v = self._pool_pick(pool, ())
        w = self._pool_pick(pool)
        if self.rnd.random() < 0.6:
            pred = bb.less(v.ref, bb.f64(self.rnd.uniform(-0.5, 0.5)))

            def mk_branch(scale):
                def fn(sb):
                    sub_pool = [_Val(sb._imp(w.ref), w.shape, w.taint),
                                _Val(sb._imp(v.ref), v.shape, v.taint)]
                    for _ in range(self.rnd.randrange(1, 3)):
                        self._emit_op(sb, sub_pool, depth + 1)
                    out = sub_pool[-1]
                    if out.shape != w.shape:
                        out = self._pool_pick(sub_pool, w.shape) or sub_pool[0]
                    self._branch_taint = getattr(self, "_branch_taint", False) or out.taint
                    return [sb.mul(out.ref, sb.f64(scale))]
                return fn

            self._branch_taint = v.taint or w.taint
            (r,) = bb.cond(pred, mk_branch(1.5), mk_branch(-0.5))
            pool.append(_Val(r, w.shape, self._branch_taint))
        else:
            # bounded counting loop accumulating into a carried value
            data_dep = self.rnd.random() < 0.5
            i_ref = self._i_ref
            bound = bb.i64(self.rnd.randrange(1, 4))
            acc0 = self._pool_pick(pool, ())

            def cond_fn(cb, car):
                if data_dep:
                    return cb.less(car[0], cb._imp(i_ref))
                return cb.less(car[0], cb._imp(bound))

            def body_fn(wb, car):
                return [wb.add(car[0], wb.i64(1)),
                        wb.add(car[1], wb.mul(wb._imp(acc0.ref), wb.f64(0.5)))]

            outs = bb.while_loop([bb.i64(0), acc0.ref], cond_fn, body_fn)
            pool.append(_Val(outs[1], (), acc0.taint))

    def _emit_stateful(self, bb, pool):
        which = self.rnd.random()
        if which < 0.4 and self.case.var_tainted:
            name = self.rnd.choice(sorted(self.case.var_tainted))
            shape = self.case.graph.variables[name].shape
            v = self._pool_pick(pool, shape)
            if v is not None:
                node = bb.assign_add(name, v.ref)
                self.case.var_tainted[name] = self.case.var_tainted[name] or v.taint
                # lock-step semantics: all updates land before any read runs
                r = bb.read_variable(name, ctrl=[node])
                pool.append(_Val(r, shape, self.case.var_tainted[name]))
                return
        if which < 0.7 and self.case.var_tainted:
            name = self.rnd.choice(sorted(self.case.var_tainted))
            shape = self.case.graph.variables[name].shape
            pool.append(_Val(bb.read_variable(name), shape,
                             self.case.var_tainted[name]))
            return
        shape = self.rnd.choice([(), (3,)])
        pool.append(_Val(bb.random_uniform(shape), shape, True))

    def _emit_op(self, bb, pool, depth):
        kind = self._pick_kind()
        if kind == "elementwise":
            self._emit_elementwise(bb, pool)
        elif kind == "linalg":
            self._emit_linalg(bb, pool)
        elif kind == "control":
            self._emit_control(bb, pool, depth)
        else:
            self._emit_stateful(bb, pool)

    def build(self, bb: GraphBuilder, i, gather_src) -> list:
        self._i_ref = i
        pool: list = []
        self._seed_pool(bb, i, pool)
        row = bb.gather(gather_src.ref, i)
        pool.append(_Val(row, gather_src.shape[1:], gather_src.taint))
        for _ in range(self.rnd.randrange(3, 9)):
            self._emit_op(bb, pool, 0)
        n_out = self.rnd.randrange(1, 3)
        outs = [self.rnd.choice(pool) for _ in range(n_out)]
        self.case.tainted = [o.taint for o in outs]
        return [o.ref for o in outs]


def generate_case(seed: int, max_depth: int = 8, weights: dict | None = None,
                  n: int | None = None) -> GeneratedCase:
    rnd = random.Random(seed)
    b = GraphBuilder()
    case = GeneratedCase(seed=seed, graph=b.graph, tainted=[])

    # loop-invariant material: constants plus an occasional variable
    pool = []
    npr = np.random.default_rng(seed)
    for shape in _SHAPES:
        pool.append(_Val(b.const(npr.uniform(-1.0, 1.0, size=shape)), shape))
    if rnd.random() < 0.6:
        shape = rnd.choice([(), (3,)])
        b.variable("state", npr.uniform(-1.0, 1.0, size=shape))
        case.var_tainted["state"] = False
    rows = max(8, rnd.randrange(8, 13))
    gather_src = _Val(b.const(npr.uniform(-1.0, 1.0, size=(rows, 3))), (rows, 3))

    # the draw happens unconditionally so an explicit n leaves the body unchanged
    n_drawn = rnd.choice([0, 1, 2, 3, 4, 5, 6])
    n = n_drawn if n is None else n
    gen = _BodyGen(rnd, weights, max_depth, case, pool)
    outs = b.parfor(lambda bb, i: gen.build(bb, i, gather_src), n)
    b.graph.set_outputs(outs)
    return case


def check_case(case: GeneratedCase, tol: float = 1e-9,
               budget: int | None = None) -> CaseResult:
    """Run oracle and vectorized executions, compare outputs and state."""
    seed = case.seed
    try:
        ex1 = Executor(case.graph, store=VariableStore(case.graph.variables),
                       rng=RngState(seed), budget=budget)
        ref = ex1.run()
        g2, diags = vectorize_graph(case.graph, policy=Policy(stateful_assign_fallback=True))
        ex2 = Executor(g2, store=VariableStore(g2.variables),
                       rng=RngState(seed), budget=budget)
        res = ex2.run()
    except PforVecError as e:
        return CaseResult(seed, False, f"execution error: {type(e).__name__}: {e}")
    if len(ref) != len(res):
        return CaseResult(seed, False, f"output arity {len(ref)} vs {len(res)}")
    for k, (r, v, taint) in enumerate(zip(ref, res, case.tainted)):
        if r.dtype != v.dtype or r.shape != v.shape:
            return CaseResult(seed, False,
                              f"output {k}: {r.dtype.value}{list(r.shape)} vs "
                              f"{v.dtype.value}{list(v.shape)}",
                              ex1.dispatch_count, ex2.dispatch_count, diags)
        if taint:
            continue  # random-dependent: shape/dtype comparison only
        if not allclose(r, v, tol):
            delta = float(np.max(np.abs(r.data.astype(np.float64) - v.data.astype(np.float64)))) \
                if r.size else 0.0
            return CaseResult(seed, False, f"output {k}: max abs delta {delta:.3e}",
                              ex1.dispatch_count, ex2.dispatch_count, diags)
    for name, tainted in case.var_tainted.items():
        r, v = ex1.store.values[name], ex2.store.values[name]
        if r.dtype != v.dtype or r.shape != v.shape:
            return CaseResult(seed, False, f"variable {name!r}: shape/dtype mismatch",
                              ex1.dispatch_count, ex2.dispatch_count, diags)
        if not tainted and not allclose(r, v, tol):
            return CaseResult(seed, False, f"variable {name!r}: value mismatch",
                              ex1.dispatch_count, ex2.dispatch_count, diags)
    return CaseResult(seed, True, "", ex1.dispatch_count, ex2.dispatch_count, diags)
