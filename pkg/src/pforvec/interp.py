"""Reference executor.

Evaluates graphs eagerly in deterministic topological order, and executes
parallel-for blocks under lock-step SIMD semantics: every body node runs once
per active iteration, control flow partitions the active set, and stateful
ops fire in ascending iteration order within each lock step.  This executor
is the oracle the vectorizer is judged against.
"""

from __future__ import annotations

import os

import numpy as np

from . import tensor as T
from .errors import BudgetExceeded, ExecError, PforVecError, ShapeVariance
from .graph import BINARY_KINDS, UNARY_KINDS, Graph, Node, shape_is_static
from .tensor import DType, TensorValue

DEFAULT_STEP_BUDGET = 10**6


class VariableStore:
    """Named mutable tensors with serialized access and an access log."""

    def __init__(self, initial: dict | None = None):
        self.values: dict[str, TensorValue] = dict(initial or {})
        self.log: list[tuple] = []  # (node_id, 'read' | 'write', name)

    def copy(self) -> "VariableStore":
        return VariableStore(self.values)

    def read(self, name: str, node_id: int) -> TensorValue:
        if name not in self.values:
            raise PforVecError(f"unknown variable {name!r}")
        self.log.append((node_id, "read", name))
        return self.values[name]

    def write(self, name: str, value: TensorValue, node_id: int):
        old = self.values.get(name)
        if old is None:
            raise PforVecError(f"unknown variable {name!r}")
        if old.dtype != value.dtype or old.shape != value.shape:
            raise PforVecError(
                f"variable {name!r}: write of {value.dtype.value}{list(value.shape)} "
                f"does not match declared {old.dtype.value}{list(old.shape)}")
        self.log.append((node_id, "write", name))
        self.values[name] = value


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    x = (x + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x


class RngState:
    """Counter-based uniform generator; stream is pure in (seed, counter)."""

    def __init__(self, seed: int = 0, counter: int = 0):
        self.seed = seed
        self.counter = counter

    def copy(self) -> "RngState":
        return RngState(self.seed, self.counter)

    def draw(self, shape) -> TensorValue:
        shape = tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        k = np.arange(n, dtype=np.uint64)
        base = _mix64(np.array([self.seed], dtype=np.uint64))[0]
        dctr = _mix64(np.array([base ^ np.uint64(self.counter)], dtype=np.uint64))[0]
        bits = _mix64(dctr ^ k)
        vals = (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        self.counter += 1
        return TensorValue(DType.F64, vals.reshape(shape))


def rng_draw(rng: RngState, shape) -> TensorValue:
    return rng.draw(shape)


class Executor:
    """One execution owns its store and rng exclusively for its duration."""

    def __init__(self, graph: Graph, store: VariableStore | None = None,
                 rng: RngState | None = None, budget: int | None = None):
        self.graph = graph
        self.store = store if store is not None else VariableStore(graph.variables)
        self.rng = rng if rng is not None else RngState()
        if budget is None:
            budget = int(os.environ.get("PFORVEC_STEP_BUDGET", DEFAULT_STEP_BUDGET))
        self.budget = budget
        self.dispatch_count = 0

    def _tick(self, node: Node):
        self.dispatch_count += 1
        if self.dispatch_count > self.budget:
            raise BudgetExceeded(f"step budget {self.budget} exceeded at node {node.id}")

    # -- sequential execution ---------------------------------------------

    def run(self, feeds: dict | None = None, outputs=None) -> list[TensorValue]:
        feeds = feeds or {}
        env = self._run_graph(self.graph, {}, feeds)
        if outputs is None:
            outputs = [self.graph.out(nid, p) for nid, p in self.graph.outputs]
        return [env[self.graph._resolve(o)] for o in outputs]

    def _run_graph(self, g: Graph, binder: dict, feeds: dict) -> dict:
        env: dict = {}
        for node in g.topo_order():
            try:
                outs = self._eval_node(g, node, env, binder, feeds)
            except PforVecError as e:
                raise (e if isinstance(e, (ExecError, BudgetExceeded)) else ExecError(node.id, e)) from e
            for p, v in enumerate(outs):
                env[(node.id, p)] = v
        return env

    def _eval_node(self, g: Graph, node: Node, env: dict, binder: dict, feeds: dict):
        kind = node.kind
        if kind == "parfor":
            n = int(env[node.inputs[0]].item())
            caps = [env[r] for r in node.inputs[1:]]
            return self.execute_parfor_simd(node, n, caps, feeds)
        if kind == "cond":
            self._tick(node)
            c = bool(env[node.inputs[0]].item())
            caps = [env[r] for r in node.inputs[1:]]
            sub = node.block.subgraphs["then" if c else "else"]
            sub_env = self._run_graph(sub, {"capture": caps}, feeds)
            return [sub_env[o] for o in sub.outputs]
        if kind == "while":
            self._tick(node)
            k = node.block.num_carried
            carried = [env[r] for r in node.inputs[:k]]
            caps = [env[r] for r in node.inputs[k:]]
            cond_g = node.block.subgraphs["cond"]
            body_g = node.block.subgraphs["body"]
            while True:
                b = {"capture": caps, "carried": carried}
                c_env = self._run_graph(cond_g, b, feeds)
                if not bool(c_env[cond_g.outputs[0]].item()):
                    break
                b_env = self._run_graph(body_g, b, feeds)
                carried = [b_env[o] for o in body_g.outputs]
            return carried
        self._tick(node)
        in_vals = [env[r] for r in node.inputs]
        return self._eval_plain(g, node, in_vals, binder, feeds, None)

    # -- shared per-op evaluation -----------------------------------------

    def _eval_plain(self, g: Graph, node: Node, in_vals, binder: dict, feeds: dict, it):
        """Evaluate a non-block node.  `it` is the SIMD iteration or None."""
        kind, attrs = node.kind, node.attrs
        if kind == "constant":
            return [attrs["value"]]
        if kind == "placeholder":
            name = attrs["name"]
            if name not in feeds:
                raise PforVecError(f"missing feed for placeholder {name!r}")
            return [T.tensor(feeds[name], attrs["dtype"])]
        if kind == "loop_var":
            return [binder["loop_var"]]
        if kind == "capture":
            return [binder["capture"][attrs["index"]]]
        if kind == "carried":
            return [binder["carried"][attrs["index"]]]
        if kind in BINARY_KINDS:
            return [T.binary_elementwise(kind, *in_vals)]
        if kind in UNARY_KINDS:
            return [T.unary_elementwise(kind, in_vals[0])]
        if kind == "cast":
            return [T.cast(in_vals[0], attrs["dtype"])]
        if kind == "matmul":
            return [T.matmul(*in_vals)]
        if kind == "conv2d":
            return [T.conv2d(*in_vals)]
        if kind == "conv2d_input_grad":
            return [T.conv2d_input_grad(*in_vals)]
        if kind == "im2col":
            return [T.im2col(in_vals[0], attrs["k1"], attrs["k2"])]
        if kind == "reduce_sum":
            return [T.reduce_sum(in_vals[0], attrs["axes"])]
        if kind == "concat":
            return [T.concat(in_vals, attrs["axis"])]
        if kind == "gather_rows":
            return [T.gather_rows(*in_vals)]
        if kind == "scatter_rows":
            k = attrs["num_parts"]
            return [T.scatter_rows(in_vals[:k], in_vals[k:2 * k], int(in_vals[-1].item()))]
        if kind == "scatter_add_rows":
            return [T.scatter_add_rows(in_vals[0], in_vals[1], attrs["total"])]
        if kind == "reshape":
            return [T.reshape(in_vals[0], attrs["shape"])]
        if kind == "transpose":
            return [T.transpose(in_vals[0], attrs["perm"])]
        if kind == "stack":
            return [T.stack(in_vals)]
        if kind == "slice_leading":
            return [T.slice_leading(in_vals[0], int(in_vals[1].item()))]
        if kind == "where_true":
            return [TensorValue(DType.I64, np.nonzero(in_vals[0].data)[0].astype(np.int64))]
        if kind == "dim0":
            return [T.scalar(in_vals[0].shape[0], DType.I64)]
        if kind == "range_vec":
            return [TensorValue(DType.I64, np.arange(int(in_vals[0].item()), dtype=np.int64))]
        if kind == "tile_leading":
            return [T.tile_leading(in_vals[0], int(in_vals[1].item()))]
        if kind == "complement":
            total = int(in_vals[1].item())
            idx = np.atleast_1d(in_vals[0].data)
            return [TensorValue(DType.I64, np.setdiff1d(np.arange(total, dtype=np.int64), idx))]
        if kind == "read_variable":
            return [self.store.read(attrs["name"], node.id)]
        if kind == "assign":
            self.store.write(attrs["name"], in_vals[0], node.id)
            return []
        if kind == "assign_add":
            cur = self.store.read(attrs["name"], node.id)
            self.store.write(attrs["name"], T.binary_elementwise("add", cur, in_vals[0]), node.id)
            return []
        if kind == "random_uniform":
            shape = tuple(attrs["shape"])
            if in_vals:
                shape = (int(in_vals[0].item()),) + shape
            return [self.rng.draw(shape)]
        raise PforVecError(f"no evaluation rule for kind {kind!r}")

    # -- SIMD execution of parallel-for bodies ----------------------------

    def execute_parfor_simd(self, node: Node, n: int, captures, feeds: dict | None = None):
        """Run a parfor block under SIMD semantics, stacking the outputs."""
        feeds = feeds or {}
        body = node.block.subgraphs["body"]
        active = list(range(n))
        binder = {
            "capture": [{j: c for j in active} for c in captures],
            "loop_var": {j: T.scalar(j, DType.I64) for j in active},
        }
        env = self._simd_graph(body, active, binder, feeds)
        outs = []
        for oi, o in enumerate(body.outputs):
            per_iter = env[o]
            if n == 0:
                dt = body.ref_dtype(o) or DType.F64
                sh = body.ref_shape(o)
                if not shape_is_static(sh):
                    raise ShapeVariance(f"parfor output {oi}: unknown shape with zero iterations")
                outs.append(T.zeros((0,) + tuple(sh), dt))
                continue
            rows = [per_iter[j] for j in range(n)]
            first = rows[0]
            for r in rows[1:]:
                if r.shape != first.shape or r.dtype != first.dtype:
                    raise ShapeVariance(
                        f"parfor output {oi}: shape {r.shape} differs from {first.shape}")
            outs.append(T.stack(rows))
        return outs

    def _simd_graph(self, g: Graph, active: list, binder: dict, feeds: dict) -> dict:
        """Lock-step evaluation; env maps (nid, port) -> {iteration: value}."""
        env: dict = {}
        for node in g.topo_order():
            try:
                self._simd_node(g, node, active, env, binder, feeds)
            except PforVecError as e:
                raise (e if isinstance(e, (ExecError, BudgetExceeded)) else ExecError(node.id, e)) from e
        return env

    def _simd_node(self, g: Graph, node: Node, active, env, binder, feeds):
        kind = node.kind
        if kind == "cond":
            cvals = env[node.inputs[0]]
            then_set = [j for j in active if bool(cvals[j].item())]
            else_set = [j for j in active if not bool(cvals[j].item())]
            caps = [env[r] for r in node.inputs[1:]]
            merged = [dict() for _ in range(node.block.out_arity)]
            for name, part in (("then", then_set), ("else", else_set)):
                if not part:
                    continue
                sub = node.block.subgraphs[name]
                sub_b = {"capture": [{j: c[j] for j in part} for c in caps]}
                if "loop_var" in binder:
                    sub_b["loop_var"] = binder["loop_var"]
                s_env = self._simd_graph(sub, part, sub_b, feeds)
                for oi, o in enumerate(sub.outputs):
                    for j in part:
                        merged[oi][j] = s_env[o][j]
            for p, m in enumerate(merged):
                env[(node.id, p)] = m
            return
        if kind == "while":
            k = node.block.num_carried
            carried = [dict(env[r]) for r in node.inputs[:k]]
            caps = [env[r] for r in node.inputs[k:]]
            cond_g = node.block.subgraphs["cond"]
            body_g = node.block.subgraphs["body"]
            act = list(active)
            while act:
                sub_b = {
                    "capture": [{j: c[j] for j in act} for c in caps],
                    "carried": [{j: c[j] for j in act} for c in carried],
                }
                c_env = self._simd_graph(cond_g, act, sub_b, feeds)
                cv = c_env[cond_g.outputs[0]]
                act = [j for j in act if bool(cv[j].item())]
                if not act:
                    break
                sub_b = {
                    "capture": [{j: c[j] for j in act} for c in caps],
                    "carried": [{j: c[j] for j in act} for c in carried],
                }
                b_env = self._simd_graph(body_g, act, sub_b, feeds)
                for ci, o in enumerate(body_g.outputs):
                    for j in act:
                        carried[ci][j] = b_env[o][j]
            for p in range(k):
                env[(node.id, p)] = carried[p]
            return
        if kind == "parfor":
            # nested parfor: SIMD-execute it independently per outer iteration
            out = [dict() for _ in range(node.block.out_arity)]
            for j in sorted(active):
                n_j = int(env[node.inputs[0]][j].item())
                caps_j = [env[r][j] for r in node.inputs[1:]]
                res = self.execute_parfor_simd(node, n_j, caps_j, feeds)
                for p, v in enumerate(res):
                    out[p][j] = v
            for p, m in enumerate(out):
                env[(node.id, p)] = m
            return
        # plain node: once per active iteration, ascending order
        outs = [dict() for _ in range(node.output_arity)]
        for j in sorted(active):
            self._tick(node)
            in_vals = [env[r][j] for r in node.inputs]
            b = {
                "loop_var": binder.get("loop_var", {}).get(j),
                "capture": [c.get(j) for c in binder.get("capture", [])],
                "carried": [c.get(j) for c in binder.get("carried", [])],
            }
            res = self._eval_plain(g, node, in_vals, b, feeds, j)
            for p, v in enumerate(res):
                outs[p][j] = v
        for p, m in enumerate(outs):
            env[(node.id, p)] = m


def execute(graph: Graph, feeds: dict | None = None, store: VariableStore | None = None,
            rng: RngState | None = None, outputs=None, budget: int | None = None):
    """One-shot convenience wrapper around Executor."""
    ex = Executor(graph, store=store, rng=rng, budget=budget)
    return ex.run(feeds, outputs)
