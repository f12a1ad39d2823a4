"""Dense tensor values and the eager numeric kernels graph ops lower to.

Tensors are dense row-major arrays of one of three primitive dtypes.  All
kernels here are pure functions over immutable values; numpy provides the
backing storage and inner loops.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AxisOutOfRange,
    BadPermutation,
    DTypeMismatch,
    DuplicateAxis,
    IncompatibleShapes,
    IncompleteCover,
    IndexCollision,
    IndexOutOfBounds,
    RankError,
)


class DType(enum.Enum):
    F64 = "f64"
    I64 = "i64"
    BOOL = "bool"

    @property
    def np_dtype(self):
        return _NP_DTYPES[self]


_NP_DTYPES = {DType.F64: np.float64, DType.I64: np.int64, DType.BOOL: np.bool_}
_FROM_NP = {np.dtype(v): k for k, v in _NP_DTYPES.items()}


@dataclass(frozen=True)
class TensorValue:
    """A dtype tag plus a C-contiguous numpy array. Treated as immutable."""

    dtype: DType
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        # note: ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.asarray(self.data, dtype=self.dtype.np_dtype, order="C")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def rank(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"TensorValue({self.dtype.value}{list(self.shape)}, {self.data.tolist()!r})"


def tensor(values, dtype: DType | None = None) -> TensorValue:
    """Build a TensorValue from nested lists / scalars / numpy arrays."""
    if isinstance(values, TensorValue):
        return values if dtype is None or dtype == values.dtype else TensorValue(dtype, values.data)
    arr = np.asarray(values)
    if dtype is None:
        if arr.dtype == np.bool_:
            dtype = DType.BOOL
        elif np.issubdtype(arr.dtype, np.integer):
            dtype = DType.I64
        else:
            dtype = DType.F64
    return TensorValue(dtype, arr)


def scalar(value, dtype: DType | None = None) -> TensorValue:
    return tensor(value, dtype)


def zeros(shape, dtype: DType = DType.F64) -> TensorValue:
    return TensorValue(dtype, np.zeros(shape, dtype=dtype.np_dtype))


def ones(shape, dtype: DType = DType.F64) -> TensorValue:
    return TensorValue(dtype, np.ones(shape, dtype=dtype.np_dtype))


# --------------------------------------------------------------------------
# broadcasting


def broadcast_shapes(a, b) -> tuple:
    """Left-extend with 1s to equal rank, then merge dims pairwise.

    Raises IncompatibleShapes when a dim pair is unequal and neither is 1.
    """
    a, b = tuple(a), tuple(b)
    r = max(len(a), len(b))
    a = (1,) * (r - len(a)) + a
    b = (1,) * (r - len(b)) + b
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise IncompatibleShapes(f"cannot broadcast {a} with {b}")
    return tuple(out)


BINARY_OPS = ("add", "sub", "mul", "div", "max", "min", "less", "equal")
COMPARISON_OPS = ("less", "equal")
UNARY_OPS = ("neg", "exp", "log", "relu", "tanh", "sigmoid", "square", "logical_not")

_BINARY_FNS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "max": np.maximum,
    "min": np.minimum,
    "less": np.less,
    "equal": np.equal,
}


def binary_elementwise(op: str, a: TensorValue, b: TensorValue) -> TensorValue:
    if op not in BINARY_OPS:
        raise ValueError(f"unknown binary op {op!r}")
    if a.dtype != b.dtype:
        raise DTypeMismatch(f"{op}: {a.dtype.value} vs {b.dtype.value}")
    if a.dtype == DType.BOOL and op not in COMPARISON_OPS:
        raise DTypeMismatch(f"{op}: not defined on bool")
    if op == "div" and a.dtype != DType.F64:
        raise DTypeMismatch("div: only defined on f64")
    out_shape = broadcast_shapes(a.shape, b.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        res = _BINARY_FNS[op](a.data, b.data)
    res = np.broadcast_to(res, out_shape)
    out_dtype = DType.BOOL if op in COMPARISON_OPS else a.dtype
    return TensorValue(out_dtype, res)


def unary_elementwise(op: str, x: TensorValue) -> TensorValue:
    if op not in UNARY_OPS:
        raise ValueError(f"unknown unary op {op!r}")
    if op == "logical_not":
        if x.dtype != DType.BOOL:
            raise DTypeMismatch("logical_not: requires bool")
        return TensorValue(DType.BOOL, np.logical_not(x.data))
    if op in ("exp", "log", "tanh", "sigmoid") and x.dtype != DType.F64:
        raise DTypeMismatch(f"{op}: requires f64, got {x.dtype.value}")
    if x.dtype == DType.BOOL:
        raise DTypeMismatch(f"{op}: not defined on bool")
    d = x.data
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if op == "neg":
            res = -d
        elif op == "exp":
            res = np.exp(d)
        elif op == "log":
            res = np.log(d)
        elif op == "relu":
            res = np.maximum(d, 0)
        elif op == "tanh":
            res = np.tanh(d)
        elif op == "sigmoid":
            res = 1.0 / (1.0 + np.exp(-d))
        else:  # square
            res = d * d
    return TensorValue(x.dtype, res)


def cast(x: TensorValue, dtype: DType) -> TensorValue:
    return TensorValue(dtype, x.data.astype(dtype.np_dtype))


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: TensorValue, b: TensorValue) -> TensorValue:
    if a.dtype != b.dtype:
        raise DTypeMismatch(f"matmul: {a.dtype.value} vs {b.dtype.value}")
    if a.rank == 2 and b.rank == 2:
        if a.shape[1] != b.shape[0]:
            raise IncompatibleShapes(f"matmul: {a.shape} x {b.shape}")
    elif a.rank == 3 and b.rank == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise IncompatibleShapes(f"batch matmul: {a.shape} x {b.shape}")
    else:
        raise RankError(f"matmul: unsupported ranks {a.rank} x {b.rank}")
    return TensorValue(a.dtype, np.matmul(a.data, b.data))


def _conv_padding(k: int) -> tuple:
    # SAME padding, stride 1: floor((k-1)/2) before, remainder after.
    before = (k - 1) // 2
    return before, k - 1 - before


def im2col(x: TensorValue, k1: int, k2: int) -> TensorValue:
    """Extract k1 x k2 patches (SAME zero padding, stride 1).

    Output shape [b, h, w, k1*k2*c]; patch element order is (p, q, c).
    """
    if x.rank != 4:
        raise RankError(f"im2col: expected rank 4, got {x.rank}")
    b, h, w, c = x.shape
    (p1b, p1a), (p2b, p2a) = _conv_padding(k1), _conv_padding(k2)
    xp = np.pad(x.data, ((0, 0), (p1b, p1a), (p2b, p2a), (0, 0)))
    cols = np.empty((b, h, w, k1 * k2 * c), dtype=x.dtype.np_dtype)
    for p in range(k1):
        for q in range(k2):
            cols[:, :, :, (p * k2 + q) * c:(p * k2 + q + 1) * c] = xp[:, p:p + h, q:q + w, :]
    return TensorValue(x.dtype, cols)


def conv2d(x: TensorValue, f: TensorValue) -> TensorValue:
    """2-D convolution, stride 1, SAME zero padding, NHWC / HWIO layout."""
    if x.rank != 4 or f.rank != 4:
        raise RankError(f"conv2d: ranks {x.rank}, {f.rank}")
    b, h, w, c1 = x.shape
    k1, k2, fc1, c2 = f.shape
    if c1 != fc1:
        raise IncompatibleShapes(f"conv2d: input channels {c1} vs filter {fc1}")
    cols = im2col(x, k1, k2).data.reshape(b * h * w, k1 * k2 * c1)
    out = cols @ f.data.reshape(k1 * k2 * c1, c2)
    return TensorValue(x.dtype, out.reshape(b, h, w, c2))


def conv2d_input_grad(gy: TensorValue, f: TensorValue) -> TensorValue:
    """Adjoint of conv2d with respect to its input (exact col2im transpose)."""
    if gy.rank != 4 or f.rank != 4:
        raise RankError(f"conv2d_input_grad: ranks {gy.rank}, {f.rank}")
    b, h, w, c2 = gy.shape
    k1, k2, c1, fc2 = f.shape
    if c2 != fc2:
        raise IncompatibleShapes(f"conv2d_input_grad: channels {c2} vs {fc2}")
    colg = (gy.data.reshape(b * h * w, c2) @ f.data.reshape(k1 * k2 * c1, c2).T)
    colg = colg.reshape(b, h, w, k1 * k2 * c1)
    (p1b, p1a), (p2b, p2a) = _conv_padding(k1), _conv_padding(k2)
    xg = np.zeros((b, h + p1b + p1a, w + p2b + p2a, c1))
    for p in range(k1):
        for q in range(k2):
            xg[:, p:p + h, q:q + w, :] += colg[:, :, :, (p * k2 + q) * c1:(p * k2 + q + 1) * c1]
    return TensorValue(gy.dtype, xg[:, p1b:p1b + h, p2b:p2b + w, :])


# --------------------------------------------------------------------------
# reductions and shape manipulation


def _normalize_axes(axes, rank: int) -> tuple:
    out = []
    for ax in axes:
        n = ax + rank if ax < 0 else ax
        if not 0 <= n < rank:
            raise AxisOutOfRange(f"axis {ax} out of range for rank {rank}")
        out.append(n)
    if len(set(out)) != len(out):
        raise DuplicateAxis(f"duplicate axes after normalization: {axes}")
    return tuple(sorted(out))


def reduce_sum(x: TensorValue, axes) -> TensorValue:
    axes = _normalize_axes(axes, x.rank)
    if not axes:
        return x
    return TensorValue(x.dtype, np.sum(x.data, axis=axes))


def concat(xs, axis: int) -> TensorValue:
    xs = list(xs)
    if not xs:
        raise IncompatibleShapes("concat: empty input list")
    rank = xs[0].rank
    dtype = xs[0].dtype
    for x in xs[1:]:
        if x.rank != rank:
            raise IncompatibleShapes(f"concat: rank {x.rank} vs {rank}")
        if x.dtype != dtype:
            raise DTypeMismatch(f"concat: {x.dtype.value} vs {dtype.value}")
    ax = axis + rank if axis < 0 else axis
    if not 0 <= ax < max(rank, 1):
        raise AxisOutOfRange(f"concat: axis {axis} out of range for rank {rank}")
    for x in xs[1:]:
        if any(i != ax and d != xs[0].shape[i] for i, d in enumerate(x.shape)):
            raise IncompatibleShapes(f"concat: {x.shape} vs {xs[0].shape} on axis {ax}")
    return TensorValue(dtype, np.concatenate([x.data for x in xs], axis=ax))


def gather_rows(x: TensorValue, idx: TensorValue) -> TensorValue:
    if idx.dtype != DType.I64:
        raise DTypeMismatch("gather_rows: index must be i64")
    if idx.rank > 1:
        raise RankError(f"gather_rows: index rank {idx.rank} > 1")
    if x.rank == 0:
        raise RankError("gather_rows: cannot gather from a scalar")
    n = x.shape[0]
    flat = np.atleast_1d(idx.data)
    bad = flat[(flat < 0) | (flat >= n)]
    if bad.size:
        raise IndexOutOfBounds(f"gather_rows: index {bad[0]} out of range [0, {n})")
    return TensorValue(x.dtype, x.data[idx.data])


def scatter_rows(index_sets, parts, total: int) -> TensorValue:
    """Stitch disjoint row sets back into one tensor of `total` rows."""
    index_sets = [np.atleast_1d(np.asarray(s.data if isinstance(s, TensorValue) else s, dtype=np.int64))
                  for s in index_sets]
    parts = list(parts)
    if len(index_sets) != len(parts):
        raise IncompleteCover("scatter_rows: index set / part count mismatch")
    seen = np.zeros(total, dtype=bool)
    for s in index_sets:
        if s.size and (s.min() < 0 or s.max() >= total):
            raise IndexOutOfBounds(f"scatter_rows: index out of range [0, {total})")
        if seen[s].any():
            raise IndexCollision("scatter_rows: overlapping index sets")
        seen[s] = True
    if not seen.all():
        raise IncompleteCover(f"scatter_rows: {int((~seen).sum())} rows uncovered")
    dtype = parts[0].dtype
    tail = parts[0].shape[1:]
    for s, p in zip(index_sets, parts):
        if p.shape[0] != s.size:
            raise IncompatibleShapes(f"scatter_rows: part rows {p.shape[0]} vs {s.size} indices")
        if p.shape[1:] != tail:
            raise IncompatibleShapes(f"scatter_rows: trailing dims {p.shape[1:]} vs {tail}")
    out = np.empty((total,) + tail, dtype=dtype.np_dtype)
    for s, p in zip(index_sets, parts):
        out[s] = p.data
    return TensorValue(dtype, out)


def scatter_add_rows(idx: TensorValue, updates: TensorValue, total: int) -> TensorValue:
    """Add update rows into a zero tensor; duplicate indices accumulate."""
    if idx.dtype != DType.I64:
        raise DTypeMismatch("scatter_add_rows: index must be i64")
    flat = np.atleast_1d(idx.data)
    upd = updates.data if idx.rank == 1 else updates.data[None]
    if flat.size and (flat.min() < 0 or flat.max() >= total):
        raise IndexOutOfBounds(f"scatter_add_rows: index out of range [0, {total})")
    out = np.zeros((total,) + upd.shape[1:], dtype=updates.dtype.np_dtype)
    np.add.at(out, flat, upd)
    return TensorValue(updates.dtype, out)


def reshape(x: TensorValue, shape) -> TensorValue:
    shape = list(shape)
    if shape.count(-1) > 1:
        raise IncompatibleShapes("reshape: more than one -1 dim")
    if -1 in shape:
        rest = 1
        for d in shape:
            if d != -1:
                rest *= d
        if rest == 0:
            shape[shape.index(-1)] = 0
        else:
            if x.size % rest != 0:
                raise IncompatibleShapes(f"reshape: cannot infer -1 in {shape} for size {x.size}")
            shape[shape.index(-1)] = x.size // rest
    if int(np.prod(shape)) != x.size:
        raise IncompatibleShapes(f"reshape: {x.shape} -> {shape} changes element count")
    return TensorValue(x.dtype, x.data.reshape(shape))


def transpose(x: TensorValue, perm) -> TensorValue:
    perm = tuple(perm)
    if sorted(perm) != list(range(x.rank)):
        raise BadPermutation(f"transpose: {perm} is not a permutation of rank {x.rank}")
    return TensorValue(x.dtype, np.transpose(x.data, perm))


def stack(xs) -> TensorValue:
    xs = list(xs)
    if not xs:
        raise IncompatibleShapes("stack: empty input list")
    shape = xs[0].shape
    dtype = xs[0].dtype
    for x in xs[1:]:
        if x.shape != shape:
            raise IncompatibleShapes(f"stack: {x.shape} vs {shape}")
        if x.dtype != dtype:
            raise DTypeMismatch(f"stack: {x.dtype.value} vs {dtype.value}")
    return TensorValue(dtype, np.stack([x.data for x in xs]))


def slice_leading(x: TensorValue, n: int) -> TensorValue:
    if x.rank == 0:
        raise RankError("slice_leading: cannot slice a scalar")
    if not 0 <= n <= x.shape[0]:
        raise IncompatibleShapes(f"slice_leading: {n} out of range for leading dim {x.shape[0]}")
    return TensorValue(x.dtype, x.data[:n])


def tile_leading(x: TensorValue, n: int) -> TensorValue:
    """Stack n copies of x along a new leading axis."""
    if n < 0:
        raise IncompatibleShapes(f"tile_leading: negative count {n}")
    return TensorValue(x.dtype, np.broadcast_to(x.data, (n,) + x.shape).copy())


def allclose(a: TensorValue, b: TensorValue, tol: float = 1e-9) -> bool:
    if a.shape != b.shape or a.dtype != b.dtype:
        return False
    if a.dtype == DType.F64:
        return bool(np.allclose(a.data, b.data, rtol=0.0, atol=tol, equal_nan=True))
    return bool(np.array_equal(a.data, b.data))
