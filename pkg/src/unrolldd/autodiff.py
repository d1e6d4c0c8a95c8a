"""Reverse-mode automatic differentiation over dense float64 arrays.

The central trick: backward rules are themselves written in terms of the
same primitives they differentiate, and `grad` appends the whole backward
computation to the tape it reads from.  A gradient produced this way is an
ordinary tensor on the tape, so it can be differentiated again, which gives
exact Hessian-vector products without ever materializing a Hessian.

Scope is deliberately small.  Broadcasting covers what the classifier
models need, there is no GPU path, no sparse path, and `relu` has a second
derivative that is identically zero (the kink at 0 takes subgradient 0).
"""

from __future__ import annotations

import builtins
import warnings

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "ParamVector",
    "constant",
    "grad",
    "hvp",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "slice_nd",
    "pad",
    "concat",
    "gather_rows",
    "scatter_rows",
    "sum",
    "mean",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "relu",
    "logsumexp",
    "softmax",
    "softmax_cross_entropy",
    "l2_norm",
    "dot",
]

_pysum = builtins.sum


def _check_finite(arr, op):
    # Contract: every primitive errors on NaN/Inf instead of propagating it.
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by '{op}'")


class TapeNode:
    """One recorded primitive: op name, parent node ids, saved output."""

    __slots__ = ("op", "parents", "value", "params", "vjp")

    def __init__(self, op, parents, value, params=None):
        self.op = op
        self.parents = parents
        self.value = value
        self.params = params
        self.vjp = None


class Tape:
    """Append-only record of primitive evaluations, in topological order.

    Node ids are list positions, so parents always precede children.
    `checkpoint_marks` stores positions of interest (unroll step
    boundaries); they do not affect differentiation.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.checkpoint_marks: list[int] = []
        self._const_cache: dict[int, tuple["Tensor", int]] = {}

    def __len__(self):
        return len(self.nodes)

    def _record(self, op, parents, value, params=None):
        node = TapeNode(op, parents, value, params)
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, values) -> "Tensor":
        """Put an independent variable on the tape and return its tensor."""
        arr = np.array(values, dtype=np.float64)
        _check_finite(arr, "leaf")
        nid = self._record("leaf", (), arr)
        return Tensor(arr, self, nid)

    def mark(self) -> int:
        """Drop a checkpoint mark at the current tape position."""
        pos = len(self.nodes)
        self.checkpoint_marks.append(pos)
        return pos

    def replay(self) -> int:
        """Recompute every node from its parents' saved activations.

        Raises RuntimeError on the first node whose recomputed value is not
        bit-identical to the recorded one.  Returns the number of nodes
        checked.
        """
        checked = 0
        for nid, node in enumerate(self.nodes):
            if node.op in ("leaf", "const"):
                continue
            vals = [self.nodes[p].value for p in node.parents]
            redone = _FORWARD[node.op](vals, node.params)
            if redone.dtype != node.value.dtype or not np.array_equal(
                redone, node.value
            ):
                raise RuntimeError(f"replay mismatch at node {nid} ({node.op})")
            checked += 1
        return checked


class Tensor:
    """A dense float64 array, optionally bound to a tape node."""

    __slots__ = ("values", "tape", "node_id", "grad_disconnected")

    def __init__(self, values, tape=None, node_id=None):
        self.values = values
        self.tape = tape
        self.node_id = node_id
        self.grad_disconnected = False

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        tag = "const" if self.tape is None else f"node {self.node_id}"
        return f"Tensor(shape={self.shape}, {tag})"

    # arithmetic sugar; every path funnels into the module primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def slice(self, starts, stops):
        return slice_nd(self, starts, stops)


def constant(values) -> Tensor:
    """A tensor that no gradient flows through."""
    arr = np.array(values, dtype=np.float64)
    _check_finite(arr, "constant")
    return Tensor(arr)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _lift(tape: Tape, t: Tensor) -> int:
    if t.tape is tape:
        return t.node_id
    # Constant meeting a taped value: give it a const node once per tape.
    key = id(t)
    hit = tape._const_cache.get(key)
    if hit is not None:
        return hit[1]
    nid = tape._record("const", (), t.values)
    tape._const_cache[key] = (t, nid)
    return nid


def _apply(op, parents, value, params, vjp_factory):
    value = np.asarray(value, dtype=np.float64)
    _check_finite(value, op)
    tapes = [t.tape for t in parents if t.tape is not None]
    if not tapes:
        return Tensor(value)  # pure constant computation, nothing recorded
    tape = tapes[0]
    for other in tapes[1:]:
        if other is not tape:
            raise ValueError("operands recorded on different tapes")
    pids = tuple(_lift(tape, t) for t in parents)
    nid = tape._record(op, pids, value, params)
    out = Tensor(value, tape, nid)
    tape.nodes[nid].vjp = vjp_factory(out)
    return out


# Forward recomputation table used by Tape.replay.
_FORWARD = {}


def _fwd(name):
    def deco(fn):
        _FORWARD[name] = fn
        return fn

    return deco


def _sum_to(g: Tensor, shape) -> Tensor:
    """Reduce a broadcast gradient back to the unbroadcast operand shape."""
    while g.ndim > len(shape):
        g = sum(g, axis=0)
    for ax, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = sum(g, axis=ax, keepdims=True)
    if g.shape != tuple(shape):
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

@_fwd("add")
def _f_add(vals, params):
    return vals[0] + vals[1]


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def factory(out):
        def vjp(g):
            return [_sum_to(g, a.shape), _sum_to(g, b.shape)]

        return vjp

    return _apply("add", (a, b), a.values + b.values, None, factory)


def sub(a, b):
    return add(a, neg(_as_tensor(b)))


@_fwd("mul")
def _f_mul(vals, params):
    return vals[0] * vals[1]


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def factory(out):
        def vjp(g):
            return [_sum_to(mul(g, b), a.shape), _sum_to(mul(g, a), b.shape)]

        return vjp

    return _apply("mul", (a, b), a.values * b.values, None, factory)


@_fwd("div")
def _f_div(vals, params):
    return vals[0] / vals[1]


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def factory(out):
        def vjp(g):
            ga = _sum_to(div(g, b), a.shape)
            gb = _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
            return [ga, gb]

        return vjp

    return _apply("div", (a, b), a.values / b.values, None, factory)


@_fwd("neg")
def _f_neg(vals, params):
    return -vals[0]


def neg(a):
    a = _as_tensor(a)

    def factory(out):
        def vjp(g):
            return [neg(g)]

        return vjp

    return _apply("neg", (a,), -a.values, None, factory)


@_fwd("matmul")
def _f_matmul(vals, params):
    return vals[0] @ vals[1]


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects rank-2 operands")

    def factory(out):
        def vjp(g):
            return [matmul(g, transpose(b)), matmul(transpose(a), g)]

        return vjp

    return _apply("matmul", (a, b), a.values @ b.values, None, factory)


@_fwd("transpose")
def _f_transpose(vals, params):
    return vals[0].T.copy()


def transpose(a):
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a rank-2 operand")

    def factory(out):
        def vjp(g):
            return [transpose(g)]

        return vjp

    return _apply("transpose", (a,), a.values.T.copy(), None, factory)


@_fwd("reshape")
def _f_reshape(vals, params):
    return vals[0].reshape(params["shape"]).copy()


def reshape(a, shape):
    a = _as_tensor(a)
    new = np.reshape(a.values, shape).copy()
    old_shape = a.shape

    def factory(out):
        def vjp(g):
            return [reshape(g, old_shape)]

        return vjp

    return _apply("reshape", (a,), new, {"shape": tuple(new.shape)}, factory)


@_fwd("broadcast_to")
def _f_broadcast_to(vals, params):
    return np.broadcast_to(vals[0], params["shape"]).copy()


def broadcast_to(a, shape):
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    val = np.broadcast_to(a.values, shape).copy()
    src_shape = a.shape

    def factory(out):
        def vjp(g):
            return [_sum_to(g, src_shape)]

        return vjp

    return _apply("broadcast_to", (a,), val, {"shape": shape}, factory)


@_fwd("slice_nd")
def _f_slice_nd(vals, params):
    sl = tuple(slice(lo, hi) for lo, hi in zip(params["starts"], params["stops"]))
    return vals[0][sl].copy()


def slice_nd(a, starts, stops):
    """Rectangular slice `a[starts[0]:stops[0], ...]` over every axis."""
    a = _as_tensor(a)
    starts = tuple(int(s) for s in starts)
    stops = tuple(int(s) for s in stops)
    if len(starts) != a.ndim or len(stops) != a.ndim:
        raise ValueError("slice bounds must cover every axis")
    for lo, hi, n in zip(starts, stops, a.shape):
        if not (0 <= lo < hi <= n):
            raise ValueError(f"slice bounds ({lo}, {hi}) invalid for axis of size {n}")
    sl = tuple(slice(lo, hi) for lo, hi in zip(starts, stops))
    val = a.values[sl].copy()
    src_shape = a.shape

    def factory(out):
        def vjp(g):
            before = starts
            after = tuple(n - hi for hi, n in zip(stops, src_shape))
            return [pad(g, before, after)]

        return vjp

    return _apply(
        "slice_nd", (a,), val, {"starts": starts, "stops": stops}, factory
    )


@_fwd("pad")
def _f_pad(vals, params):
    width = tuple(zip(params["before"], params["after"]))
    return np.pad(vals[0], width)


def pad(a, before, after):
    """Zero-pad each axis by `before[i]` leading and `after[i]` trailing."""
    a = _as_tensor(a)
    before = tuple(int(b) for b in before)
    after = tuple(int(b) for b in after)
    if len(before) != a.ndim or len(after) != a.ndim:
        raise ValueError("pad widths must cover every axis")
    val = np.pad(a.values, tuple(zip(before, after)))

    def factory(out):
        def vjp(g):
            starts = before
            stops = tuple(b + n for b, n in zip(before, a.shape))
            return [slice_nd(g, starts, stops)]

        return vjp

    return _apply("pad", (a,), val, {"before": before, "after": after}, factory)


@_fwd("concat")
def _f_concat(vals, params):
    return np.concatenate(vals, axis=params["axis"])


def concat(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat of zero tensors")
    axis = int(axis)
    val = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def factory(out):
        def vjp(g):
            grads = []
            offset = 0
            for p, sz in zip(parts, sizes):
                starts = [0] * g.ndim
                stops = list(g.shape)
                starts[axis] = offset
                stops[axis] = offset + sz
                grads.append(slice_nd(g, tuple(starts), tuple(stops)))
                offset += sz
            return grads

        return vjp

    return _apply("concat", tuple(parts), val, {"axis": axis}, factory)


@_fwd("gather_rows")
def _f_gather_rows(vals, params):
    return vals[0][params["idx"]].copy()


def gather_rows(a, idx):
    """Select rows along axis 0 by an integer index array."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("row index must be one-dimensional")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ValueError("row index out of range")
    val = a.values[idx].copy()
    n_rows = a.shape[0]

    def factory(out):
        def vjp(g):
            return [scatter_rows(g, idx, n_rows)]

        return vjp

    return _apply("gather_rows", (a,), val, {"idx": idx}, factory)


@_fwd("scatter_rows")
def _f_scatter_rows(vals, params):
    out = np.zeros((params["n_rows"],) + vals[0].shape[1:], dtype=np.float64)
    np.add.at(out, params["idx"], vals[0])
    return out


def scatter_rows(a, idx, n_rows):
    """Adjoint of gather_rows: accumulate rows into a zero base of n_rows."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    n_rows = int(n_rows)
    val = np.zeros((n_rows,) + a.shape[1:], dtype=np.float64)
    np.add.at(val, idx, a.values)

    def factory(out):
        def vjp(g):
            return [gather_rows(g, idx)]

        return vjp

    return _apply(
        "scatter_rows", (a,), val, {"idx": idx, "n_rows": n_rows}, factory
    )


@_fwd("sum")
def _f_sum(vals, params):
    return np.asarray(
        np.sum(vals[0], axis=params["axis"], keepdims=params["keepdims"]),
        dtype=np.float64,
    )


def sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is not None:
        axis = int(axis)
    val = np.asarray(np.sum(a.values, axis=axis, keepdims=keepdims), dtype=np.float64)
    src_shape = a.shape

    def factory(out):
        def vjp(g):
            if axis is None:
                return [broadcast_to(g, src_shape)]
            if not keepdims:
                kept = list(src_shape)
                kept[axis] = 1
                g = reshape(g, tuple(kept))
            return [broadcast_to(g, src_shape)]

        return vjp

    return _apply("sum", (a,), val, {"axis": axis, "keepdims": keepdims}, factory)


def mean(a, axis=None):
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[int(axis)]
    if count == 0:
        raise ValueError("mean of zero elements")
    return mul(sum(a, axis=axis), 1.0 / count)


@_fwd("exp")
def _f_exp(vals, params):
    return np.exp(vals[0])


def exp(a):
    a = _as_tensor(a)

    def factory(out):
        def vjp(g):
            return [mul(g, out)]

        return vjp

    return _apply("exp", (a,), np.exp(a.values), None, factory)


@_fwd("log")
def _f_log(vals, params):
    return np.log(vals[0])


def log(a):
    a = _as_tensor(a)

    def factory(out):
        def vjp(g):
            return [div(g, a)]

        return vjp

    return _apply("log", (a,), np.log(a.values), None, factory)


@_fwd("sqrt")
def _f_sqrt(vals, params):
    return np.sqrt(vals[0])


def sqrt(a):
    a = _as_tensor(a)

    def factory(out):
        def vjp(g):
            return [div(mul(g, 0.5), out)]

        return vjp

    return _apply("sqrt", (a,), np.sqrt(a.values), None, factory)


@_fwd("tanh")
def _f_tanh(vals, params):
    return np.tanh(vals[0])


def tanh(a):
    a = _as_tensor(a)

    def factory(out):
        def vjp(g):
            return [mul(g, sub(1.0, mul(out, out)))]

        return vjp

    return _apply("tanh", (a,), np.tanh(a.values), None, factory)


@_fwd("relu")
def _f_relu(vals, params):
    return np.maximum(vals[0], 0.0)


def relu(a):
    a = _as_tensor(a)
    # The 0/1 mask is a constant, so the second derivative is exactly zero.
    mask = constant((a.values > 0.0).astype(np.float64))

    def factory(out):
        def vjp(g):
            return [mul(g, mask)]

        return vjp

    return _apply("relu", (a,), np.maximum(a.values, 0.0), None, factory)


# ---------------------------------------------------------------------------
# composites (built from primitives, so they inherit differentiability)
# ---------------------------------------------------------------------------

def logsumexp(a, axis):
    """Row-stable log-sum-exp; the shift is a constant, so all derivatives
    of the composite agree with the unshifted expression exactly."""
    a = _as_tensor(a)
    axis = int(axis)
    m = np.max(a.values, axis=axis, keepdims=True)
    shifted = sub(a, constant(m))
    s = sum(exp(shifted), axis=axis)
    return add(log(s), constant(np.squeeze(m, axis=axis)))


def softmax(a, axis):
    a = _as_tensor(a)
    axis = int(axis)
    m = np.max(a.values, axis=axis, keepdims=True)
    e = exp(sub(a, constant(m)))
    return div(e, sum(e, axis=axis, keepdims=True))


def softmax_cross_entropy(logits, labels, reduction="mean"):
    """Cross entropy between softmax(logits) and unnormalized soft labels.

    Per row: (sum of labels) * logsumexp(logits) - <labels, logits>.  With a
    probability-vector label this is ordinary cross entropy; scaling a label
    row scales that row's loss and gradient by the same factor.
    """
    logits, labels = _as_tensor(logits), _as_tensor(labels)
    if logits.ndim != 2 or labels.shape != logits.shape:
        raise ValueError("logits and labels must share a (batch, classes) shape")
    lse = logsumexp(logits, axis=1)
    total = sum(labels, axis=1)
    per_row = sub(mul(total, lse), sum(mul(labels, logits), axis=1))
    if reduction == "mean":
        return mean(per_row)
    if reduction == "sum":
        return sum(per_row)
    if reduction == "none":
        return per_row
    raise ValueError(f"unknown reduction '{reduction}'")


def l2_norm(a):
    """Euclidean norm of all entries.  Not differentiable at exactly zero."""
    a = _as_tensor(a)
    return sqrt(sum(mul(a, a)))


def dot(a, b):
    return sum(mul(a, b))


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def grad(loss, wrt, warn_disconnected=True):
    """Gradients of a scalar w.r.t. each tensor in `wrt`.

    The backward computation is appended to the loss tensor's tape, so the
    returned gradients can be differentiated again.  A `wrt` entry with no
    path to the loss yields a zero tensor flagged `grad_disconnected` (and
    a warning), never an error.
    """
    wrt = list(wrt)
    if not isinstance(loss, Tensor):
        raise ValueError("loss must be a Tensor")
    if loss.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")

    def zero_like(w):
        z = constant(np.zeros(w.shape))
        z.grad_disconnected = True
        return z

    tape = loss.tape
    if tape is None:
        if warn_disconnected and wrt:
            warnings.warn("loss is constant; returning zero gradients", stacklevel=2)
        return [zero_like(w) for w in wrt]

    limit = loss.node_id
    wrt_positions: dict[int, list[int]] = {}
    for i, w in enumerate(wrt):
        if w.tape is tape and w.node_id is not None and w.node_id <= limit:
            wrt_positions.setdefault(w.node_id, []).append(i)

    # Forward reachability from the wrt set: adjoints are only propagated
    # into nodes that can influence some requested input.  Pruned branches
    # cannot change the returned values.
    reach = np.zeros(limit + 1, dtype=bool)
    for nid in range(limit + 1):
        if nid in wrt_positions:
            reach[nid] = True
            continue
        node = tape.nodes[nid]
        for p in node.parents:
            if reach[p]:
                reach[nid] = True
                break

    results: list[Tensor | None] = [None] * len(wrt)
    if reach[limit]:
        adjoint: dict[int, Tensor] = {limit: constant(1.0)}
        for nid in range(limit, -1, -1):
            if nid not in adjoint:
                continue
            node = tape.nodes[nid]
            if node.vjp is None:
                continue
            partials = node.vjp(adjoint[nid])
            for pid, part in zip(node.parents, partials):
                if part is None or not reach[pid]:
                    continue
                held = adjoint.get(pid)
                adjoint[pid] = part if held is None else add(held, part)
        for nid, positions in wrt_positions.items():
            got = adjoint.get(nid)
            if got is not None:
                for i in positions:
                    if got.shape != wrt[i].shape:
                        raise AssertionError("gradient shape mismatch")
                    got.grad_disconnected = False
                    results[i] = got

    missing = [i for i, r in enumerate(results) if r is None]
    if missing and warn_disconnected:
        warnings.warn(
            f"{len(missing)} of {len(wrt)} inputs are disconnected from the loss; "
            "returning zero gradients for them",
            stacklevel=2,
        )
    for i in missing:
        results[i] = zero_like(wrt[i])
    return results


def hvp(loss_builder, theta, v):
    """Hessian-vector product H(theta) @ v by double backprop.

    `loss_builder` maps a flat parameter tensor of length p to a scalar.
    The Hessian is never materialized; cost is two backward passes.
    """
    if isinstance(theta, ParamVector):
        flat = theta.flat
    else:
        flat = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if flat.ndim != 1:
        raise ValueError("theta must be a flat vector")
    if v.shape != flat.shape:
        raise ValueError(f"v has shape {v.shape}, expected {flat.shape}")

    tape = Tape()
    th = tape.leaf(flat)
    loss = loss_builder(th)
    if not isinstance(loss, Tensor) or loss.shape != ():
        raise ValueError("loss builder must return a scalar Tensor")
    (g,) = grad(loss, [th])
    gv = dot(g, constant(v))
    (hv,) = grad(gv, [th])
    _check_finite(hv.values, "hvp")
    return hv.values.copy()


class ParamVector:
    """Flat float64 parameter vector plus a (name, shape, offset) layout.

    The layout must tile the vector contiguously from offset 0.
    """

    __slots__ = ("flat", "layout")

    def __init__(self, flat, layout):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.ndim != 1:
            raise ValueError("flat parameter storage must be one-dimensional")
        layout = tuple(
            (str(name), tuple(int(d) for d in shape), int(offset))
            for name, shape, offset in layout
        )
        expected = 0
        for name, shape, offset in layout:
            if offset != expected:
                raise ValueError(f"layout entry '{name}' breaks contiguity")
            expected += int(np.prod(shape, dtype=np.int64)) if shape else 1
        if expected != flat.size:
            raise ValueError(
                f"layout covers {expected} entries, vector has {flat.size}"
            )
        self.flat = flat
        self.layout = layout

    @property
    def p(self) -> int:
        return self.flat.size

    def view(self, name) -> np.ndarray:
        for lname, shape, offset in self.layout:
            if lname == name:
                size = int(np.prod(shape, dtype=np.int64)) if shape else 1
                return self.flat[offset : offset + size].reshape(shape)
        raise KeyError(name)

    def replace(self, flat) -> "ParamVector":
        return ParamVector(flat, self.layout)

    @staticmethod
    def pack(named_arrays) -> "ParamVector":
        """Build from an ordered iterable of (name, array)."""
        layout = []
        chunks = []
        offset = 0
        for name, arr in named_arrays:
            arr = np.asarray(arr, dtype=np.float64)
            layout.append((name, arr.shape, offset))
            chunks.append(arr.reshape(-1))
            offset += arr.size
        flat = np.concatenate(chunks) if chunks else np.zeros(0)
        return ParamVector(flat, layout)
