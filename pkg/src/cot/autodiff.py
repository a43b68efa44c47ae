"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Design: a Wengert list. Interior nodes are appended to the active Tape at
creation time, so creation order is already a topological order and the
backward pass is a single reversed sweep. Values are numpy arrays of rank
<= 2 (scalar, vector, matrix); all arithmetic is 64-bit.

Leaves are created with ``param`` (trainable, receives gradients) or
``constant`` (data, noise draws: no gradient is ever allocated for them).
Subgraphs that depend on constants only are not recorded at all, so forward
evaluation with no tape active runs the exact same numpy arithmetic and
produces bit-identical values.

A tape can be differentiated once; calling ``backward`` again without
``reset`` raises TapeError. Gradients accumulate into ``node.grad`` and into
leaf params (which persist across tapes until ``zero_grad``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Node",
    "Tape",
    "TapeError",
    "param",
    "constant",
    "as_node",
    "add",
    "sub",
    "mul",
    "smul",
    "sadd",
    "matmul",
    "add_rowvec",
    "tanh",
    "relu",
    "exp",
    "square",
    "rsqrt",
    "pairwise_sqdist",
    "grouped_self_sqdist",
    "grouped_cross_sqdist",
    "softmax_rows",
    "reshape",
    "transpose",
    "row_sum",
    "row_mean",
    "total_sum",
    "total_mean",
    "dot",
    "grad_check",
    "GradCheckReport",
]


class TapeError(RuntimeError):
    pass


_TAPE_STACK: list["Tape"] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "grad", "needs_grad", "parents", "vjps", "op")

    def __init__(self, value, *, parents=(), vjps=(), op="leaf", needs_grad=False):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim > 2:
            raise ValueError(f"rank-{value.ndim} tensors are not supported")
        self.value = value
        self.grad = None
        self.needs_grad = needs_grad
        self.parents = parents
        self.vjps = vjps
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            raise ValueError(
                f"gradient shape {g.shape} != value shape {self.value.shape} at op {self.op!r}"
            )
        self.grad = g if self.grad is None else self.grad + g

    # operator sugar; scalars fold into sadd/smul
    def __add__(self, other):
        return sadd(self, other) if np.isscalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sadd(self, -other) if np.isscalar(other) else sub(self, other)

    def __rsub__(self, other):
        return sadd(smul(self, -1.0), other)

    def __mul__(self, other):
        return smul(self, other) if np.isscalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return smul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


class Tape:
    """Ordered record of interior nodes created while the tape is active."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._spent = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def reset(self):
        self.nodes.clear()
        self._spent = False

    def backward(self, loss: Node):
        """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad."""
        if self._spent:
            raise TapeError("tape already differentiated; reset() or build a fresh graph")
        self._spent = True
        if loss.value.shape != ():
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        if not np.isfinite(loss.value):
            raise FloatingPointError("backward called on a non-finite loss")
        loss._accumulate(np.ones(()))
        for node in reversed(self.nodes):
            if node.grad is None:
                continue  # not reachable from the loss
            for parent, vjp in zip(node.parents, node.vjps):
                if parent.needs_grad:
                    parent._accumulate(vjp(node.grad))


def param(value) -> Node:
    """Trainable leaf; receives gradient."""
    return Node(value, needs_grad=True)


def constant(value) -> Node:
    """Data/noise leaf; treated as a constant by backward."""
    return Node(value, needs_grad=False)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _record(value, parents, vjp_builder, op) -> Node:
    """Create an interior node, recording it only when a gradient can flow."""
    tape = _active_tape()
    if tape is None or not any(p.needs_grad for p in parents):
        return Node(value, op=op)
    node = Node(value, parents=tuple(parents), vjps=tuple(vjp_builder()), op=op, needs_grad=True)
    tape.nodes.append(node)
    return node


def _same_shape(a: Node, b: Node, op: str):
    if a.value.shape != b.value.shape:
        raise ValueError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


# ---------------------------------------------------------------- primitives


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _same_shape(a, b, "add")
    return _record(a.value + b.value, (a, b), lambda: (lambda g: g, lambda g: g), "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _same_shape(a, b, "sub")
    return _record(a.value - b.value, (a, b), lambda: (lambda g: g, lambda g: -g), "sub")


def mul(a, b) -> Node:
    """Elementwise product of same-shape arrays."""
    a, b = as_node(a), as_node(b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _record(av * bv, (a, b), lambda: (lambda g: g * bv, lambda g: g * av), "mul")


def smul(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)
    return _record(a.value * c, (a,), lambda: (lambda g: g * c,), "smul")


def sadd(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)
    return _record(a.value + c, (a,), lambda: (lambda g: g,), "sadd")


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")
    return _record(
        av @ bv,
        (a, b),
        lambda: (lambda g: g @ bv.T, lambda g: av.T @ g),
        "matmul",
    )


def add_rowvec(a, v) -> Node:
    """Add a length-p vector to every row of an (m, p) matrix."""
    a, v = as_node(a), as_node(v)
    av, vv = a.value, v.value
    if av.ndim != 2 or vv.shape != (av.shape[1],):
        raise ValueError(f"add_rowvec: shapes {av.shape} and {vv.shape} do not align")
    return _record(
        av + vv[None, :],
        (a, v),
        lambda: (lambda g: g, lambda g: g.sum(axis=0)),
        "add_rowvec",
    )


def tanh(a) -> Node:
    a = as_node(a)
    t = np.tanh(a.value)
    return _record(t, (a,), lambda: (lambda g: g * (1.0 - t * t),), "tanh")


def relu(a) -> Node:
    # Subgradient at 0 is taken as 0.
    a = as_node(a)
    mask = a.value > 0.0
    return _record(np.where(mask, a.value, 0.0), (a,), lambda: (lambda g: g * mask,), "relu")


def exp(a) -> Node:
    a = as_node(a)
    e = np.exp(a.value)
    return _record(e, (a,), lambda: (lambda g: g * e,), "exp")


def square(a) -> Node:
    a = as_node(a)
    av = a.value
    return _record(av * av, (a,), lambda: (lambda g: g * (2.0 * av),), "square")


def rsqrt(a) -> Node:
    """Elementwise x^(-1/2); inputs must be strictly positive."""
    a = as_node(a)
    if np.any(a.value <= 0):
        raise ValueError("rsqrt needs strictly positive inputs")
    r = 1.0 / np.sqrt(a.value)
    return _record(r, (a,), lambda: (lambda g: g * (-0.5 * r ** 3),), "rsqrt")


def pairwise_sqdist(a, b) -> Node:
    """|a_i - b_j|^2 for all row pairs; (n, d) x (p, d) -> (n, p)."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise ValueError(f"pairwise_sqdist: incompatible shapes {av.shape}, {bv.shape}")
    d2 = (
        np.sum(av * av, axis=1)[:, None]
        + np.sum(bv * bv, axis=1)[None, :]
        - 2.0 * (av @ bv.T)
    )

    def build():
        def da(g):
            return 2.0 * (g.sum(axis=1)[:, None] * av - g @ bv)

        def db(g):
            return 2.0 * (g.sum(axis=0)[:, None] * bv - g.T @ av)

        return (da, db)

    return _record(d2, (a, b), build, "pairwise_sqdist")


def grouped_self_sqdist(u, n: int, d: int) -> Node:
    """Within-group pairwise squared distances.

    Input rows are groups of n stacked d-vectors: u has shape (m, n*d) with
    u[i] = [v_i1, ..., v_in] flattened. Output (m, n*n) holds
    |v_ij - v_ij'|^2 at column j*n + j'. This realizes, in rank-2 form, the
    per-conditioning-point Gram blocks needed by the conditional MMD terms.
    """
    u = as_node(u)
    m = u.value.shape[0]
    if u.value.ndim != 2 or u.value.shape[1] != n * d:
        raise ValueError(f"grouped_self_sqdist: shape {u.value.shape} != (m, {n}*{d})")
    V = u.value.reshape(m, n, d)
    diff = V[:, :, None, :] - V[:, None, :, :]          # (m, n, n, d)
    d2 = np.einsum("ijkl,ijkl->ijk", diff, diff)

    def build():
        def du(g):
            G = g.reshape(m, n, n)
            H = G + G.transpose(0, 2, 1)
            dV = 2.0 * (H.sum(axis=2)[:, :, None] * V - H @ V)
            return dV.reshape(m, n * d)

        return (du,)

    return _record(d2.reshape(m, n * n), (u,), build, "grouped_self_sqdist")


def grouped_cross_sqdist(u, y, n: int, d: int) -> Node:
    """Squared distances from each group member to the group's own target.

    u: (m, n*d) groups as in grouped_self_sqdist; y: (m, d) one target per
    group. Output (m, n) holds |v_ij - y_i|^2.
    """
    u, y = as_node(u), as_node(y)
    m = u.value.shape[0]
    if u.value.shape != (m, n * d) or y.value.shape != (m, d):
        raise ValueError(
            f"grouped_cross_sqdist: shapes {u.value.shape}, {y.value.shape} "
            f"!= (m, {n}*{d}), (m, {d})"
        )
    V = u.value.reshape(m, n, d)
    diff = V - y.value[:, None, :]                      # (m, n, d)
    d2 = np.einsum("ijl,ijl->ij", diff, diff)

    def build():
        def du(g):
            return (2.0 * g[:, :, None] * diff).reshape(m, n * d)

        def dy(g):
            return -2.0 * np.einsum("ij,ijl->il", g, diff)

        return (du, dy)

    return _record(d2, (u, y), build, "grouped_cross_sqdist")


def softmax_rows(a) -> Node:
    a = as_node(a)
    if a.value.ndim != 2:
        raise ValueError("softmax_rows expects a matrix")
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def build():
        def da(g):
            return s * (g - np.sum(g * s, axis=1, keepdims=True))

        return (da,)

    return _record(s, (a,), build, "softmax_rows")


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.value.shape
    out = a.value.reshape(shape)
    if out.ndim > 2:
        raise ValueError(f"reshape to rank-{out.ndim} is not supported")
    return _record(out, (a,), lambda: (lambda g: g.reshape(old),), "reshape")


def transpose(a) -> Node:
    a = as_node(a)
    if a.value.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return _record(a.value.T.copy(), (a,), lambda: (lambda g: g.T,), "transpose")


def row_sum(a) -> Node:
    """(m, p) -> (m,) sums along each row."""
    a = as_node(a)
    if a.value.ndim != 2:
        raise ValueError("row_sum expects a matrix")
    p = a.value.shape[1]
    return _record(
        a.value.sum(axis=1),
        (a,),
        lambda: (lambda g: np.repeat(g[:, None], p, axis=1),),
        "row_sum",
    )


def row_mean(a) -> Node:
    a = as_node(a)
    return smul(row_sum(a), 1.0 / a.value.shape[1])


def total_sum(a) -> Node:
    a = as_node(a)
    shape = a.value.shape
    return _record(
        np.asarray(a.value.sum()),
        (a,),
        lambda: (lambda g: np.broadcast_to(g, shape).copy(),),
        "total_sum",
    )


def total_mean(a) -> Node:
    a = as_node(a)
    return smul(total_sum(a), 1.0 / a.value.size)


def dot(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim != 1 or bv.ndim != 1 or av.shape != bv.shape:
        raise ValueError(f"dot: incompatible shapes {av.shape}, {bv.shape}")
    return _record(
        np.asarray(av @ bv),
        (a, b),
        lambda: (lambda g: g * bv, lambda g: g * av),
        "dot",
    )


# --------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    """Per-coordinate comparison of reverse-mode against central differences."""

    max_rel_err: float
    tolerance: float
    failures: list  # (param_index, flat_coord, grad_ad, grad_fd, rel_err)
    n_coords: int

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(build_loss, params: list[Node], step: float = 1e-5,
               tolerance: float = 1e-4) -> GradCheckReport:
    """Check d(build_loss())/d(params) against central finite differences.

    build_loss must be deterministic: it reads params[i].value and returns a
    scalar Node. Relative error per coordinate is
    |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12).
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = build_loss()
        if not np.isfinite(loss.value):
            raise FloatingPointError("grad_check: loss is non-finite")
        tape.backward(loss)
    ad_grads = [
        np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params
    ]
    for p in params:
        p.grad = None

    def value_only():
        out = build_loss()
        return float(out.value)

    failures = []
    max_rel = 0.0
    n_coords = 0
    for pi, p in enumerate(params):
        flat = p.value.reshape(-1)
        for ci in range(flat.size):
            n_coords += 1
            orig = flat[ci]
            flat[ci] = orig + step
            up = value_only()
            flat[ci] = orig - step
            down = value_only()
            flat[ci] = orig
            g_fd = (up - down) / (2.0 * step)
            g_ad = ad_grads[pi].reshape(-1)[ci]
            rel = abs(g_ad - g_fd) / (abs(g_ad) + abs(g_fd) + 1e-12)
            max_rel = max(max_rel, rel)
            if rel > tolerance:
                failures.append((pi, ci, g_ad, g_fd, rel))
    return GradCheckReport(max_rel, tolerance, failures, n_coords)
