"""Dense float64 arithmetic with a reverse-mode tape.

Values are numpy arrays. Matrices are 2-D; a leading batch axis is allowed
everywhere and follows numpy broadcasting (``np.matmul`` semantics), so a
batch of trajectories shares one tape with one node per matrix operation.

Every operation accepts plain arrays or :class:`Node` objects. When no
operand is a Node the plain numpy result is returned and nothing is
recorded, so the same model code runs untaped for evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class SingularityError(ArithmeticError):
    """A factorization hit a non-positive pivot."""

    def __init__(self, message: str, pivot: int):
        super().__init__(message)
        self.pivot = pivot


class ContractError(ValueError):
    """A call violated an operation's preconditions."""


@dataclass(frozen=True)
class Op:
    name: str
    forward: Callable[..., np.ndarray]
    # vjp(grad_out, out, *input_values) -> tuple of input grads (None = skip)
    vjp: Callable[..., tuple]


class Node:
    """A recorded value on a :class:`Tape`."""

    __slots__ = ("tape", "index", "value", "op", "parents", "kwargs")
    __array_priority__ = 1000

    def __init__(self, tape, index, value, op=None, parents=(), kwargs=None):
        self.tape = tape
        self.index = index
        self.value = value
        self.op = op
        self.parents = parents
        self.kwargs = kwargs or {}

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        kind = "leaf" if self.is_leaf else self.op.name
        return f"Node(#{self.index}, {kind}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class Tape:
    """Single-writer record of operations, in execution order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, value, op=None, parents=(), kwargs=None) -> Node:
        node = Node(self, len(self.nodes), value, op, parents, kwargs)
        self.nodes.append(node)
        return node

    def leaf(self, value) -> Node:
        """Register a differentiable input (parameter)."""
        value = np.array(value, dtype=np.float64)
        return self._push(value)

    def replay(self, leaf_values: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node forward from the leaves.

        ``leaf_values`` optionally overrides leaf values by tape id. Returns
        the recomputed values without touching the recorded ones.
        """
        leaf_values = leaf_values or {}
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.is_leaf:
                values.append(np.asarray(leaf_values.get(node.index, node.value), dtype=np.float64))
                continue
            args = [values[p.index] if isinstance(p, Node) else p for p in node.parents]
            values.append(node.op.forward(*args, **node.kwargs))
        return values


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _find_tape(args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ContractError("operands belong to different tapes")
    return tape


def _apply(op: Op, *args, **kwargs):
    tape = _find_tape(args)
    if tape is None:
        return op.forward(*[np.asarray(a, dtype=np.float64) for a in args], **kwargs)
    parents = tuple(a if isinstance(a, Node) else np.asarray(a, dtype=np.float64) for a in args)
    out = op.forward(*[value_of(p) for p in parents], **kwargs)
    return tape._push(out, op, parents, kwargs)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def _add_fwd(a, b):
    try:
        return a + b
    except ValueError:
        raise DimensionError(f"add: cannot broadcast shapes {a.shape} and {b.shape}") from None


_ADD = Op("add", _add_fwd,
          lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def _sub_fwd(a, b):
    try:
        return a - b
    except ValueError:
        raise DimensionError(f"sub: cannot broadcast shapes {a.shape} and {b.shape}") from None


_SUB = Op("sub", _sub_fwd,
          lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def _mul_fwd(a, b):
    try:
        return a * b
    except ValueError:
        raise DimensionError(f"mul: cannot broadcast shapes {a.shape} and {b.shape}") from None


_MUL = Op("mul", _mul_fwd,
          lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))


def _div_fwd(a, b):
    try:
        return a / b
    except ValueError:
        raise DimensionError(f"div: cannot broadcast shapes {a.shape} and {b.shape}") from None


_DIV = Op("div", _div_fwd,
          lambda g, out, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)))

_NEG = Op("neg", np.negative, lambda g, out, a: (-g,))
_SQRT = Op("sqrt", np.sqrt, lambda g, out, a: (0.5 * g / out,))
_SQUARE = Op("square", np.square, lambda g, out, a: (2.0 * g * a,))
_TANH = Op("tanh", np.tanh, lambda g, out, a: (g * (1.0 - out * out),))


def _sigmoid_fwd(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


_SIGMOID = Op("sigmoid", _sigmoid_fwd, lambda g, out, a: (g * out * (1.0 - out),))
_RELU = Op("relu", lambda a: np.maximum(a, 0.0), lambda g, out, a: (g * (a > 0.0),))


def add(a, b):
    return _apply(_ADD, a, b)


def sub(a, b):
    return _apply(_SUB, a, b)


def mul(a, b):
    return _apply(_MUL, a, b)


def div(a, b):
    return _apply(_DIV, a, b)


def neg(a):
    return _apply(_NEG, a)


def sqrt(a):
    return _apply(_SQRT, a)


def square(a):
    return _apply(_SQUARE, a)


def tanh(a):
    return _apply(_TANH, a)


def sigmoid(a):
    return _apply(_SIGMOID, a)


def relu(a):
    return _apply(_RELU, a)


# ---------------------------------------------------------------- linear algebra

def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return np.matmul(a, b)


def _matmul_vjp(g, out, a, b):
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


_MATMUL = Op("matmul", _matmul_fwd, _matmul_vjp)


def matmul(a, b):
    """Matrix product with batch broadcasting over leading axes."""
    return _apply(_MATMUL, a, b)


_TRANSPOSE = Op("transpose", lambda a: np.swapaxes(a, -1, -2),
                lambda g, out, a: (np.swapaxes(g, -1, -2),))


def transpose(a):
    return _apply(_TRANSPOSE, a)


def symmetrize(a):
    """(A + Aᵀ)/2 on the last two axes."""
    return mul(add(a, transpose(a)), 0.5)


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a (batched) symmetric matrix.

    Raises :class:`SingularityError` with the index of the first
    non-positive pivot.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[-1]
    if a.ndim < 2 or a.shape[-2] != n:
        raise DimensionError(f"cholesky: matrix must be square, got {a.shape}")
    low = np.zeros_like(a)
    for j in range(n):
        pivot = a[..., j, j] - np.sum(low[..., j, :j] ** 2, axis=-1)
        if not np.all(pivot > 0.0):
            raise SingularityError(
                f"matrix is not positive definite: pivot {j} = {np.min(pivot):.3e}", pivot=j)
        d = np.sqrt(pivot)
        low[..., j, j] = d
        if j + 1 < n:
            rest = a[..., j + 1:, j] - np.einsum("...ik,...k->...i", low[..., j + 1:, :j], low[..., j, :j])
            low[..., j + 1:, j] = rest / d[..., None]
    return low


def _cho_solve(low: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = low.shape[-1]
    batch = np.broadcast_shapes(low.shape[:-2], b.shape[:-2])
    low = np.broadcast_to(low, batch + low.shape[-2:])
    b = np.broadcast_to(b, batch + b.shape[-2:])
    z = np.empty(b.shape)
    for i in range(n):
        z[..., i, :] = (b[..., i, :] - np.einsum("...k,...kc->...c", low[..., i, :i], z[..., :i, :])) / low[..., i, i, None]
    x = np.empty(b.shape)
    for i in reversed(range(n)):
        x[..., i, :] = (z[..., i, :] - np.einsum("...k,...kc->...c", low[..., i + 1:, i], x[..., i + 1:, :])) / low[..., i, i, None]
    return x


def _solve_spd_fwd(a, b):
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"solve_spd: matrix must be square, got {a.shape}")
    if b.ndim < 2 or b.shape[-2] != a.shape[-1]:
        raise DimensionError(f"solve_spd: right-hand side {b.shape} does not match matrix {a.shape}")
    sym = 0.5 * (a + np.swapaxes(a, -1, -2))
    return _cho_solve(cholesky(sym), b)


def _solve_spd_vjp(g, out, a, b):
    sym = 0.5 * (a + np.swapaxes(a, -1, -2))
    gb = _cho_solve(cholesky(sym), g)
    ga = -np.matmul(gb, np.swapaxes(out, -1, -2))
    ga = 0.5 * (ga + np.swapaxes(ga, -1, -2))
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


_SOLVE_SPD = Op("solve_spd", _solve_spd_fwd, _solve_spd_vjp)


def solve_spd(a, b):
    """Solve ``a @ x = b`` for symmetric positive definite ``a``.

    Only the symmetric part of ``a`` is used. Factorization is Cholesky, not
    an explicit inverse.
    """
    return _apply(_SOLVE_SPD, a, b)


# ---------------------------------------------------------------- structural

def _reshape_fwd(a, shape):
    try:
        return a.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {shape}") from None


_RESHAPE = Op("reshape", _reshape_fwd, lambda g, out, a, shape: (g.reshape(a.shape),))


def reshape(a, shape):
    return _apply(_RESHAPE, a, shape=tuple(shape))


def _basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int)) or k is Ellipsis or k is None for k in parts)


def _getitem_vjp(g, out, a, key):
    grad = np.zeros_like(a)
    if _basic_index(key):
        grad[key] = g
    else:
        np.add.at(grad, key, g)
    return (grad,)


_GETITEM = Op("getitem", lambda a, key: a[key], _getitem_vjp)


def getitem(a, key):
    return _apply(_GETITEM, a, key=key)


def _concat_vjp(g, out, *parts, axis):
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _concat_fwd(*parts, axis):
    try:
        return np.concatenate(parts, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None


_CONCAT = Op("concat", _concat_fwd, _concat_vjp)


def concat(parts, axis=-1):
    return _apply(_CONCAT, *parts, axis=axis)


def _stack_vjp(g, out, *parts, axis):
    return tuple(np.moveaxis(g, axis, 0))


_STACK = Op("stack", lambda *parts, axis: np.stack(parts, axis=axis), _stack_vjp)


def stack(parts, axis=0):
    return _apply(_STACK, *parts, axis=axis)


def _sum_vjp(g, out, a, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


_SUM = Op("sum", lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims), _sum_vjp)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    return _apply(_SUM, a, axis=axis, keepdims=keepdims)


def mean(a, axis=None):
    count = value_of(a).size if axis is None else value_of(a).shape[axis]
    return div(sum(a, axis=axis), float(count))


# ---------------------------------------------------------------- fused layers

def _affine_fwd(x, w, b):
    return _matmul_fwd(x, w) + b


def _affine_vjp(g, out, x, w, b):
    gx, gw = _matmul_vjp(g, out, x, w)
    return gx, gw, _unbroadcast(g, b.shape)


_AFFINE = Op("affine", _affine_fwd, _affine_vjp)


def affine(x, w, b):
    """x @ w + b as one tape node."""
    return _apply(_AFFINE, x, w, b)


def _gru_gates(x, h, wx, bx, wh, bh):
    k = h.shape[-1]
    gx = x @ wx + bx
    gh = h @ wh + bh
    r = _sigmoid_fwd(gx[..., :k] + gh[..., :k])
    z = _sigmoid_fwd(gx[..., k:2 * k] + gh[..., k:2 * k])
    c = np.tanh(gx[..., 2 * k:] + r * gh[..., 2 * k:])
    return r, z, c, gh


def _gru_fwd(x, h, wx, bx, wh, bh):
    _, z, c, _ = _gru_gates(x, h, wx, bx, wh, bh)
    return c + z * (h - c)


def _gru_vjp(g, out, x, h, wx, bx, wh, bh):
    k = h.shape[-1]
    r, z, c, gh = _gru_gates(x, h, wx, bx, wh, bh)
    ghn = gh[..., 2 * k:]
    dc = g * (1.0 - z)
    dz = g * (h - c)
    da_c = dc * (1.0 - c * c)
    dr = da_c * ghn
    da_r = dr * r * (1.0 - r)
    da_z = dz * z * (1.0 - z)
    dgx = np.concatenate([da_r, da_z, da_c], axis=-1)
    dgh = np.concatenate([da_r, da_z, da_c * r], axis=-1)
    dx = dgx @ wx.T
    dh = dgh @ wh.T + g * z
    dwx = np.swapaxes(x, -1, -2) @ dgx
    dwh = np.swapaxes(h, -1, -2) @ dgh
    return (_unbroadcast(dx, x.shape), _unbroadcast(dh, h.shape), _unbroadcast(dwx, wx.shape),
            _unbroadcast(dgx, bx.shape), _unbroadcast(dwh, wh.shape), _unbroadcast(dgh, bh.shape))


_GRU = Op("gru_cell", _gru_fwd, _gru_vjp)


def gru_cell(x, h, wx, bx, wh, bh):
    """Gated recurrent unit step on rows; gate blocks ordered (reset, update, candidate).

    r = σ(x Wx_r + bx_r + h Wh_r + bh_r)
    z = σ(x Wx_z + bx_z + h Wh_z + bh_z)
    c = tanh(x Wx_c + bx_c + r ⊙ (h Wh_c + bh_c))
    h' = (1 − z) ⊙ c + z ⊙ h
    """
    return _apply(_GRU, x, h, wx, bx, wh, bh)


# ---------------------------------------------------------------- differentiation

def backward(loss: Node, leaves: Iterable) -> dict[int, np.ndarray]:
    """Reverse-mode gradient of a scalar ``loss``.

    ``leaves`` are Nodes or tape ids. Returns ``{tape_id: gradient}`` with
    one entry per requested leaf; leaves not connected to ``loss`` get zeros.
    """
    if not isinstance(loss, Node):
        raise ContractError("loss is not on a tape")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    tape = loss.tape
    ids = [leaf.index if isinstance(leaf, Node) else int(leaf) for leaf in leaves]
    for i in ids:
        if not 0 <= i < len(tape.nodes) or not tape.nodes[i].is_leaf:
            raise ContractError(f"tape id {i} is not a leaf of this tape")

    # only propagate through nodes that depend on a requested leaf
    wanted = set(ids)
    live = [False] * (loss.index + 1)
    for node in tape.nodes[: loss.index + 1]:
        if node.is_leaf:
            live[node.index] = node.index in wanted
        else:
            live[node.index] = any(isinstance(p, Node) and live[p.index] for p in node.parents)

    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads.pop(node.index, None) if not node.is_leaf else None
        if g is None or node.is_leaf:
            continue
        parents = node.parents
        in_vals = [value_of(p) for p in parents]
        pgrads = node.op.vjp(g, node.value, *in_vals, **node.kwargs)
        for p, pg in zip(parents, pgrads):
            if not isinstance(p, Node) or not live[p.index]:
                continue
            if p.index in grads:
                grads[p.index] = grads[p.index] + pg
            else:
                grads[p.index] = pg
    return {i: grads.get(i, np.zeros_like(tape.nodes[i].value)) for i in ids}
