"""Reverse-mode automatic differentiation over dense float64 tensors.

Tensors are rank 0, 1 or 2.  Every op records its parents and a closure that
maps the output adjoint to parent adjoints; :func:`backward` walks the graph
in reverse topological order.  The graph is rebuilt on every forward pass.

Shapes must match exactly.  The only implicit broadcast is scalar against
tensor (a size-1 operand); row/column expansion is explicit via
:func:`expand`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

_EMPTY: tuple = ()


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shapes."""

    def __init__(self, op: str, a: tuple, b: tuple, detail: str = ""):
        msg = f"{op}: incompatible shapes {a} and {b}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = (a, b)


class Tensor:
    """A node in the computation graph.

    Leaves created with ``requires_grad=True`` are trainable parameters and
    show up in the gradient map returned by :func:`backward`.
    """

    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "op", "name", "grad")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None,
                 parents: tuple = _EMPTY, backward_fn: Callable | None = None, op: str = "leaf"):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim > 2:
            raise ValueError(f"tensors are limited to rank 2, got shape {value.shape}")
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op
        self.name = name
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    @property
    def T(self):
        return transpose(self)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a size-1 tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


_grad_enabled = True


class no_grad:
    """Context manager that stops graph recording (outputs become constants)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


def _node(value, parents: tuple, backward_fn, op: str) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(value, op=op)
    return Tensor(value, parents=parents, backward_fn=backward_fn, requires_grad=True, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.value + b.value, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _node(a.value - b.value, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    av, bv = a.value, b.value

    def bw(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _node(av * bv, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    av, bv = a.value, b.value

    def bw(g):
        return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / (bv * bv), bv.shape)

    return _node(av / bv, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    av = a.value
    return _node(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def broadcast(a: Tensor, shape: tuple) -> Tensor:
    """Broadcast a size-1 tensor to ``shape``."""
    if a.size != 1:
        raise ShapeError("broadcast", a.shape, shape, "only size-1 tensors broadcast")
    sa = a.shape
    return _node(np.full(shape, a.value.reshape(-1)[0]), (a,), lambda g: (np.full(sa, g.sum()),),
                 "broadcast")


def expand(a: Tensor, n: int, axis: int) -> Tensor:
    """Repeat an ``(r, 1)`` column ``n`` times along axis 1, or a ``(1, c)`` row along axis 0."""
    if a.value.ndim != 2:
        raise ShapeError("expand", a.shape, (n,), "needs a rank-2 tensor")
    if axis == 1:
        if a.shape[1] != 1:
            raise ShapeError("expand", a.shape, (a.shape[0], n), "axis 1 needs a single column")
        out = np.repeat(a.value, n, axis=1)
        return _node(out, (a,), lambda g: (g.sum(axis=1, keepdims=True),), "expand")
    if axis == 0:
        if a.shape[0] != 1:
            raise ShapeError("expand", a.shape, (n, a.shape[1]), "axis 0 needs a single row")
        out = np.repeat(a.value, n, axis=0)
        return _node(out, (a,), lambda g: (g.sum(axis=0, keepdims=True),), "expand")
    raise ValueError(f"expand: bad axis {axis}")


# ---------------------------------------------------------------------------
# linear algebra and structural ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value

    def bw(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _node(av @ bv, (a, b), bw, "matmul")


def transpose(a: Tensor) -> Tensor:
    return _node(a.value.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    sa = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", sa, tuple(shape)) from None
    return _node(out, (a,), lambda g: (g.reshape(sa),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.value.ndim != len(ref) or any(
                t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ShapeError("concat", ref, t.shape, f"axis={axis}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing; keeps rank for slice objects."""
    sa = a.shape
    out = a.value[key]

    def bw(g):
        full = np.zeros(sa)
        full[key] = g
        return (full,)

    return _node(out, (a,), bw, "slice")


def gather(table: Tensor, index) -> Tensor:
    """Row lookup ``table[index]``; the gradient scatter-adds into the rows used."""
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    rows = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= rows):
        bad = index[(index < 0) | (index >= rows)][0]
        raise IndexError(f"gather: index {bad} out of range for {rows} rows")
    sa = table.shape

    def bw(g):
        full = np.zeros(sa)
        np.add.at(full, index, g)
        return (full,)

    return _node(table.value[index], (table,), bw, "gather")


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum over ``axis`` (kept as a size-1 dimension) or over everything to shape ``(1, 1)``."""
    sa = a.shape
    if axis is None:
        out = np.array([[a.value.sum()]])
        return _node(out, (a,), lambda g: (np.full(sa, g.reshape(-1)[0]),), "sum")
    out = a.value.sum(axis=axis, keepdims=True)
    return _node(out, (a,), lambda g: (np.broadcast_to(g, sa).copy(),), "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def inner(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise inner product of two ``(n, d)`` tensors, shape ``(n, 1)``."""
    if a.shape != b.shape:
        raise ShapeError("inner", a.shape, b.shape)
    return sum_(mul(a, b), axis=-1)


def l2_norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; subgradient 0 at the origin."""
    av = a.value
    n = np.sqrt((av * av).sum(axis=axis, keepdims=True))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * av / safe, 0.0),)

    return _node(n, (a,), bw, "l2_norm")


def distance(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise Euclidean distance, shape ``(n, 1)``."""
    if a.shape != b.shape:
        raise ShapeError("distance", a.shape, b.shape)
    return l2_norm(sub(a, b), axis=-1)


def sum_squares(a: Tensor) -> Tensor:
    av = a.value
    return _node(np.array([[np.dot(av.ravel(), av.ravel())]]), (a,), lambda g: (2.0 * g.reshape(-1)[0] * av,),
                 "sum_squares")


# ---------------------------------------------------------------------------
# nonlinearities


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable on both tails
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.value)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)
    return _node(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(a: Tensor) -> Tensor:
    av = a.value
    pos = av > 0
    return _node(np.where(pos, av, 0.0), (a,), lambda g: (g * pos,), "relu")


def softplus(a: Tensor) -> Tensor:
    av = a.value
    out = np.logaddexp(0.0, av)
    return _node(out, (a,), lambda g: (g * _sigmoid(av),), "softplus")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.value)
    return _node(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    av = a.value
    return _node(np.log(av), (a,), lambda g: (g / av,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _node(np.clip(av, lo, hi), (a,), lambda g: (g * inside,), "clip")


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``.  ``mask`` (same shape, 1 keep / 0 drop) zeroes entries exactly."""
    av = a.value
    if mask is not None:
        av = np.where(mask > 0, av, -np.inf)
    z = av - av.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (a,), bw, "softmax")


def hinge(a: Tensor) -> Tensor:
    """``max(a, 0)``."""
    return relu(a)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float,
               mean_: np.ndarray | None = None, var: np.ndarray | None = None) -> Tensor:
    """Normalize columns of ``x`` then scale/shift.

    With ``mean_``/``var`` given they are treated as constants (inference);
    otherwise batch statistics are used and differentiated through.
    """
    xv = x.value
    if xv.ndim != 2 or gamma.shape != (1, xv.shape[1]) or beta.shape != gamma.shape:
        raise ShapeError("batch_norm", x.shape, gamma.shape)
    gv = gamma.value
    if mean_ is not None:
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mean_) * inv

        def bw_eval(g):
            return g * gv * inv, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

        return _node(xhat * gv + beta.value, (x, gamma, beta), bw_eval, "batch_norm")

    n = xv.shape[0]
    mu = xv.mean(axis=0, keepdims=True)
    xc = xv - mu
    v = (xc * xc).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = xc * inv

    def bw(g):
        gxhat = g * gv
        gx = inv / n * (n * gxhat - gxhat.sum(axis=0, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=0, keepdims=True))
        return gx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _node(xhat * gv + beta.value, (x, gamma, beta), bw, "batch_norm")


# ---------------------------------------------------------------------------
# backward pass


def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, wrt: Iterable[Tensor] | None = None) -> dict:
    """Return ``{leaf: d root / d leaf}`` for trainable leaves.

    If ``wrt`` is given, exactly those leaves are reported (zeros for leaves
    the root does not depend on); otherwise every trainable leaf reached.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    wrt = list(wrt) if wrt is not None else None
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if root.requires_grad:
        grads[id(root)] = np.ones(root.shape)
        for node in reversed(_topo(root)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                leaves[id(node)] = node
                grads[id(node)] = g
                continue
            pgs = node.backward_fn(g)
            for p, pg in zip(node.parents, pgs):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if wrt is None:
        return {leaf: grads[k] for k, leaf in leaves.items()}
    return {leaf: grads.get(id(leaf), np.zeros(leaf.shape)) for leaf in wrt}


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction.  State moments are keyed by parameter name."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self, grads: dict) -> None:
        """Apply one update; ``grads`` maps parameter name to gradient array."""
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros(p.shape)
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for k in self.params:
            self.m[k] = np.array(state["m"][k], dtype=np.float64)
            self.v[k] = np.array(state["v"][k], dtype=np.float64)


def adam_step(params: dict, grads: dict, state: dict, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, dict]:
    """Functional Adam update on plain arrays.

    ``state`` holds ``step``, ``m`` and ``v``; pass ``{}`` for a fresh state.
    Returns new ``(params, state)`` without mutating the inputs.
    """
    t = int(state.get("step", 0)) + 1
    m_old = state.get("m") or {k: np.zeros(np.shape(v)) for k, v in params.items()}
    v_old = state.get("v") or {k: np.zeros(np.shape(v)) for k, v in params.items()}
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads.get(k, np.zeros(p.shape)), dtype=np.float64)
        if m_old[k].shape != p.shape:
            raise ShapeError("adam_step", m_old[k].shape, p.shape, f"moment for {k!r}")
        m = beta1 * m_old[k] + (1 - beta1) * g
        v = beta2 * v_old[k] + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        new_p[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, {"step": t, "m": new_m, "v": new_v}
