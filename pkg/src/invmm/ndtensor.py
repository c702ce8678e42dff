"""Dense float64 tensors with reverse-mode differentiation.

Storage is a row-major numpy array; every op checks shapes explicitly and the
only implicit broadcast is a 0-d (scalar) operand.  Anything else must go
through :func:`broadcast_to`, which keeps the gradient rules auditable.

Gradients accumulate into ``Tensor.grad`` of every leaf created with
``requires_grad=True``.  A graph can be differentiated once; a second
``backward`` call on the same root raises :class:`GraphConsumedError`.  Call
:func:`zero_grad` (or the optimizer's ``zero_grad``) between steps.
"""
from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "GraphConsumedError",
    "no_grad",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "square",
    "sqrt",
    "sum",
    "mean",
    "silu",
    "tanh",
    "concat",
    "broadcast_to",
    "reshape",
    "softmax",
    "log_softmax",
    "mlp",
    "backward",
    "zero_grad",
    "finite_diff_check",
    "Adam",
    "adam_step",
    "NonFiniteGradientError",
]


class ShapeError(ContractError):
    """Operand shapes violate an op's contract."""


class DomainError(ContractError):
    """Input outside an op's mathematical domain (e.g. log of x <= 0)."""


class GraphConsumedError(RuntimeError):
    """Raised when backward is called twice on the same graph."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A value in the computation graph.

    Leaves own ``data``; interior nodes additionally remember the op that
    produced them (``op``), their parents and a closure mapping the output
    gradient to one gradient per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __truediv__ = lambda self, other: div(self, other)  # noqa: E731
    __rtruediv__ = lambda self, other: div(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, op: str, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out.op = op
    out.name = None
    out._consumed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out._backward = None
    return out


def _unbroadcast_scalar(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if shape == () and g.shape != ():
        return np.asarray(g.sum())
    return g


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform (only 0-d operands broadcast)")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "add")
    return _node(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast_scalar(g, a.shape), _unbroadcast_scalar(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "sub")
    return _node(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast_scalar(g, a.shape), _unbroadcast_scalar(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "mul")
    return _node(
        a.data * b.data, "mul", (a, b),
        lambda g: (_unbroadcast_scalar(g * b.data, a.shape), _unbroadcast_scalar(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def grad_fn(g):
        return (
            _unbroadcast_scalar(g / b.data, a.shape),
            _unbroadcast_scalar(-g * out / b.data, b.shape),
        )

    return _node(out, "div", (a, b), grad_fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def expm1(a) -> Tensor:
    """exp(a) - 1 without cancellation near 0."""
    a = _as_tensor(a)
    return _node(np.expm1(a.data), "expm1", (a,), lambda g: (g * np.exp(a.data),))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: argument must be strictly positive")
    return _node(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _node(a.data * a.data, "square", (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: argument must be nonnegative")
    out = np.sqrt(a.data)
    return _node(out, "sqrt", (a,), lambda g: (0.5 * g / out,))


def silu(a) -> Tensor:
    a = _as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig
    return _node(out, "silu", (a,), lambda g: (g * (sig * (1.0 + a.data * (1.0 - sig))),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------- reductions / structure


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis))

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(out, "sum", (a,), grad_fn)


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return mul(sum(a, axis=axis), 1.0 / n)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ ({a.shape} @ {b.shape})")
    return _node(a.data @ b.data, "matmul", (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    if not parts:
        raise ShapeError("concat: nothing to concatenate")
    ndim = parts[0].ndim
    ax = axis % ndim
    for p in parts:
        if p.ndim != ndim or any(p.shape[d] != parts[0].shape[d] for d in range(ndim) if d != ax):
            raise ShapeError(f"concat: incompatible shapes {[q.shape for q in parts]}")
    out = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def grad_fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(parts)))

    return _node(out, "concat", parts, grad_fn)


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    """Explicitly broadcast ``a`` to ``shape`` using numpy's trailing-axis rules."""
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    lead = len(shape) - a.ndim
    kept = tuple(i for i, n in enumerate(a.shape) if n == 1 and shape[lead + i] != 1)

    def grad_fn(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        if kept:
            g = g.sum(axis=kept, keepdims=True)
        return (g,)

    return _node(out, "broadcast", (a,), grad_fn)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: {a.shape} -> {tuple(shape)}") from None
    return _node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, "softmax", (a,), grad_fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    out = a.data - lse
    p = np.exp(out)
    return _node(out, "log_softmax", (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def mlp(x, weights: Sequence[Tensor], biases: Sequence[Tensor]) -> Tensor:
    """Fused SiLU MLP (no activation after the last layer) as one graph node.

    Forward and backward run in :mod:`invmm.kernels`; the result equals the
    composition of :func:`matmul`, :func:`broadcast_to`, :func:`add` and
    :func:`silu`, which the tests check.
    """
    from . import kernels

    x = _as_tensor(x)
    if len(weights) != len(biases) or not weights:
        raise ShapeError("mlp: need one bias per weight and at least one layer")
    d = x.shape[1] if x.ndim == 2 else -1
    for w, b in zip(weights, biases):
        if w.ndim != 2 or w.shape[0] != d or b.shape != (w.shape[1],):
            raise ShapeError(f"mlp: layer shapes {w.shape}/{b.shape} do not chain from width {d}")
        d = w.shape[1]
    wd = [w.data for w in weights]
    out, cache = kernels.mlp_forward(x.data, wd, [b.data for b in biases])

    need_params = any(p.requires_grad for p in (*weights, *biases))

    def grad_fn(g):
        gx, gws, gbs = kernels.mlp_backward(g, wd, cache, need_params)
        return (gx, *gws, *gbs)

    return _node(out, "mlp", (x, *weights, *biases), grad_fn)


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Differentiate scalar ``root``; accumulate into leaf ``.grad``.

    Returns a map ``id(node) -> gradient`` covering every node that requires
    gradients, which is handy for tests on interior nodes.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if root._consumed:
        raise GraphConsumedError("backward already ran on this graph; rebuild it")
    root._consumed = True
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    if not root.requires_grad:
        return grads
    for node in reversed(_topo(root)):
        g = grads.get(id(node))
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        # interior graph is single-use: drop closures so intermediates can be freed
        node._backward = None
        node.parents = ()
    return grads


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-4, analytic: np.ndarray | None = None) -> float:
    """Relative error ``||analytic - central|| / ||central||`` (Euclidean norms).

    The norm-wise ratio keeps near-zero components, whose central differences
    are dominated by O(h^2) truncation, from inflating the error.

    ``f`` maps a Tensor to a scalar Tensor.  When ``analytic`` is omitted it is
    obtained by running :func:`backward` through ``f``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if analytic is None:
        leaf = Tensor(x0.copy(), requires_grad=True)
        out = f(leaf)
        backward(out)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x0.shape)
    central = np.empty_like(x0)
    flat = central.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xm = x0.copy().reshape(-1)
            xp[i] += h
            xm[i] -= h
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise DomainError(f"finite_diff_check: non-finite evaluation at coordinate {i}")
            flat[i] = (fp - fm) / (2.0 * h)
    if not central.size:
        return 0.0
    return float(np.linalg.norm(analytic - central) / (np.linalg.norm(central) + 1e-12))


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.param_name = name


class Adam:
    """Stateful wrapper around :func:`adam_step` for a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-1, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.state: dict | None = None

    def zero_grad(self) -> None:
        zero_grad(self.params.values())

    def step(self) -> None:
        values = {k: p.data for k, p in self.params.items()}
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        new, self.state = adam_step(values, grads, self.state, self.lr, self.betas, self.eps)
        for k, p in self.params.items():
            p.data = new[k]


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: dict | None,
              lr: float = 1e-1, betas=(0.9, 0.999), eps: float = 1e-8) -> tuple[dict[str, np.ndarray], dict]:
    """Functional Adam update; returns new params and state without mutating inputs."""
    state = state or {"t": 0, "m": {k: np.zeros_like(v) for k, v in params.items()},
                      "v": {k: np.zeros_like(v) for k, v in params.items()}}
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise ShapeError(f"adam_step: gradient shape for {name!r} does not match its parameter")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    t = state["t"] + 1
    b1, b2 = betas
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = b1 * state["m"][name] + (1.0 - b1) * g
        v = b2 * state["v"][name] + (1.0 - b2) * g * g
        new_p[name] = p - lr * (m / (1.0 - b1 ** t)) / (np.sqrt(v / (1.0 - b2 ** t)) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, {"t": t, "m": new_m, "v": new_v}
