"""Dense tensors with reverse-mode autodiff, plus the Adam optimizer.

A :class:`Tensor` wraps a numpy array. Every differentiable operation
records its parents and a closure mapping the output gradient to parent
gradients; :meth:`Tensor.backward` walks that graph in reverse topological
order. Leaf tensors with ``requires_grad`` accumulate into ``.grad``
additively, so callers zero gradients between optimizer steps.

Broadcasting is deliberately absent except for bias addition along the
channel axis.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NumericError", "ContractError",
    "no_grad", "is_grad_enabled", "set_default_dtype", "get_default_dtype",
    "matmul", "add", "sub", "mul", "scale", "sigmoid", "tanh", "leaky_relu",
    "log1p", "expm1", "elementwise", "add_bias", "concat", "reshape",
    "sum", "mean", "mse_loss", "make_op",
    "AdamState", "Adam", "adam_step", "grad_check", "LEAKY_SLOPE",
]

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """An operation produced non-finite values."""


class ContractError(RuntimeError):
    """A caller violated a documented precondition."""


_state = threading.local()
_default_dtype = np.float32


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference, finite differences)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


class Tensor:
    """n-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype
        arr = np.array(data, dtype=dtype, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- autodiff ------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Back-propagate from this tensor.

        ``grad`` defaults to ones for a single-element tensor.
        """
        if grad is None:
            if self.size != 1:
                raise ContractError(f"backward() on shape {self.shape} needs an explicit grad")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"grad shape {grad.shape} != tensor shape {self.shape}")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def make_op(op: str, data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and wire it into the graph.

    ``backward`` receives the output gradient and returns one gradient (or
    None) per parent, in order.
    """
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: non-finite output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return make_op("matmul", A @ B, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return make_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return make_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return make_op("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return make_op("scale", a.data * c, (a,), lambda g: (g * c,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    half = x.dtype.type(0.5)
    return half + half * np.tanh(half * x)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return make_op("sigmoid", y, (a,), lambda g: (g * y * (1 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_op("tanh", y, (a,), lambda g: (g * (1 - y * y),))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    x = a.data
    pos = x >= 0
    s = x.dtype.type(slope)
    y = np.where(pos, x, s * x)
    return make_op("leaky_relu", y, (a,), lambda g: (np.where(pos, g, s * g),))


def log1p(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.log1p(x)
    return make_op("log1p", y, (a,), lambda g: (g / (1 + x),))


def expm1(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.expm1(a.data)
    return make_op("expm1", y, (a,), lambda g: (g * (y + 1),))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "log1p": log1p, "expm1": expm1}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *inputs: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    """Dispatch an elementwise op by name."""
    if op in _BINARY:
        if len(inputs) != 2:
            raise ContractError(f"{op} takes two operands")
        return _BINARY[op](*inputs)
    if len(inputs) != 1:
        raise ContractError(f"{op} takes one operand")
    if op == "leaky_relu":
        return leaky_relu(inputs[0], slope)
    if op in _UNARY:
        return _UNARY[op](inputs[0])
    raise ValueError(f"unknown elementwise op {op!r}")


def add_bias(x: Tensor, bias: Tensor, axis: int = -2) -> Tensor:
    """Add a per-channel bias vector along ``axis`` (default: channel axis of [..., C, T])."""
    axis = axis % x.ndim
    if bias.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match axis {axis} of {x.shape}")
    shape = [1] * x.ndim
    shape[axis] = -1
    other = tuple(i for i in range(x.ndim) if i != axis)
    return make_op("add_bias", x.data + bias.data.reshape(shape), (x, bias),
                   lambda g: (g, g.sum(axis=other)))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrays = [t.data for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op("concat", out, tuple(tensors), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return make_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_op("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                   lambda g: (np.full(a.shape, g, dtype=a.dtype),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return make_op("mean", np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                   lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error; ``target`` is treated as a constant."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"mse_loss: shape mismatch {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size
    return make_op("mse_loss", np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred,),
                   lambda g: (diff * (2 * g / n),))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> Sequence[Tensor]:
    """Apply one bias-corrected Adam update in place.

    Gradients are read but left untouched.
    """
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {i} {p.shape} has no gradient")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if len(state.first_moment) != len(params):
        raise ContractError("adam_step: parameter list changed between steps")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype)
    return params


class Adam:
    """Thin stateful wrapper around :func:`adam_step`."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(learning_rate=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               indices: Iterable[int] | None = None) -> float:
    """Max relative error between autodiff and central differences.

    Parameters
    ----------
    f : callable
        Maps ``x`` to a single-element tensor. It may close over other tensors.
    x : Tensor
        Point of evaluation; perturbed in place and restored.
    h : float
        Base step, scaled per coordinate by ``max(1, |x_i|)``.
    indices : iterable of int, optional
        Flat coordinates to check; all of them by default.

    Returns
    -------
    float
        ``max |a - n| / (|a| + |n| + 1e-12)`` over the checked coordinates.
    """
    if not (h > 0 and np.isfinite(h)):
        raise ValueError(f"grad_check: invalid step size {h!r}")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("grad_check: f(x) is not finite")
    out.backward()
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).astype(np.float64)
    x.grad = None

    flat = x.data.reshape(-1)
    idx = range(x.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            step = h * max(1.0, abs(float(orig)))
            flat[i] = orig + step
            fp = float(f(x).data.sum())
            flat[i] = orig - step
            fm = float(f(x).data.sum())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"grad_check: non-finite f near coordinate {i}")
            num = (fp - fm) / (2 * step)
            a = analytic[i]
            worst = max(worst, abs(a - num) / (abs(a) + abs(num) + 1e-12))
    return worst
