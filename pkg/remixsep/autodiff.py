"""Reverse-mode automatic differentiation over numpy arrays.

Every value is a :class:`DiffTensor`. Operations build a graph of nodes; each
node stores a closure mapping the upstream gradient to one gradient per parent.

Complex values follow the conjugate-cotangent convention: for a real loss ``L``
the gradient stored for ``z`` is ``dL/dRe(z) + 1j * dL/dIm(z)`` (twice the
Wirtinger derivative ``dL/d conj(z)``), so ``z -= lr * grad`` decreases ``L``.
With that convention a holomorphic ``y = f(a)`` back-propagates
``grad_a = grad_y * conj(f'(a))``.
"""

import logging
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from remixsep.errors import GraphError

logger = logging.getLogger(__name__)

ArrayLike = Union["DiffTensor", np.ndarray, float, complex, int]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value)
    if np.iscomplexobj(arr):
        return arr.astype(np.complex128, copy=False)
    return arr.astype(np.float64, copy=False)


class DiffTensor:
    """A value plus its place in the reverse-mode graph."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, value, parents: Sequence["DiffTensor"] = (),
                 backward: Optional[BackwardFn] = None, requires_grad: bool = False,
                 name: Optional[str] = None):
        self.value = _as_array(value)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = tuple(parents)
        self._backward = backward

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.value)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self):
        return self.value.item()

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.value)

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}, dtype={self.value.dtype}{tag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __neg__(self): return neg(self)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 else axes)
    def conj(self): return conj(self)
    def abs2(self): return abs2(self)

    @property
    def real(self): return real(self)

    @property
    def H(self):
        """Conjugate transpose of the last two axes."""
        return conj(swapaxes(self, -1, -2))

    def backward(self) -> None:
        backward(self)


def as_tensor(value: ArrayLike) -> DiffTensor:
    return value if isinstance(value, DiffTensor) else DiffTensor(value)


def parameter(value, name: Optional[str] = None) -> DiffTensor:
    """Trainable leaf tensor."""
    return DiffTensor(np.array(value, copy=True), requires_grad=True, name=name)


def _node(value, parents: Sequence[DiffTensor], backward_fn: BackwardFn) -> DiffTensor:
    if not any(p.requires_grad for p in parents):
        return DiffTensor(value)
    return DiffTensor(value, parents=parents, backward=backward_fn, requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _fit_grad(node: DiffTensor, grad: np.ndarray) -> np.ndarray:
    grad = _unbroadcast(np.asarray(grad), node.shape)
    if not node.is_complex and np.iscomplexobj(grad):
        grad = grad.real
    return np.broadcast_to(grad, node.shape)


def _topological_order(root: DiffTensor) -> list:
    order = []
    state: Dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        if state.get(key) == 2:
            continue
        if state.get(key) == 1:
            raise GraphError("Cycle detected in autodiff graph")
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            if not parent.requires_grad:
                continue
            pstate = state.get(id(parent))
            if pstate == 1:
                raise GraphError("Cycle detected in autodiff graph")
            if pstate is None:
                stack.append((parent, False))
    return order


def backward(loss: DiffTensor,
             params: Optional[Mapping[str, DiffTensor]] = None) -> Dict[str, np.ndarray]:
    """Back-propagate a real scalar ``loss``.

    Sets ``.grad`` on every trainable leaf reached from ``loss`` and returns the
    gradient map for ``params`` (zeros for parameters the loss does not touch).
    """
    if loss.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.is_complex:
        raise GraphError("backward() needs a real-valued loss")

    for p in (params or {}).values():
        p.grad = None
    grads: Dict[int, np.ndarray] = {}
    if loss.requires_grad:
        order = _topological_order(loss)
        for node in order:
            if node.is_leaf:
                node.grad = None
        grads[id(loss)] = np.ones(loss.shape)
        for node in reversed(order):
            upstream = grads.pop(id(node), None)
            if upstream is None:
                continue
            if node.is_leaf:
                node.grad = np.array(upstream)
                continue
            for parent, pgrad in zip(node._parents, node._backward(upstream)):
                if pgrad is None or not parent.requires_grad:
                    continue
                pgrad = _fit_grad(parent, pgrad)
                key = id(parent)
                grads[key] = grads[key] + pgrad if key in grads else np.array(pgrad)

    if params is None:
        return {}
    out = {}
    for name, p in params.items():
        out[name] = np.array(p.grad) if p.grad is not None else np.zeros_like(p.value)
    return out


def zero_grad(params: Iterable[DiffTensor]) -> None:
    for p in params:
        p.grad = None


# -- elementwise arithmetic ---------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: ArrayLike, b: ArrayLike) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value - b.value, (a, b), lambda g: (g, -g))


def neg(a: ArrayLike) -> DiffTensor:
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (-g,))


def mul(a: ArrayLike, b: ArrayLike) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (g * np.conj(b.value), g * np.conj(a.value)))


def div(a: ArrayLike, b: ArrayLike) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value

    def _backward(g):
        ga = g / np.conj(b.value)
        return ga, -ga * np.conj(out)

    return _node(out, (a, b), _backward)


def conj(a: ArrayLike) -> DiffTensor:
    a = as_tensor(a)
    if not a.is_complex:
        return a
    return _node(np.conj(a.value), (a,), lambda g: (np.conj(g),))


def real(a: ArrayLike) -> DiffTensor:
    a = as_tensor(a)
    if not a.is_complex:
        return a
    return _node(a.value.real, (a,), lambda g: (g.astype(np.complex128),))


def imag(a: ArrayLike) -> DiffTensor:
    a = as_tensor(a)
    return _node(np.imag(a.value), (a,), lambda g: (1j * g,))


def abs2(a: ArrayLike) -> DiffTensor:
    """Squared modulus ``|a|**2``, real-valued."""
    a = as_tensor(a)
    out = (a.value * np.conj(a.value)).real if a.is_complex else a.value ** 2
    return _node(out, (a,), lambda g: (2.0 * g * a.value,))


def exp(a: ArrayLike) -> DiffTensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * np.conj(out),))


def log(a: ArrayLike) -> DiffTensor:
    a = as_tensor(a)
    return _node(np.log(a.value), (a,), lambda g: (g / np.conj(a.value),))


def _require_real(a: DiffTensor, op: str) -> None:
    if a.is_complex:
        raise TypeError(f"{op} is defined for real tensors only")


def sqrt(a: ArrayLike) -> DiffTensor:
    """Square root of a non-negative real tensor.

    The gradient at 0 is taken as 0, so a Frobenius distance that is exactly
    zero (a perfect cycle reconstruction) passes no gradient back.
    """
    a = as_tensor(a)
    _require_real(a, "sqrt")
    out = np.sqrt(a.value)

    def _backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _node(out, (a,), _backward)


def relu(a: ArrayLike) -> DiffTensor:
    a = as_tensor(a)
    _require_real(a, "relu")
    return _node(np.maximum(a.value, 0.0), (a,), lambda g: (g * (a.value > 0),))


def leaky_relu(a: ArrayLike, slope: float = 0.2) -> DiffTensor:
    a = as_tensor(a)
    _require_real(a, "leaky_relu")
    positive = a.value > 0
    return _node(np.where(positive, a.value, slope * a.value), (a,),
                 lambda g: (np.where(positive, g, slope * g),))


def sigmoid(a: ArrayLike) -> DiffTensor:
    a = as_tensor(a)
    _require_real(a, "sigmoid")
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a: ArrayLike, axis: int = -1) -> DiffTensor:
    a = as_tensor(a)
    _require_real(a, "softmax")
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), _backward)


def clip(a: ArrayLike, lo: float, hi: float) -> DiffTensor:
    a = as_tensor(a)
    _require_real(a, "clip")
    inside = (a.value >= lo) & (a.value <= hi)
    return _node(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def where(cond: np.ndarray, a: ArrayLike, b: ArrayLike) -> DiffTensor:
    """Elementwise select with a constant boolean condition."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _node(np.where(cond, a.value, b.value), (a, b),
                 lambda g: (np.where(cond, g, 0), np.where(cond, 0, g)))


# -- reductions and shape ------------------------------------------------

def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> DiffTensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _node(out, (a,), _backward)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> DiffTensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) / float(count)


def reshape(a: ArrayLike, shape) -> DiffTensor:
    a = as_tensor(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes=None) -> DiffTensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None or axes == () else tuple(axes)
    inverse = np.argsort(axes)
    return _node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a: ArrayLike, axis1: int, axis2: int) -> DiffTensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, axes)


def expand_dims(a: ArrayLike, axis: int) -> DiffTensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.value, axis).shape)


def getitem(a: ArrayLike, index) -> DiffTensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    a = as_tensor(a)

    def _backward(g):
        dtype = np.complex128 if (a.is_complex or np.iscomplexobj(g)) else np.float64
        full = np.zeros(a.shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.value[index], (a,), _backward)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> DiffTensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.value for t in tensors], axis=axis)

    def _backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tensors, _backward)


def concatenate(tensors: Sequence[ArrayLike], axis: int = 0) -> DiffTensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


# -- linear algebra ------------------------------------------------------

def _hermitian(x: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(x, -1, -2))


def matmul(a: ArrayLike, b: ArrayLike) -> DiffTensor:
    """Batched matrix product; both operands must be at least 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands with ndim >= 2, got {a.shape} @ {b.shape}")
    return _node(a.value @ b.value, (a, b),
                 lambda g: (g @ _hermitian(b.value), _hermitian(a.value) @ g))


def solve(a: ArrayLike, b: ArrayLike) -> DiffTensor:
    """``a^{-1} b`` for batched square ``a``; backward uses a second solve."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.linalg.solve(a.value, b.value)

    def _backward(g):
        gb = np.linalg.solve(_hermitian(a.value), g)
        return -gb @ _hermitian(out), gb

    return _node(out, (a, b), _backward)


def trace(a: ArrayLike) -> DiffTensor:
    """Trace over the last two axes."""
    a = as_tensor(a)
    eye = np.eye(a.shape[-1])
    return _node(np.trace(a.value, axis1=-2, axis2=-1), (a,),
                 lambda g: (np.asarray(g)[..., None, None] * eye,))


# -- verification --------------------------------------------------------

def numerical_gradient(fn: Callable[[], DiffTensor], param: DiffTensor,
                       eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``fn()`` w.r.t. ``param`` (same convention as backward)."""
    base = param.value.copy()
    grad = np.zeros_like(base)
    directions = (1.0, 1j) if param.is_complex else (1.0,)
    for idx in np.ndindex(base.shape):
        for direction in directions:
            param.value[idx] = base[idx] + eps * direction
            f_plus = float(fn().value.real.sum())
            param.value[idx] = base[idx] - eps * direction
            f_minus = float(fn().value.real.sum())
            param.value[idx] = base[idx]
            grad[idx] += direction * (f_plus - f_minus) / (2.0 * eps)
    return grad


def gradcheck(fn: Callable[[], DiffTensor], params: Mapping[str, DiffTensor],
              eps: float = 1e-5) -> float:
    """Largest relative error between backward() and finite differences over ``params``."""
    analytic = backward(fn(), params)
    worst = 0.0
    for name, p in params.items():
        numeric = numerical_gradient(fn, p, eps)
        scale = max(np.linalg.norm(analytic[name]), np.linalg.norm(numeric), 1e-8)
        err = float(np.linalg.norm(analytic[name] - numeric) / scale)
        logger.debug(f"gradcheck {name}: relative error {err:.3e}")
        worst = max(worst, err)
    return worst
