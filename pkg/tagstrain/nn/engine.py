"""Reverse-mode automatic differentiation over numpy arrays.

Each differentiable op is a ``Function`` subclass with a numpy ``forward`` and a
``backward`` that maps the output gradient to one gradient per parent. Calling
``Function.apply`` records the op on the result tensor; ``Tensor.backward`` walks
the recorded graph in reverse topological order.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tagstrain.errors import NonFiniteError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int]

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def anomaly_enabled() -> bool:
    return getattr(_state, "detect_anomaly", False)


@contextmanager
def no_grad() -> Iterator[None]:
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def detect_anomaly() -> Iterator[None]:
    """Raise NonFiniteError as soon as any op produces or receives NaN/Inf."""
    previous = anomaly_enabled()
    _state.detect_anomaly = True
    try:
        yield
    finally:
        _state.detect_anomaly = previous


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite values in {what}")


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    def __init__(self, *parents: "Tensor"):
        self.parents = parents
        self.needs_grad = tuple(p.requires_grad for p in parents)

    def forward(self, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray):
        raise NotImplementedError

    @classmethod
    def apply(cls, *parents: "Tensor", **kwargs) -> "Tensor":
        ctx = cls(*parents)
        out = ctx.forward(*(p.data for p in parents), **kwargs)
        if anomaly_enabled():
            _check_finite(out, f"{cls.__name__} forward")
        track = grad_enabled() and any(ctx.needs_grad)
        return Tensor(out, requires_grad=track, _ctx=ctx if track else None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_ctx", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _ctx: Optional[Function] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _wrap(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # --- backward ---

    def _toposort(self) -> List["Tensor"]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise ShapeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        check = anomaly_enabled()
        for node in reversed(self._toposort()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._ctx.backward(g)
            if not isinstance(parent_grads, tuple):
                parent_grads = (parent_grads,)
            for parent, pg in zip(node._ctx.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(
                        f"{type(node._ctx).__name__} produced gradient {pg.shape} for input {parent.shape}"
                    )
                if check:
                    _check_finite(pg, f"{type(node._ctx).__name__} backward")
                pg = pg.astype(parent.data.dtype, copy=False)
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # --- operators ---

    def __add__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, self._wrap(other))

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self._wrap(other), self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(self, self._wrap(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(self._wrap(other), self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self, self._wrap(other))

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self._wrap(other), self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(self, self._wrap(other))

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(self._wrap(other), self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return MatMul.apply(self, self._wrap(other))

    def __getitem__(self, index) -> "Tensor":
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        return Transpose.apply(self, axes=axes or None)

    def sqrt(self) -> "Tensor":
        return Sqrt.apply(self)

    def abs(self) -> "Tensor":
        return Abs.apply(self)

    def relu(self) -> "Tensor":
        return ReLU.apply(self)

    def leaky_relu(self, alpha: float = 0.1) -> "Tensor":
        return LeakyReLU.apply(self, alpha=alpha)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)


# === elementwise ===

class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return -grad


class Pow(Function):
    def forward(self, a, exponent: float):
        self.a, self.exponent = a, exponent
        return a ** exponent

    def backward(self, grad):
        return grad * self.exponent * self.a ** (self.exponent - 1.0)


class Sqrt(Function):
    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return grad * 0.5 / self.out


class Abs(Function):
    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, grad):
        return grad * self.sign


class ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0).astype(a.dtype)

    def backward(self, grad):
        return grad * self.mask


class LeakyReLU(Function):
    def forward(self, a, alpha: float):
        self.slope = np.where(a > 0, 1.0, alpha).astype(a.dtype)
        return a * self.slope

    def backward(self, grad):
        return grad * self.slope


class Sigmoid(Function):
    def forward(self, a):
        self.out = np.exp(-np.logaddexp(0, -a)).astype(a.dtype)
        return self.out

    def backward(self, grad):
        return grad * self.out * (1 - self.out)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return grad * (1 - self.out * self.out)


# === linear algebra, reductions, movement ===

class MatMul(Function):
    def forward(self, a, b):
        if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        ga = grad @ np.swapaxes(self.b, -1, -2)
        gb = np.swapaxes(self.a, -1, -2) @ grad
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


class Sum(Function):
    def forward(self, a, axis, keepdims: bool):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, tuple(a % len(self.shape) for a in np.atleast_1d(self.axis)))
        return np.broadcast_to(grad, self.shape).copy()


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return grad.reshape(self.shape)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = axes if axes is not None else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return np.transpose(grad, np.argsort(self.axes))


class GetItem(Function):
    def forward(self, a, index):
        self.shape, self.dtype, self.index = a.shape, a.dtype, index
        return np.array(a[index])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.index, grad)
        return out


class Stack(Function):
    def forward(self, *arrays, axis: int = 0):
        self.axis = axis
        return np.stack(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.take(grad, i, axis=self.axis) for i in range(grad.shape[self.axis]))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


# === convolutional layers ===

class Conv2d(Function):
    """Stride-1 'same' convolution via im2col; x (N,C,H,W), w (O,C,k,k), b (O,)."""

    def forward(self, x, w, b):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
        k = w.shape[-1]
        if k % 2 == 0 or w.shape[-2] != k:
            raise ShapeError(f"conv2d needs an odd square kernel, got {w.shape[-2:]}")
        n, c, h, wd = x.shape
        p = k // 2
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        windows = sliding_window_view(padded, (k, k), axis=(2, 3))
        self.cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * k * k)
        self.x_shape, self.w = x.shape, w
        out = self.cols @ w.reshape(w.shape[0], -1).T + b
        return out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2)

    def backward(self, grad):
        n, c, h, wd = self.x_shape
        o, _, k, _ = self.w.shape
        p = k // 2
        g = grad.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g.T @ self.cols).reshape(self.w.shape)
        gb = g.sum(axis=0)
        gcols = (g @ self.w.reshape(o, -1)).reshape(n, h, wd, c, k, k)
        gpad = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                gpad[:, :, i:i + h, j:j + wd] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gpad[:, :, p:p + h, p:p + wd], gw, gb


class MaxPool2d(Function):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""

    def forward(self, x):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        blocks = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, h2, w2, 4)
        self.idx = np.argmax(blocks, axis=-1)[..., None]
        self.x_shape = x.shape
        return np.take_along_axis(blocks, self.idx, axis=-1)[..., 0]

    def backward(self, grad):
        n, c, h, w = self.x_shape
        h2, w2 = h // 2, w // 2
        blocks = np.zeros((n, c, h2, w2, 4), dtype=grad.dtype)
        np.put_along_axis(blocks, self.idx, grad[..., None], axis=-1)
        spread = blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        out = np.zeros(self.x_shape, dtype=grad.dtype)
        out[:, :, :2 * h2, :2 * w2] = spread
        return out


def _channel_axes(ndim: int) -> Tuple[int, ...]:
    return (0,) if ndim == 2 else (0, 2, 3)


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


class BatchNormTrain(Function):
    """Batch-statistics normalization over N (and H, W for 4-D input)."""

    def forward(self, x, gamma, beta, eps: float):
        axes = _channel_axes(x.ndim)
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean) * self.inv_std
        self.gamma, self.axes, self.count = gamma, axes, x.size // x.shape[1]
        return _channel_view(gamma, x.ndim) * self.xhat + _channel_view(beta, x.ndim)

    def backward(self, grad):
        ndim = grad.ndim
        gxhat = grad * _channel_view(self.gamma, ndim)
        m = self.count
        gx = (self.inv_std / m) * (
            m * gxhat
            - gxhat.sum(axis=self.axes, keepdims=True)
            - self.xhat * (gxhat * self.xhat).sum(axis=self.axes, keepdims=True)
        )
        ggamma = (grad * self.xhat).sum(axis=self.axes)
        gbeta = grad.sum(axis=self.axes)
        return gx, ggamma, gbeta


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return Conv2d.apply(x, weight, bias)


def max_pool2d(x: Tensor) -> Tensor:
    return MaxPool2d.apply(x)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return BatchNormTrain.apply(x, gamma, beta, eps=eps)


def batch_norm_eval(
    x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray, eps: float = 1e-5
) -> Tensor:
    ndim = x.ndim
    scale = Tensor(_channel_view(1.0 / np.sqrt(running_var + eps), ndim).astype(x.dtype))
    shift = Tensor(_channel_view(running_mean, ndim).astype(x.dtype))
    return (x - shift) * scale * gamma.reshape(_channel_view(gamma.data, ndim).shape) + beta.reshape(
        _channel_view(beta.data, ndim).shape
    )


# === finite differences ===

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def numerical_gradient(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5) -> List[np.ndarray]:
    """Central differences of scalar ``fn`` with respect to every input array."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    grads = []
    with no_grad():
        for arr in arrays:
            g = np.zeros_like(arr)
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                plus = fn(*(Tensor(a) for a in arrays)).item()
                flat[i] = orig - eps
                minus = fn(*(Tensor(a) for a in arrays)).item()
                flat[i] = orig
                gflat[i] = (plus - minus) / (2 * eps)
            grads.append(g)
    return grads


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences over all inputs."""
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    fn(*tensors).backward()
    numeric = numerical_gradient(fn, inputs, eps)
    return max(relative_error(t.grad if t.grad is not None else np.zeros_like(t.data), n) for t, n in zip(tensors, numeric))
