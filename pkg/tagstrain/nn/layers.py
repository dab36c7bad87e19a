"""Layers built on the engine: convolution, batch norm, linear, dropout, LSTM."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from tagstrain.errors import ShapeError
from tagstrain.nn.engine import Tensor, batch_norm_eval, batch_norm_train, conv2d, max_pool2d, stack


class Module:
    """Holds named parameters, buffers and child modules in registration order."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name: str, value) -> None:
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = None
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for name in self._buffers:
            object.__setattr__(self, name, getattr(self, name).astype(dtype))
        for child in self._children.values():
            child.astype(dtype)
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = [k for k in expected if k not in state]
        unexpected = [k for k in state if k not in expected]
        if missing or unexpected:
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, current in expected.items():
            value = np.asarray(state[name])
            if value.shape != current.shape:
                raise ShapeError(f"{name}: expected shape {current.shape}, got {value.shape}")
        self._load(state, "")

    def _load(self, state: Dict[str, np.ndarray], prefix: str) -> None:
        for name, p in self._params.items():
            p.data = np.array(state[prefix + name], dtype=p.data.dtype)
        for name in self._buffers:
            current = getattr(self, name)
            object.__setattr__(self, name, np.array(state[prefix + name], dtype=current.dtype))
        for name, child in self._children.items():
            child._load(state, f"{prefix}{name}.")


def _param(values: np.ndarray) -> Tensor:
    return Tensor(values.astype(np.float32), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = _param(rng.normal(0.0, math.sqrt(2.0 / fan_in), (out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = _param(np.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    """Batch norm over channels; running statistics follow r = m*r + (1-m)*batch."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        if not self.training:
            return batch_norm_eval(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        count = x.data.size // x.shape[1]
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes) * (count / max(count - 1, 1))
        m = self.momentum
        self.register_buffer("running_mean", (m * self.running_mean + (1 - m) * mean).astype(self.running_mean.dtype))
        self.register_buffer("running_var", (m * self.running_var + (1 - m) * var).astype(self.running_var.dtype))
        return batch_norm_train(x, self.gamma, self.beta, self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, gain: float = 2.0):
        super().__init__()
        self.weight = _param(rng.normal(0.0, math.sqrt(gain / in_features), (in_features, out_features)))
        self.bias = _param(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        keep = (self.rng.random(x.shape) >= self.p).astype(x.dtype) / (1.0 - self.p)
        return x * Tensor(keep)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x.relu()


class LeakyReLU(Module):
    def __init__(self, alpha: float = 0.1):
        super().__init__()
        self.alpha = alpha

    def forward(self, x: Tensor) -> Tensor:
        return x.leaky_relu(self.alpha)


class MaxPool2d(Module):
    def forward(self, x: Tensor) -> Tensor:
        return max_pool2d(x)


class Flatten(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x.reshape(x.shape[0], -1)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def forward(self, x):
        for layer in self._children.values():
            x = layer(x)
        return x


class LSTMCell(Module):
    """Gates ordered input, forget, cell candidate, output along the 4H axis."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        super().__init__()
        self.hidden_size = hidden_size
        bound = 1.0 / math.sqrt(hidden_size)
        self.w_x = _param(rng.uniform(-bound, bound, (input_size, 4 * hidden_size)))
        self.w_h = _param(rng.uniform(-bound, bound, (hidden_size, 4 * hidden_size)))
        bias = np.zeros(4 * hidden_size)
        bias[hidden_size:2 * hidden_size] = 1.0
        self.bias = _param(bias)

    def forward(self, x: Tensor, state: Tuple[Tensor, Tensor]) -> Tuple[Tensor, Tensor]:
        h, c = state
        if x.shape[-1] != self.w_x.shape[0]:
            raise ShapeError(f"LSTM input has {x.shape[-1]} features, cell expects {self.w_x.shape[0]}")
        z = x @ self.w_x + h @ self.w_h + self.bias
        n = self.hidden_size
        i = z[:, 0:n].sigmoid()
        f = z[:, n:2 * n].sigmoid()
        g = z[:, 2 * n:3 * n].tanh()
        o = z[:, 3 * n:4 * n].sigmoid()
        c = f * c + i * g
        h = o * c.tanh()
        return h, c

    def initial_state(self, batch: int, dtype) -> Tuple[Tensor, Tensor]:
        zeros = np.zeros((batch, self.hidden_size), dtype=dtype)
        return Tensor(zeros), Tensor(zeros.copy())


class LSTM(Module):
    """Runs an LSTMCell over (B, T, F) input from a zero state; returns (B, T, H)."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        super().__init__()
        self.cell = LSTMCell(input_size, hidden_size, rng)

    def forward(self, x: Tensor, state: Optional[Tuple[Tensor, Tensor]] = None) -> Tensor:
        if x.ndim != 3:
            raise ShapeError(f"LSTM expects (B, T, F) input, got {x.shape}")
        if state is None:
            state = self.cell.initial_state(x.shape[0], x.dtype)
        outputs = []
        for t in range(x.shape[1]):
            state = self.cell(x[:, t, :], state)
            outputs.append(state[0])
        return stack(outputs, axis=1)


def count_parameters(module: Module) -> int:
    return int(sum(p.data.size for p in module.parameters()))
