"""
Reverse-mode automatic differentiation over dense float64 arrays.

Each Tensor remembers the tensors it was computed from and a closure that
pushes its gradient back to them. Only the layer set used by the tiny CNN is
provided: 3x3 same-padding convolution, ReLU, 2x2 average downsampling,
global average pooling, dense layers, log-softmax and elementwise arithmetic.

Gradient recording is controlled per thread, so inference under `no_grad()`
can run concurrently against a read-only model.
"""

import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import AutogradError, NumericError, ShapeError

_recording = threading.local()

ArrayLike = Union[np.ndarray, float, int, "Tensor"]


def is_recording() -> bool:
    return getattr(_recording, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    previous = is_recording()
    _recording.enabled = False
    try:
        yield
    finally:
        _recording.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = tuple(_parents)
        self._backward = _backward

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        if is_recording() and any(p.requires_grad for p in parents):
            return cls(data, requires_grad=True, _parents=parents, _backward=backward)
        return cls(data)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def assert_finite(self, label: str) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"Non-finite values in {label}")
        return self

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad += grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise AutogradError(
                "backward() called on a tensor without a recorded graph "
                "(was it computed under no_grad or from constants only?)"
            )
        if grad is None:
            if self.data.size != 1:
                raise AutogradError(f"backward() without a seed gradient needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)

        # Iterative post-order so deep graphs do not hit the recursion limit
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Elementwise arithmetic

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)

        def backward(grad):
            self._accumulate(_unbroadcast(grad, self.shape))
            other._accumulate(_unbroadcast(grad, other.shape))

        return Tensor._from_op(self.data + other.data, (self, other), backward)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return self + other

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)

        def backward(grad):
            if self.requires_grad:
                self._accumulate(_unbroadcast(grad * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(grad * self.data, other.shape))

        return Tensor._from_op(self.data * other.data, (self, other), backward)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self * other

    def exp(self) -> "Tensor":
        out = np.exp(self.data)

        def backward(grad):
            self._accumulate(grad * out)

        return Tensor._from_op(out, (self,), backward)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(grad):
            if axis is not None and not keepdims:
                grad = np.expand_dims(grad, axis)
            self._accumulate(np.broadcast_to(grad, self.shape))

        return Tensor._from_op(out, (self,), backward)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / count)

    def reshape(self, *shape: int) -> "Tensor":
        original = self.shape

        def backward(grad):
            self._accumulate(grad.reshape(original))

        return Tensor._from_op(self.data.reshape(*shape), (self,), backward)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# Layer primitives


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 cross-correlation with same padding; weight is (O, C, k, k)."""
    batch, channels, height, width = x.shape
    out_channels, in_channels, kh, kw = weight.shape
    if channels != in_channels:
        raise ShapeError(f"conv2d expects {in_channels} input channels, got {channels}")
    pad_h, pad_w = kh // 2, kw // 2
    padded = np.pad(x.data, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * height * width, channels * kh * kw)
    w_mat = weight.data.reshape(out_channels, -1)
    out = (cols @ w_mat.T + bias.data).reshape(batch, height, width, out_channels)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(grad):
        g2d = grad.transpose(0, 2, 3, 1).reshape(batch * height * width, out_channels)
        if weight.requires_grad:
            weight._accumulate((g2d.T @ cols).reshape(weight.shape))
        if bias.requires_grad:
            bias._accumulate(g2d.sum(axis=0))
        if x.requires_grad:
            dcols = (g2d @ w_mat).reshape(batch, height, width, channels, kh, kw)
            dpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    dpad[:, :, i : i + height, j : j + width] += dcols[..., i, j].transpose(0, 3, 1, 2)
            x._accumulate(dpad[:, :, pad_h : pad_h + height, pad_w : pad_w + width])

    return Tensor._from_op(out, (x, weight, bias), backward)


def relu(x: Tensor) -> Tensor:
    active = x.data > 0

    def backward(grad):
        x._accumulate(grad * active)

    return Tensor._from_op(np.where(active, x.data, 0.0), (x,), backward)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 (the stride-2 downsample layer)."""
    batch, channels, height, width = x.shape
    if height % 2 or width % 2:
        raise ShapeError(f"avg_pool2 needs even spatial size, got {height}x{width}")
    out = x.data.reshape(batch, channels, height // 2, 2, width // 2, 2).mean(axis=(3, 5))

    def backward(grad):
        x._accumulate(np.repeat(np.repeat(grad, 2, axis=2), 2, axis=3) * 0.25)

    return Tensor._from_op(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    batch, channels, height, width = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(grad):
        x._accumulate(np.broadcast_to(grad[:, :, None, None] / (height * width), x.shape))

    return Tensor._from_op(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Dense layer; weight is (in_features, out_features)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear expects {weight.shape[0]} features, got {x.shape[-1]}")
    out = x.data @ weight.data + bias.data

    def backward(grad):
        if weight.requires_grad:
            weight._accumulate(x.data.T @ grad)
        if bias.requires_grad:
            bias._accumulate(grad.sum(axis=0))
        if x.requires_grad:
            x._accumulate(grad @ weight.data.T)

    return Tensor._from_op(out, (x, weight, bias), backward)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of a (B, K) tensor."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def backward(grad):
        x._accumulate(grad - probs * grad.sum(axis=1, keepdims=True))

    return Tensor._from_op(out, (x,), backward)
