"""
The fixed small classifier: three conv stages with 2x2 average downsampling,
global average pooling and a dense head, trained with momentum SGD on a
cosine learning-rate schedule.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Union

import numpy as np

from autodiff import (
    Tensor,
    avg_pool2,
    conv2d,
    global_avg_pool,
    linear,
    log_softmax,
    relu,
)
from errors import ShapeError
from numeric_helpers import rng_for
from pydantic_models import ArchitectureSpec


def build_layers(spec: ArchitectureSpec) -> List[dict]:
    """Expand an architecture spec into the ordered layer descriptor list."""
    layers: List[dict] = []
    in_channels = 3
    for stage, width in enumerate(spec.widths, start=1):
        layers.append({"type": "conv3x3", "name": f"conv{stage}", "in": in_channels, "out": width})
        layers.append({"type": "relu"})
        if stage < len(spec.widths):
            layers.append({"type": "downsample"})
        in_channels = width
    layers.append({"type": "global_avg_pool"})
    layers.append({"type": "dense", "name": "dense", "in": in_channels, "out": spec.num_classes})
    return layers


def parameter_shapes(spec: ArchitectureSpec) -> Dict[str, tuple]:
    shapes: Dict[str, tuple] = {}
    for layer in build_layers(spec):
        if layer["type"] == "conv3x3":
            shapes[f"{layer['name']}.weight"] = (layer["out"], layer["in"], 3, 3)
            shapes[f"{layer['name']}.bias"] = (layer["out"],)
        elif layer["type"] == "dense":
            shapes[f"{layer['name']}.weight"] = (layer["in"], layer["out"])
            shapes[f"{layer['name']}.bias"] = (layer["out"],)
    return shapes


@dataclass
class TinyCnn:
    spec: ArchitectureSpec
    parameters: Dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def initialize(cls, spec: ArchitectureSpec, seed: int) -> "TinyCnn":
        """He-normal weights, zero biases, one random stream per parameter."""
        parameters: Dict[str, Tensor] = {}
        for index, (name, shape) in enumerate(parameter_shapes(spec).items()):
            if name.endswith(".bias"):
                values = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
                values = rng_for(seed, 101, index).normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
            parameters[name] = Tensor(values, requires_grad=True, name=name)
        return cls(spec=spec, parameters=parameters)

    @property
    def layers(self) -> List[dict]:
        return build_layers(self.spec)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters.values())

    def frozen(self) -> "TinyCnn":
        """A view over the same parameter arrays that never records parameter gradients."""
        return TinyCnn(spec=self.spec, parameters={name: Tensor(p.data, name=name) for name, p in self.parameters.items()})

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = parameter_shapes(self.spec)
        if set(state) != set(expected):
            raise ShapeError(f"Parameter names do not match the architecture: {sorted(set(state) ^ set(expected))}")
        for name, shape in expected.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != shape:
                raise ShapeError(f"Parameter {name} has shape {values.shape}, expected {shape}")
            self.parameters[name].data = values.copy()

    def zero_parameters(self) -> None:
        for p in self.parameters.values():
            p.data = np.zeros_like(p.data)


def forward(model: TinyCnn, images: Union[np.ndarray, Tensor]) -> Tensor:
    """
    Compute logits of shape (B, K) for pixel images of shape (B, 3, 32, 32)
    with values in [0, 1]. Per-channel normalization happens inside.
    """
    x = images if isinstance(images, Tensor) else Tensor(images)
    size = model.spec.image_size
    if x.data.ndim != 4 or x.shape[1:] != (3, size, size):
        raise ShapeError(f"Expected input of shape (B, 3, {size}, {size}), got {x.shape}")

    mean = np.asarray(model.spec.input_mean).reshape(1, 3, 1, 1)
    inv_std = 1.0 / np.asarray(model.spec.input_std).reshape(1, 3, 1, 1)
    x = (x - mean) * inv_std

    params = model.parameters
    for layer in model.layers:
        kind = layer["type"]
        if kind == "conv3x3":
            x = conv2d(x, params[f"{layer['name']}.weight"], params[f"{layer['name']}.bias"])
        elif kind == "relu":
            x = relu(x)
        elif kind == "downsample":
            x = avg_pool2(x)
        elif kind == "global_avg_pool":
            x = global_avg_pool(x)
        elif kind == "dense":
            x = linear(x, params[f"{layer['name']}.weight"], params[f"{layer['name']}.bias"])
    return x.assert_finite("logits")


def as_target_distribution(labels: np.ndarray, num_classes: int, batch_size: int) -> np.ndarray:
    """Turn hard labels (B,) or soft labels (B, K) into a (B, K) target matrix."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        if labels.shape[0] != batch_size:
            raise ShapeError(f"Got {labels.shape[0]} labels for a batch of {batch_size}")
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ShapeError(f"Label index out of range for {num_classes} classes")
        targets = np.zeros((batch_size, num_classes))
        targets[np.arange(batch_size), labels.astype(np.int64)] = 1.0
        return targets
    if labels.shape != (batch_size, num_classes):
        raise ShapeError(f"Soft labels must have shape {(batch_size, num_classes)}, got {labels.shape}")
    return labels.astype(np.float64)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -sum_k q_k log softmax_k(logits)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"Logits must be (B, K), got {logits.shape}")
    batch_size, num_classes = logits.shape
    targets = as_target_distribution(labels, num_classes, batch_size)
    return -((log_softmax(logits) * targets).sum(axis=1).mean())


def backward(loss: Tensor, model: TinyCnn) -> Dict[str, np.ndarray]:
    """Run reverse mode from a scalar loss; every parameter receives a gradient."""
    for param in model.parameters.values():
        param.grad = None
    loss.backward()
    return {
        name: param.grad.copy() if param.grad is not None else np.zeros_like(param.data)
        for name, param in model.parameters.items()
    }


@dataclass(frozen=True)
class SgdSchedule:
    lr0: float
    total_steps: int
    momentum: float = 0.9

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be a positive integer")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def lr(self, t: int) -> float:
        if not 0 <= t <= self.total_steps:
            raise ValueError(f"Step {t} outside [0, {self.total_steps}]")
        return self.lr0 * 0.5 * (1.0 + math.cos(math.pi * t / self.total_steps))


class MomentumSgd:
    """Heavy-ball SGD: v <- momentum * v + g, p <- p - lr(t) * v."""

    def __init__(self, schedule: SgdSchedule, weight_decay: float = 0.0):
        self.schedule = schedule
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, model: TinyCnn, gradients: Dict[str, np.ndarray], t: int) -> float:
        lr = self.schedule.lr(t)
        for name, param in model.parameters.items():
            grad = gradients[name]
            if self.weight_decay:
                grad = grad + self.weight_decay * param.data
            previous = self.velocity.get(name)
            velocity = grad.copy() if previous is None else self.schedule.momentum * previous + grad
            self.velocity[name] = velocity
            param.data = param.data - lr * velocity
        return lr
