"""Desk-scale classifiers: an MLP and a two-block convnet, as pure functions of parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import MisuseError, NonFiniteError
from .params import ParameterVector


@dataclass(frozen=True)
class MLP:
    widths: tuple[int, ...] = (64,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "tanh"):
            raise MisuseError(f"unknown activation {self.activation!r}")
        if any(w < 1 for w in self.widths):
            raise MisuseError(f"hidden widths must be positive, got {self.widths}")


@dataclass(frozen=True)
class SmallCNN:
    conv_channels: tuple[int, ...] = (8, 16)
    kernel_size: int = 3
    pool: int = 2
    head_width: int = 32

    def __post_init__(self):
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise MisuseError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.pool < 1 or self.head_width < 1 or any(c < 1 for c in self.conv_channels):
            raise MisuseError("pool, head_width and conv channels must be positive")


@dataclass(frozen=True)
class ModelSpec:
    architecture: MLP | SmallCNN
    input_shape: tuple[int, int, int]
    num_classes: int
    _layout: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise MisuseError(f"input_shape must be positive (C, H, W), got {self.input_shape}")
        if self.num_classes < 1:
            raise MisuseError(f"num_classes must be positive, got {self.num_classes}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "_layout", tuple(_layout(self)))

    def param_shapes(self) -> list[tuple[str, tuple[int, ...], int]]:
        """``(name, shape, fan_in)`` for every trainable segment, in canonical order."""
        return list(self._layout)

    @property
    def feature_dim(self) -> int:
        """Width of the penultimate representation."""
        arch = self.architecture
        if isinstance(arch, SmallCNN):
            return arch.head_width
        if arch.widths:
            return arch.widths[-1]
        C, H, W = self.input_shape
        return C * H * W


def _layout(spec: ModelSpec):
    C, H, W = spec.input_shape
    arch = spec.architecture
    if isinstance(arch, MLP):
        prev = C * H * W
        for i, w in enumerate(arch.widths):
            yield f"fc{i}.weight", (prev, w), prev
            yield f"fc{i}.bias", (w,), prev
            prev = w
        yield "out.weight", (prev, spec.num_classes), prev
        yield "out.bias", (spec.num_classes,), prev
        return
    k = arch.kernel_size
    ch = C
    for i, o in enumerate(arch.conv_channels):
        yield f"conv{i}.weight", (o, ch, k, k), ch * k * k
        yield f"conv{i}.bias", (o,), ch * k * k
        ch = o
        H, W = H // arch.pool, W // arch.pool
        if H < 1 or W < 1:
            raise MisuseError(f"input {spec.input_shape} too small for {len(arch.conv_channels)} pooling stages")
    flat = ch * H * W
    yield "head.weight", (flat, arch.head_width), flat
    yield "head.bias", (arch.head_width,), flat
    yield "out.weight", (arch.head_width, spec.num_classes), arch.head_width
    yield "out.bias", (spec.num_classes,), arch.head_width


def init_params(spec: ModelSpec, seed: int) -> ParameterVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every segment, biases included."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1A17]))
    segs = []
    for name, shape, fan_in in spec.param_shapes():
        bound = 1.0 / np.sqrt(fan_in)
        segs.append((name, rng.uniform(-bound, bound, size=shape)))
    return ParameterVector(segs)


def _check(spec: ModelSpec, params: ParameterVector, batch: np.ndarray) -> None:
    expected = [(n, s) for n, s, _ in spec.param_shapes()]
    got = list(zip(params.names, params.shapes))
    if expected != got:
        raise MisuseError(f"parameters {got} do not match model spec {expected}")
    if batch.ndim != 4 or batch.shape[1:] != spec.input_shape:
        raise MisuseError(
            f"batch shape {batch.shape} does not match model input (B, {', '.join(map(str, spec.input_shape))})"
        )


def _graph(spec: ModelSpec, leaves: dict[str, T.Tensor], x: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
    """Build the forward graph; returns (penultimate features, logits)."""
    arch = spec.architecture
    B = x.shape[0]
    if isinstance(arch, MLP):
        h = T.reshape(x, (B, -1))
        act = T.relu if arch.activation == "relu" else T.tanh
        for i in range(len(arch.widths)):
            h = act(T.add_row_bias(T.matmul(h, leaves[f"fc{i}.weight"]), leaves[f"fc{i}.bias"]))
        return h, T.add_row_bias(T.matmul(h, leaves["out.weight"]), leaves["out.bias"])
    h = x
    for i in range(len(arch.conv_channels)):
        h = T.conv2d(h, leaves[f"conv{i}.weight"])
        h = T.relu(T.add_channel_bias(h, leaves[f"conv{i}.bias"]))
        h = T.maxpool2d(h, arch.pool)
    h = T.reshape(h, (B, -1))
    feat = T.relu(T.add_row_bias(T.matmul(h, leaves["head.weight"]), leaves["head.bias"]))
    return feat, T.add_row_bias(T.matmul(feat, leaves["out.weight"]), leaves["out.bias"])


def _leaves(params: ParameterVector, requires_grad: bool) -> dict[str, T.Tensor]:
    return {name: T.Tensor(arr, requires_grad=requires_grad) for name, arr in params}


def _as_array(batch) -> np.ndarray:
    return batch.data if isinstance(batch, T.Tensor) else np.asarray(batch, dtype=np.float64)


def forward(spec: ModelSpec, params: ParameterVector, batch) -> T.Tensor:
    """Logits ``[B, num_classes]`` for a ``[B, C, H, W]`` batch."""
    x = _as_array(batch)
    _check(spec, params, x)
    _, logits = _graph(spec, _leaves(params, False), T.Tensor(x))
    return logits


def features(spec: ModelSpec, params: ParameterVector, batch) -> np.ndarray:
    """Penultimate-layer activations ``[B, feature_dim]``."""
    x = _as_array(batch)
    _check(spec, params, x)
    feat, _ = _graph(spec, _leaves(params, False), T.Tensor(x))
    return feat.data


def loss_and_grad(spec: ModelSpec, params: ParameterVector, batch, labels) -> tuple[float, ParameterVector]:
    """Mean cross-entropy over the batch and its gradient w.r.t. every parameter.

    ``labels`` are class indices, or a ``[B, num_classes]`` soft-target matrix.
    """
    loss, grad, _ = loss_grad_logits(spec, params, batch, labels)
    return loss, grad


def loss_grad_logits(spec: ModelSpec, params: ParameterVector, batch, labels):
    """:func:`loss_and_grad` that also hands back the logits it computed."""
    x = _as_array(batch)
    _check(spec, params, x)
    labels = np.asarray(labels)
    if labels.ndim == 1 and labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise MisuseError(f"label out of range [0, {spec.num_classes}): min={labels.min()}, max={labels.max()}")
    leaves = _leaves(params, True)
    _, logits = _graph(spec, leaves, T.Tensor(x))
    loss = T.cross_entropy(logits, labels)
    loss.backward()
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteError("non-finite loss")
    grads = []
    for name, leaf in leaves.items():
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        grads.append((name, g))
    return value, ParameterVector(grads), logits.data
