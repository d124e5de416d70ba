"""Small dense tensor type with reverse-mode automatic differentiation.

Storage is a float64 numpy array. Every op records a closure that maps the
output gradient to input gradients; :meth:`Tensor.backward` walks the graph
in reverse topological order. Broadcasting is deliberately limited to the
bias-add ops the models need.
"""

from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import MisuseError, NonFiniteError

# Finite checks after every op are expensive-ish; construction from user data
# is always checked.
DEBUG = os.environ.get("FEDRDN_DEBUG", "") not in ("", "0")


def set_debug(enabled: bool) -> None:
    global DEBUG
    DEBUG = bool(enabled)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if _backward is None:
            _check_finite(arr, "tensor construction")
            arr = np.array(arr, dtype=np.float64, copy=True)
        elif DEBUG:
            _check_finite(arr, f"output of {op}")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise MisuseError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise MisuseError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # arithmetic sugar
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other) -> Tensor:
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __sub__(self, other) -> Tensor:
        return add(self, mul(_as_tensor(other), Tensor(-1.0)))

    def __neg__(self) -> Tensor:
        return mul(self, Tensor(-1.0))

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, exponent)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    return Tensor(data, requires_grad=any(p.requires_grad for p in parents),
                  _parents=parents, _backward=backward, op=op)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and b.data.size != 1:
        raise MisuseError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    scalar_b = a.shape != b.shape

    def backward(g):
        return g, (np.sum(g).reshape(b.shape) if scalar_b else g)

    return _node(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    scalar_b = a.shape != b.shape

    def backward(g):
        gb = g * a.data
        return g * b.data, (np.sum(gb).reshape(b.shape) if scalar_b else gb)

    return _node(a.data * b.data, (a, b), backward, "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _node(a.data ** exponent, (a,), backward, "pow")


def tsum(a: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.sum(a.data), (a,), backward, "sum")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise MisuseError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def add_row_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[B, N] + bias[N]."""
    if x.data.ndim != 2 or bias.shape != (x.shape[1],):
        raise MisuseError(f"add_row_bias: shapes {x.shape} and {bias.shape}")

    def backward(g):
        return g, g.sum(axis=0)

    return _node(x.data + bias.data, (x, bias), backward, "add_row_bias")


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[B, C, H, W] + bias[C]."""
    if x.data.ndim != 4 or bias.shape != (x.shape[1],):
        raise MisuseError(f"add_channel_bias: shapes {x.shape} and {bias.shape}")

    def backward(g):
        return g, g.sum(axis=(0, 2, 3))

    return _node(x.data + bias.data[None, :, None, None], (x, bias), backward, "add_channel_bias")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _node(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _node(out, (x,), backward, "tanh")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return _node(x.data.reshape(shape), (x,), backward, "reshape")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, C*k*k) patches for a stride-1 'same' window."""
    B, C, H, W = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return sliding_window_view(xp, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * k * k)


def conv2d(x: Tensor, weight: Tensor) -> Tensor:
    """Stride-1 'same' convolution (cross-correlation); odd square kernels only."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise MisuseError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, k, k2 = weight.shape
    if Cw != C or k != k2 or k % 2 == 0:
        raise MisuseError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    cols = _im2col(x.data, k)
    wmat = weight.data.reshape(O, C * k * k)
    out = (cols @ wmat.T).reshape(B, H, W, O).transpose(0, 3, 1, 2)

    def backward(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(B * H * W, O)
        gw = (gflat.T @ cols).reshape(weight.shape)
        if not x.requires_grad:
            return None, gw
        # input gradient = 'same' correlation of g with the spatially flipped,
        # channel-transposed kernel
        wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, O * k * k)
        gx = (_im2col(g, k) @ wflip.T).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(gx), gw

    return _node(np.ascontiguousarray(out), (x, weight), backward, "conv2d")


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling. Trailing rows/cols that do not fill a window are dropped.

    On ties the gradient goes to the first maximal element of the window.
    """
    B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    if Ho == 0 or Wo == 0:
        raise MisuseError(f"maxpool2d: input {x.shape} smaller than window {size}")
    xc = x.data[:, :, :Ho * size, :Wo * size]
    win = xc.reshape(B, C, Ho, size, Wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, size * size)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :Ho * size, :Wo * size] = (
            gwin.reshape(B, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * size, Wo * size)
        )
        return (gx,)

    return _node(out, (x,), backward, "maxpool2d")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy over the batch.

    ``targets`` is either an int array of class indices or a [B, N] array of
    (possibly unnormalised) soft target weights.
    """
    B, N = logits.shape
    targets = np.asarray(targets)
    if targets.ndim == 1:
        if targets.shape[0] != B:
            raise MisuseError(f"cross_entropy: {targets.shape[0]} labels for batch of {B}")
        if targets.size and (targets.min() < 0 or targets.max() >= N):
            raise MisuseError(f"cross_entropy: label out of range [0, {N})")
        t = np.zeros((B, N))
        t[np.arange(B), targets.astype(np.int64)] = 1.0
    elif targets.shape == (B, N):
        t = targets.astype(np.float64)
    else:
        raise MisuseError(f"cross_entropy: targets shape {targets.shape} for logits {logits.shape}")
    logp = log_softmax(logits.data)
    loss = -np.sum(t * logp) / B

    def backward(g):
        p = np.exp(logp)
        return (g * (p * t.sum(axis=1, keepdims=True) - t) / B,)

    return _node(np.asarray(loss), (logits,), backward, "cross_entropy")
