"""Flat, named parameter collections and the arithmetic the federation needs."""

from __future__ import annotations

from typing import Iterable, Iterator

import numpy as np

from .errors import MisuseError, NonFiniteError


class ParameterVector:
    """Ordered ``(name, array)`` segments. Immutable: arrays are read-only views.

    Two vectors are *aligned* when names, order and shapes all match; every
    arithmetic helper below requires alignment.
    """

    __slots__ = ("_names", "_arrays")

    def __init__(self, segments: Iterable[tuple[str, np.ndarray]]):
        names: list[str] = []
        arrays: list[np.ndarray] = []
        for name, arr in segments:
            a = np.array(arr, dtype=np.float64, copy=True)
            if not np.all(np.isfinite(a)):
                raise NonFiniteError(f"non-finite value in parameter segment {name!r}")
            a.flags.writeable = False
            names.append(name)
            arrays.append(a)
        if len(set(names)) != len(names):
            raise MisuseError(f"duplicate segment names in {names}")
        self._names = tuple(names)
        self._arrays = tuple(arrays)

    @classmethod
    def _trusted(cls, names: tuple[str, ...], arrays: list[np.ndarray]) -> ParameterVector:
        # internal fast path: arrays are fresh results of arithmetic
        pv = cls.__new__(cls)
        for a in arrays:
            a.flags.writeable = False
        pv._names = names
        pv._arrays = tuple(arrays)
        return pv

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(a.shape for a in self._arrays)

    @property
    def total_len(self) -> int:
        return sum(a.size for a in self._arrays)

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(zip(self._names, self._arrays))

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._arrays[self._names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def arrays(self) -> tuple[np.ndarray, ...]:
        return self._arrays

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([a.reshape(-1) for a in self._arrays])

    def with_flat(self, values: np.ndarray) -> ParameterVector:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.total_len,):
            raise MisuseError(f"flat vector of length {values.shape} for total_len {self.total_len}")
        out, i = [], 0
        for a in self._arrays:
            out.append(values[i:i + a.size].reshape(a.shape).copy())
            i += a.size
        return ParameterVector._trusted(self._names, out)

    def zeros_like(self) -> ParameterVector:
        return ParameterVector._trusted(self._names, [np.zeros_like(a) for a in self._arrays])

    def aligned_with(self, other: ParameterVector) -> bool:
        return self._names == other._names and self.shapes == other.shapes

    def bit_equal(self, other: ParameterVector) -> bool:
        return self.aligned_with(other) and all(
            a.tobytes() == b.tobytes() for a, b in zip(self._arrays, other._arrays)
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return self.aligned_with(other) and all(np.array_equal(a, b) for a, b in zip(self._arrays, other._arrays))

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        segs = ", ".join(f"{n}{list(a.shape)}" for n, a in self)
        return f"ParameterVector({segs})"


def require_aligned(x: ParameterVector, y: ParameterVector, op: str) -> None:
    if not x.aligned_with(y):
        raise MisuseError(
            f"{op}: parameter vectors are not aligned "
            f"({list(zip(x.names, x.shapes))} vs {list(zip(y.names, y.shapes))})"
        )


def param_axpy(a: float, x: ParameterVector, y: ParameterVector) -> ParameterVector:
    """Return ``a * x + y`` segment-wise."""
    require_aligned(x, y, "param_axpy")
    return ParameterVector._trusted(x.names, [a * xs + ys for xs, ys in zip(x.arrays(), y.arrays())])


def param_sub(x: ParameterVector, y: ParameterVector) -> ParameterVector:
    require_aligned(x, y, "param_sub")
    return ParameterVector._trusted(x.names, [xs - ys for xs, ys in zip(x.arrays(), y.arrays())])


def sgd_step(params: ParameterVector, grad: ParameterVector, lr: float, weight_decay: float = 0.0) -> ParameterVector:
    """``params - lr * (grad + weight_decay * params)``."""
    require_aligned(params, grad, "sgd_step")
    if not lr > 0:
        raise MisuseError(f"sgd_step: lr must be > 0, got {lr}")
    if weight_decay < 0:
        raise MisuseError(f"sgd_step: weight_decay must be >= 0, got {weight_decay}")
    if weight_decay == 0:
        out = [p - lr * g for p, g in zip(params.arrays(), grad.arrays())]
    else:
        out = [p - lr * (g + weight_decay * p) for p, g in zip(params.arrays(), grad.arrays())]
    return ParameterVector._trusted(params.names, out)
