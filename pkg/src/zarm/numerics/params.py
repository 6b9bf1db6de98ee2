"""Named parameter registry and initialisers."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered mapping from dotted path to trainable leaf tensor.

    Registration order is the initialisation order, so a seeded generator
    yields bitwise-identical parameters across runs.
    """

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self._tensors: dict[str, Tensor] = {}

    def __contains__(self, path: str) -> bool:
        return path in self._tensors

    def __getitem__(self, path: str) -> Tensor:
        return self._tensors[path]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def paths(self) -> list[str]:
        return list(self._tensors)

    def add(self, path: str, value: np.ndarray) -> Tensor:
        if path in self._tensors:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=path)
        self._tensors[path] = t
        return t

    # initialisers -------------------------------------------------------

    def glorot(self, path: str, shape: tuple[int, ...]) -> Tensor:
        fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (1, shape[0])
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self.add(path, self.rng.uniform(-limit, limit, size=shape))

    def zeros(self, path: str, shape: tuple[int, ...]) -> Tensor:
        return self.add(path, np.zeros(shape))

    def normal(self, path: str, shape: tuple[int, ...], std: float = 0.01) -> Tensor:
        return self.add(path, self.rng.normal(0.0, std, size=shape))

    # bulk operations ----------------------------------------------------

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def astype(self, dtype) -> None:
        self.dtype = np.dtype(dtype)
        for t in self._tensors.values():
            t.astype(self.dtype)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self._tensors[k].data = v.astype(self.dtype, copy=True)

    def num_scalars(self) -> int:
        return int(sum(t.data.size for t in self._tensors.values()))

    def inventory(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, t.shape) for k, t in self._tensors.items()]
