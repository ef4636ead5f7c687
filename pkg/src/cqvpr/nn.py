"""Named-parameter container shared by the model components."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autograd import Tensor


class Module:
    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._trainable: set[str] = set()
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray, trainable: bool) -> Tensor:
        t = Tensor(np.ascontiguousarray(value, dtype=np.float64), requires_grad=trainable)
        self._params[name] = t
        if trainable:
            self._trainable.add(name)
        return t

    def add_child(self, name: str, child: "Module") -> "Module":
        self._children[name] = child
        return child

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor, bool]]:
        for name, t in self._params.items():
            yield prefix + name, t, name in self._trainable
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self, trainable_only: bool = False) -> list[Tensor]:
        return [t for _, t, tr in self.named_parameters() if tr or not trainable_only]

    def trainable_state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t, tr in self.named_parameters() if tr}

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t, _ in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = {n: t for n, t, _ in self.named_parameters()}
        for name, value in state.items():
            if name not in params:
                if strict:
                    raise KeyError(f"unknown parameter {name!r}")
                continue
            target = params[name]
            if target.shape != value.shape:
                raise ValueError(f"parameter {name!r}: shape {value.shape} != {target.shape}")
            target.data[...] = value

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def set_dtype(self, dtype) -> None:
        """Cast every parameter in place (float32 for inference, float64 for training)."""
        for t in self.parameters():
            t.data = t.data.astype(dtype)
