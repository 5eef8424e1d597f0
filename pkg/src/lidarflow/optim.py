"""Named parameter storage and the ADAM update."""

from __future__ import annotations

import dataclasses
from typing import Dict, Iterator, Optional

import numpy as np

from .errors import OptimizerError
from .tensor import Tensor


@dataclasses.dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


class ParameterStore:
    """Ordered map from hierarchical names to learnable tensors.

    Iteration is always in lexicographic name order. ADAM moment buffers are
    created by the first :func:`adam_step` and dropped by
    :meth:`end_training`.
    """

    def __init__(self):
        self._entries: Dict[str, Tensor] = {}
        self.moment1: Optional[Dict[str, np.ndarray]] = None
        self.moment2: Optional[Dict[str, np.ndarray]] = None
        self.step_count = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._entries))

    def names(self) -> list:
        return sorted(self._entries)

    def items(self):
        return [(k, self._entries[k]) for k in self.names()]

    def values(self):
        return [self._entries[k] for k in self.names()]

    def num_scalars(self) -> int:
        return int(sum(t.data.size for t in self._entries.values()))

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    @property
    def training(self) -> bool:
        return self.moment1 is not None

    def start_training(self) -> None:
        if self.moment1 is None:
            self.moment1 = {k: np.zeros_like(t.data) for k, t in self._entries.items()}
            self.moment2 = {k: np.zeros_like(t.data) for k, t in self._entries.items()}

    def end_training(self) -> None:
        self.moment1 = None
        self.moment2 = None

    def copy(self, dtype=None) -> "ParameterStore":
        """Deep copy, optionally cast (e.g. to float64 for gradient checks)."""
        out = ParameterStore()
        for name, t in self.items():
            data = t.data.astype(dtype or t.data.dtype, copy=True)
            p = Tensor.__new__(Tensor)
            p.data = data
            p.grad = None
            p._parents = ()
            p._backward = None
            out.add(name, p)
        if self.moment1 is not None:
            out.moment1 = {k: v.astype(dtype or v.dtype, copy=True) for k, v in self.moment1.items()}
            out.moment2 = {k: v.astype(dtype or v.dtype, copy=True) for k, v in self.moment2.items()}
        out.step_count = self.step_count
        return out


def adam_step(store: ParameterStore, config: OptimizerConfig) -> None:
    """One bias-corrected ADAM update of every parameter, in place.

    Gradients are read, not cleared.
    """
    for name, p in store.items():
        if p.grad is None:
            raise OptimizerError(f"adam_step: parameter {name!r} has no gradient")
    store.start_training()
    store.step_count += 1
    t = store.step_count
    b1, b2 = config.beta1, config.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in store.items():
        g = p.grad
        m = store.moment1[name]
        v = store.moment2[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        p.data -= (config.lr * m_hat / (np.sqrt(v_hat) + config.epsilon)).astype(p.data.dtype)
