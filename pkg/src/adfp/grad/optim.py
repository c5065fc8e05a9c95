from __future__ import annotations

import contextlib

import numpy as np

from .tensor import NonFiniteError, Tensor


class ParameterSet:
    """Named parameters iterated in lexicographic order, plus Adam state."""

    def __init__(self, tensors=None):
        self._tensors: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, tensor) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor, requires_grad=True)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self):
        return iter(self.names())

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self):
        return [(k, self._tensors[k]) for k in self.names()]

    def values(self):
        return [self._tensors[k] for k in self.names()]

    def num_elements(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def requires_grad_(self, flag: bool) -> "ParameterSet":
        for t in self._tensors.values():
            t.requires_grad = flag
        return self

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily exclude the parameters from differentiation."""
        prev = {k: t.requires_grad for k, t in self._tensors.items()}
        self.requires_grad_(False)
        try:
            yield self
        finally:
            for k, t in self._tensors.items():
                t.requires_grad = prev[k]

    def copy(self) -> "ParameterSet":
        out = ParameterSet({k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in self.items()})
        out.m = {k: a.copy() for k, a in self.m.items()}
        out.v = {k: a.copy() for k, a in self.v.items()}
        out.step = self.step
        return out

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet({k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for k, t in self.items()})


def adam_step(params: ParameterSet, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> ParameterSet:
    """One bias-corrected Adam update, in place; missing gradients count as zero."""
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        grads[name] = g
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = params.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            params.v[name] = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * params.v[name] + (1.0 - beta2) * g * g
        params.m[name], params.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return params
