"""Adam with per-group learning rates."""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .gradcore import Tensor


class Adam:
    """Adam over named parameter groups.

    ``groups`` maps a group name to ``(params, lr)`` where ``params`` is an
    iterable of tracked tensors.  :meth:`step` can be restricted to a subset
    of groups, which is how parameter freezing is expressed.
    """

    def __init__(self, groups: dict, betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = {}
        for name, (params, lr) in groups.items():
            if lr <= 0:
                raise ParameterError(f"learning rate for group {name!r} must be > 0")
            self.groups[name] = (list(params), float(lr))
        self.beta1, self.beta2 = betas
        self.eps = eps
        self._state: dict[int, list] = {}

    def params(self, groups=None) -> list[Tensor]:
        names = self.groups if groups is None else groups
        return [p for n in names for p in self.groups[n][0]]

    def zero_grad(self, groups=None) -> None:
        for p in self.params(groups):
            p.grad = None

    def step(self, groups=None) -> None:
        names = list(self.groups) if groups is None else list(groups)
        for name in names:
            params, lr = self.groups[name]
            for p in params:
                if p.grad is None:
                    continue
                st = self._state.get(id(p))
                if st is None:
                    st = [0, np.zeros_like(p.data), np.zeros_like(p.data)]
                    self._state[id(p)] = st
                st[0] += 1
                t, m, v = st
                m *= self.beta1
                m += (1 - self.beta1) * p.grad
                v *= self.beta2
                v += (1 - self.beta2) * p.grad * p.grad
                m_hat = m / (1 - self.beta1 ** t)
                v_hat = v / (1 - self.beta2 ** t)
                p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
