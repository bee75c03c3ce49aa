"""Parameter update rules: plain SGD and Adam.

Both operate in place on ``Tensor`` leaves, reading the ``.grad`` populated by
``backward()``. A parameter whose grad is ``None`` (never reached the loss) is
left untouched.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class NaNGradientError(RuntimeError):
    """A parameter received a NaN gradient; training state is unusable."""

    def __init__(self, param: Tensor):
        self.param_name = param.name or "<unnamed>"
        super().__init__(f"NaN gradient for parameter {self.param_name}")


def _checked_grad(p: Tensor) -> np.ndarray | None:
    if p.grad is None:
        return None
    if np.isnan(p.grad).any():
        raise NaNGradientError(p)
    return p.grad


class SGD:
    def __init__(self, params, lr: float):
        self.params = list(params)
        self.lr = float(lr)

    def step(self):
        for p in self.params:
            g = _checked_grad(p)
            if g is None:
                continue
            p.data -= self.lr * g

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with bias correction. Defaults: lr 1e-3, betas (0.9, 0.999), eps 1e-8."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self._m = {id(p): np.zeros_like(p.data) for p in self.params}
        self._v = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = _checked_grad(p)
            if g is None:
                continue
            m = self._m[id(p)]
            v = self._v[id(p)]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
