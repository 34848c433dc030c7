"""ADAM optimizer with decoupled L2 decay and a step-decay learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, Tensor

__all__ = ["Adam", "lr_at_step"]


def lr_at_step(base_lr: float, step: int, decay_steps: tuple[int, ...], factor: float = 0.1) -> float:
    """Learning rate after ``step`` updates: multiplied by ``factor`` at each
    threshold in ``decay_steps`` that has been reached."""
    lr = base_lr
    for boundary in decay_steps:
        if step >= boundary:
            lr *= factor
    return lr


class Adam:
    """Standard ADAM update with bias correction and decoupled L2 decay.

    Moment buffers are float32 or float64 to match each parameter.  The
    decay term is applied directly to the parameter, scaled by the current
    learning rate, independent of the gradient moments.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        decay_steps: tuple[int, ...] = (),
        decay_factor: float = 0.1,
    ):
        self.params = dict(params)
        self.base_lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.decay_steps = tuple(int(s) for s in decay_steps)
        self.decay_factor = float(decay_factor)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    @property
    def lr(self) -> float:
        return lr_at_step(self.base_lr, self.t, self.decay_steps, self.decay_factor)

    def step(self) -> float:
        """Apply one update from the gradients currently stored on the
        parameters.  Returns the learning rate that was used."""
        self.t += 1
        lr = self.lr
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update
        return lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
