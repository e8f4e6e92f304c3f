"""Plain SGD with momentum and coupled weight decay.

Update rule, applied per parameter:

    v <- momentum * v + grad + weight_decay * w
    w <- w - lr * v

Gradients are cleared after the step so the next backward starts fresh.
"""

from __future__ import annotations

from typing import Iterable

from .autograd import MissingGradientError, Parameter


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    params = list(params)
    for p in params:
        if p.tensor.grad is None:
            raise MissingGradientError(
                f"parameter of shape {p.shape} has no gradient; run backward() first"
            )
    for p in params:
        g = p.tensor.grad
        if weight_decay != 0.0:
            g = g + weight_decay * p.tensor.data
        p.momentum *= momentum
        p.momentum += g
        p.tensor.data -= lr * p.momentum
        p.tensor.grad = None
