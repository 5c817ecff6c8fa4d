"""SGD with classical momentum and L2 weight decay."""

import numpy as np

from ..errors import NumericError


def sgd_step(params, lr=0.01, momentum=0.9, l2_alpha=0.0):
    """One update over all parameters; gradients are zeroed afterwards.

    v <- momentum*v + (grad + 2*l2_alpha*value); value <- value - lr*v.
    The L2 term realizes the alpha*||w||^2 penalty on the concatenation of
    all parameter values as an extra gradient 2*alpha*w.
    """
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NumericError(f"sgd_step: non-finite gradient in parameter {p.name!r}")
        g = p.grad
        if l2_alpha:
            g = g + 2.0 * l2_alpha * p.value
        p.velocity *= momentum
        p.velocity += g
        p.value -= lr * p.velocity
        p.grad[...] = 0.0
