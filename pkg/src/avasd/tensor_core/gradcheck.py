"""Finite-difference gradient checker for the layer primitives."""

import numpy as np


def grad_check(loss_fn, params, eps=1e-5):
    """Compare analytic gradients against central finite differences.

    `loss_fn()` must be a deterministic closure returning the scalar loss,
    and `params[i].grad` must already hold the analytic gradients for the
    current parameter values (run forward+backward once before calling).
    Returns the max relative error over every coordinate of every
    parameter, with denominator max(|analytic|, |numeric|, 1e-8).

    Only sensible on small tensors at float64: cost is two forward passes
    per coordinate.
    """
    # snapshot up front: calling loss_fn may overwrite or accumulate grads
    snapshots = [p.grad.copy() for p in params]
    worst = 0.0
    for p, analytic in zip(params, snapshots):
        flat_value = p.value.reshape(-1)
        flat_analytic = analytic.reshape(-1)
        for i in range(flat_value.size):
            orig = flat_value[i]
            h = eps * max(1.0, abs(orig))
            flat_value[i] = orig + h
            loss_plus = loss_fn()
            flat_value[i] = orig - h
            loss_minus = loss_fn()
            flat_value[i] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            denom = max(abs(flat_analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(flat_analytic[i] - numeric) / denom)
    return worst


def numeric_grad(loss_fn, arr, eps=1e-5):
    """Central-difference gradient of loss_fn w.r.t. every entry of arr."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = eps * max(1.0, abs(orig))
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2.0 * h)
    return out
