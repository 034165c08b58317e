"""Input gradients and the finite-difference oracle used throughout the tests."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ArgumentError
from .losses import attack_loss


def _apply(model, xt, train=False):
    if hasattr(model, "apply"):
        return model.apply(xt, train=train)
    return model(xt)


def loss_value(model, x, y, loss_id="CE_P", kappa=0.0):
    """Total (summed over examples) loss as a plain float, no tape."""
    logits = _apply(model, T.Tensor(np.asarray(x, dtype=np.float64)))
    return float(attack_loss(loss_id, logits, y, kappa).data.sum())


def grad_input(model, x, y, loss_id="CE_P", kappa=0.0):
    """d(sum of per-example losses)/dx with model parameters left untouched.

    Examples are independent under eval-mode normalization, so row n of the
    result is the gradient of example n's own loss.
    """
    xt = T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    with T.Tape(watch=[xt]) as tape:
        logits = _apply(model, xt)
        total = T.reduce_sum(attack_loss(loss_id, logits, y, kappa))
    tape.backward(total)
    return xt.grad


def finite_diff_gradient(fn, x, h=1e-5):
    """Central-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        hi = fn(x)
        xf[i] = orig - h
        lo = fn(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * h)
    return g


def finite_diff_check(model, x, y, loss_id="CE_P", h=1e-5, kappa=0.0):
    """Max relative error between analytic and central-difference input gradients."""
    if not (0.0 < h <= 1e-2):
        raise ArgumentError(f"finite_diff_check: h must be in (0, 1e-2], got {h}")
    x = np.asarray(x, dtype=np.float64)
    analytic = grad_input(model, x, y, loss_id, kappa)
    numeric = finite_diff_gradient(lambda xv: loss_value(model, xv, y, loss_id, kappa), x, h)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))
