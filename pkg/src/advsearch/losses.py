"""Attack loss functions over logits or softmax probabilities.

Seven ids are supported: CE_P, Hinge_L, Hinge_P, L1_L, L1_P, DLR_L, DLR_P.
Cross-entropy exists only in probability mode because it needs nonnegative
inputs. The _P variants apply softmax to the logits first.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ArgumentError, ConfigError

LOSS_IDS = ("CE_P", "Hinge_L", "Hinge_P", "L1_L", "L1_P", "DLR_L", "DLR_P")

_MASK = -1e30


def _scores(loss_id, logits):
    if loss_id.endswith("_P") or loss_id == "CE_P":
        return T.softmax(logits, axis=-1)
    return logits


def _max_other(z, y):
    """max_{i != y} z_i as a taped value; the true class is masked out."""
    n, k = z.data.shape
    mask = np.zeros((n, k))
    mask[np.arange(n), y] = _MASK
    return T.reduce_max(T.add(z, mask), axis=-1)


def attack_loss(loss_id, logits, y, kappa=0.0):
    """Per-example loss vector [N] for a [N, K] logits tensor.

    Larger values mean the model is closer to being fooled; attacks ascend
    this quantity.
    """
    if loss_id not in LOSS_IDS:
        if loss_id == "CE_L":
            raise ConfigError("CE is only defined in probability mode")
        raise ConfigError(f"unknown loss id: {loss_id!r}")
    logits = T.as_tensor(logits)
    if logits.ndim != 2:
        raise ArgumentError(f"attack_loss: expected [N, K] logits, got {logits.shape}")
    y = np.asarray(y, dtype=np.int64)
    n, k = logits.data.shape

    if loss_id == "CE_P":
        return T.scale(T.take_per_row(T.log_softmax(logits, axis=-1), y), -1.0)

    z = _scores(loss_id, logits)
    z_y = T.take_per_row(z, y)

    if loss_id.startswith("Hinge"):
        # margin clamped from above once the example is fooled by kappa:
        # min(max_other - z_y, kappa). The bottom-clamped transcription
        # max(margin, -kappa) is flat exactly on correctly classified
        # examples, which would make margin-driven attacks no-ops.
        margin = T.sub(_max_other(z, y), z_y)
        neg_min = T.maximum(T.scale(margin, -1.0), np.full(n, -float(kappa)))
        return T.scale(neg_min, -1.0)

    if loss_id.startswith("L1"):
        return T.scale(z_y, -1.0)

    # DLR needs the top-1 and top-3 scores
    if k < 3:
        raise ArgumentError("DLR loss needs at least 3 classes")
    order = np.argsort(-z.data, axis=1)
    z_pi1 = T.take_per_row(z, order[:, 0])
    z_pi3 = T.take_per_row(z, order[:, 2])
    num = T.sub(z_y, _max_other(z, y))
    # guard the denominator without perturbing the generic-case gradient:
    # an additive epsilon leaves a phantom ~1e-12 gradient on rows where the
    # true class ranks exactly third (num == -den, loss locally constant)
    den = T.maximum(T.sub(z_pi1, z_pi3), np.full(n, 1e-12))
    return T.scale(T.div(num, den), -1.0)


def cw_margin_loss(logits, y, kappa=0.0):
    """Logit-margin loss max(max_{i!=y} Z_i - Z_y, -kappa) used by the CW step."""
    return attack_loss("Hinge_L", logits, y, kappa=kappa)


def cross_entropy_mean(logits, y):
    """Mean cross-entropy training loss."""
    return T.reduce_mean(attack_loss("CE_P", logits, y))
