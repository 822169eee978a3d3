"""Per-branch L2 loss, the pairwise difference loss, and their sum.

All functions work on normalised angles. Inputs may be a single ``(3,)``
triple or a batch ``(n, 3)``; losses are summed over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LossBreakdown:
    l_cnn_1: float
    l_cnn_2: float
    l_siam: float
    total: float


def l2_loss(prediction, target):
    """sum ||y - f||^2 and its gradient 2 (f - y)."""
    f = np.asarray(prediction)
    y = np.asarray(target)
    r = f - y
    return float(np.sum(r * r)), 2.0 * r


def siamese_loss(f1, f2, y1, y2):
    """Squared distance between the prediction difference and the label difference.

    Returns ``(loss, d_f1, d_f2)`` with ``d_f2 == -d_f1``.
    """
    r = (np.asarray(f1) - np.asarray(f2)) - (np.asarray(y1) - np.asarray(y2))
    d_f1 = 2.0 * r
    return float(np.sum(r * r)), d_f1, -d_f1


def combined_loss(f1, f2, y1, y2, weights=(1.0, 1.0, 1.0)):
    """Both branch losses plus the pair loss.

    Returns ``(LossBreakdown, d_f1, d_f2)``. ``weights`` scales the three
    terms (branch 1, branch 2, pair); the default is a plain sum.
    """
    w1, w2, ws = weights
    l1, g1 = l2_loss(f1, y1)
    l2, g2 = l2_loss(f2, y2)
    ls, s1, s2 = siamese_loss(f1, f2, y1, y2)
    l1, l2, ls = w1 * l1, w2 * l2, ws * ls
    breakdown = LossBreakdown(l1, l2, ls, l1 + l2 + ls)
    return breakdown, w1 * g1 + ws * s1, w2 * g2 + ws * s2
