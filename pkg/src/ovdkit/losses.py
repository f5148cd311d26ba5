"""Focal, L1 and GIoU losses with analytic gradients, plus the matching cost.

Each loss returns ``(value, gradient)``.  Box gradients are taken with
respect to the *predicted* box in center-size coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box

PROB_EPS = 1e-7


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"focal alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"focal gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class LossWeights:
    class_weight: float = 2.0
    bbox_weight: float = 5.0
    giou_weight: float = 2.0
    denoise_weight: float = 2.0

    def __post_init__(self):
        for name in ("class_weight", "bbox_weight", "giou_weight", "denoise_weight"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")


def focal_loss(p: float, target: int, fp: FocalParams = FocalParams()) -> tuple[float, float]:
    """Binary focal loss of probability ``p`` against a 0/1 target.

    ``p`` is clamped to ``[1e-7, 1 - 1e-7]``; inside the clamped region the
    returned derivative is zero, which is the exact derivative of the
    clamped function.
    """
    clamped = min(max(float(p), PROB_EPS), 1.0 - PROB_EPS)
    alpha, gamma = fp.alpha, fp.gamma
    if target:
        q = 1.0 - clamped
        log_p = math.log(clamped)
        loss = -alpha * q**gamma * log_p
        dq = gamma * q ** (gamma - 1.0) if gamma != 0.0 else 0.0
        grad = alpha * (dq * log_p - q**gamma / clamped)
    else:
        log_q = math.log(1.0 - clamped)
        loss = -(1.0 - alpha) * clamped**gamma * log_q
        dp = gamma * clamped ** (gamma - 1.0) if gamma != 0.0 else 0.0
        grad = -(1.0 - alpha) * (dp * log_q - clamped**gamma / (1.0 - clamped))
    if clamped != p:
        grad = 0.0
    return loss, grad


def l1_box_loss(b: Box, b_hat: Box) -> tuple[float, np.ndarray]:
    diff = b_hat.to_array() - b.to_array()
    return float(np.abs(diff).sum()), np.sign(diff)


# d(x1, y1, x2, y2) / d(cx, cy, w, h)
_CORNER_JACOBIAN = np.array(
    [
        [1.0, 0.0, -0.5, 0.0],
        [0.0, 1.0, 0.0, -0.5],
        [1.0, 0.0, 0.5, 0.0],
        [0.0, 1.0, 0.0, 0.5],
    ]
)


def _min_arg(a: float, b: float) -> tuple[float, bool]:
    # Returns the value and whether the second argument was selected; ties pick the first.
    return (b, True) if b < a else (a, False)


def _max_arg(a: float, b: float) -> tuple[float, bool]:
    return (b, True) if b > a else (a, False)


def giou_loss(b: Box, b_hat: Box) -> tuple[float, np.ndarray]:
    """``1 - giou(b, b_hat)`` and its gradient with respect to ``b_hat``.

    At non-differentiable ties between target and prediction edges the
    subgradient treats ``min``/``max`` as selecting the target edge.
    """
    t1, u1, t2, u2 = b.corners()
    p1, q1, p2, q2 = b_hat.corners()

    ix2, ix2_p = _min_arg(t2, p2)
    ix1, ix1_p = _max_arg(t1, p1)
    iy2, iy2_p = _min_arg(u2, q2)
    iy1, iy1_p = _max_arg(u1, q1)
    iw, ih = ix2 - ix1, iy2 - iy1
    d_inter = np.zeros(4)
    if iw > 0.0 and ih > 0.0:
        inter = iw * ih
        # dI/d(p1, q1, p2, q2)
        d_inter[0] = -ih if ix1_p else 0.0
        d_inter[2] = ih if ix2_p else 0.0
        d_inter[1] = -iw if iy1_p else 0.0
        d_inter[3] = iw if iy2_p else 0.0
    else:
        inter = 0.0

    pw, ph = p2 - p1, q2 - q1
    area_p = pw * ph
    area_t = (t2 - t1) * (u2 - u1)
    d_area_p = np.array([-ph, -pw, ph, pw])
    union = area_t + area_p - inter
    d_union = d_area_p - d_inter

    ex2, ex2_p = _max_arg(t2, p2)
    ex1, ex1_p = _min_arg(t1, p1)
    ey2, ey2_p = _max_arg(u2, q2)
    ey1, ey1_p = _min_arg(u1, q1)
    ew, eh = ex2 - ex1, ey2 - ey1
    enclose = ew * eh
    d_enclose = np.array(
        [
            -eh if ex1_p else 0.0,
            -ew if ey1_p else 0.0,
            eh if ex2_p else 0.0,
            ew if ey2_p else 0.0,
        ]
    )

    if enclose <= 0.0:
        return 1.0, np.zeros(4)
    if union > 0.0:
        overlap = inter / union
        d_overlap = d_inter / union - inter * d_union / union**2
    else:
        overlap, d_overlap = 0.0, np.zeros(4)
    # giou = I/U - 1 + U/E
    value = overlap - (enclose - union) / enclose
    d_giou = d_overlap + d_union / enclose - union * d_enclose / enclose**2
    grad = -(d_giou @ _CORNER_JACOBIAN)
    return 1.0 - value, grad


def pair_cost(
    target_m: int,
    m_hat: float,
    b: Box,
    b_hat: Box,
    w: LossWeights = LossWeights(),
    fp: FocalParams = FocalParams(),
) -> float:
    """Weighted matching cost between one target and one prediction."""
    focal, _ = focal_loss(m_hat, target_m, fp)
    l1, _ = l1_box_loss(b, b_hat)
    g, _ = giou_loss(b, b_hat)
    return w.class_weight * focal + w.bbox_weight * l1 + w.giou_weight * g


def total_loss(pseudo: float, base: float, denoise: float, beta: float) -> float:
    for name, value in (("pseudo", pseudo), ("base", base), ("denoise", denoise), ("beta", beta)):
        if value < 0:
            raise ValueError(f"{name} term must be >= 0, got {value}")
    return pseudo + base + beta * denoise
