"""Deterministic stand-in for the frozen-backbone DETR decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..geometry import Box, iou
from ..matcher import QueryAssignment
from .scenario import StubFidelity


@dataclass(frozen=True)
class SceneObject:
    box: Box
    category: int


@dataclass
class DetectorStub:
    fidelity: StubFidelity = field(default_factory=StubFidelity)
    seed: int | list[int] | None = 0

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def draw_match(self, mean: float) -> float:
        kappa = self.fidelity.concentration
        if kappa is None or mean <= 0.0 or mean >= 1.0:
            return float(mean)
        return float(self.rng.beta(mean * kappa, (1.0 - mean) * kappa))


def nearest_object(box: Box, scene: Sequence[SceneObject]) -> tuple[int, float]:
    """Index and IoU of the scene object overlapping ``box`` the most (-1 if none)."""
    best, best_iou = -1, 0.0
    for k, obj in enumerate(scene):
        v = iou(box, obj.box)
        if v > best_iou:
            best, best_iou = k, v
    return best, best_iou


def stub_predict(
    assignments: Sequence[QueryAssignment],
    scene: Sequence[SceneObject],
    stub: DetectorStub,
) -> list[tuple[float, Box]]:
    """Refine each conditioned query into ``(match probability, box)``.

    A query whose proposal overlaps a scene object by at least
    ``fidelity.fg_iou`` regresses onto that object's box (plus Gaussian
    jitter) and draws a high match probability if its condition fits the
    object; background queries keep their proposal and draw low.
    """
    fid = stub.fidelity
    out = []
    for a in assignments:
        k, overlap = nearest_object(a.proposal, scene)
        if k >= 0 and overlap >= fid.fg_iou:
            obj = scene[k]
            base_box = obj.box
            correct = a.is_wildcard or a.condition == obj.category
        else:
            base_box = a.proposal
            correct = False
        m_hat = stub.draw_match(fid.correct_mean if correct else fid.wrong_mean)
        if fid.box_jitter > 0:
            b_hat = Box.clamped(*(base_box.to_array() + stub.rng.normal(0.0, fid.box_jitter, 4)))
        else:
            b_hat = base_box
        out.append((m_hat, b_hat))
    return out
