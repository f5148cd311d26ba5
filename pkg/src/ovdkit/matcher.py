"""Query conditioning, optimal bipartite assignment and the grouped set losses.

Targets are only ever matched against predictions that share their
condition: unknown objects against wildcard-conditioned queries, base
annotations of category ``c`` against queries conditioned on ``c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box, iou
from .losses import FocalParams, LossWeights, focal_loss, giou_loss, l1_box_loss, pair_cost

WILDCARD = -1


@dataclass(frozen=True)
class UnknownObject:
    """An open-world proposal kept as a pseudo label."""

    o: Box
    s: float
    w: float

    def __post_init__(self):
        if not 0.0 <= self.s <= 1.0:
            raise ValueError(f"localization quality must lie in [0, 1], got {self.s}")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError(f"foreground likelihood must lie in [0, 1], got {self.w}")

    def to_dict(self) -> dict:
        return {"box": self.o.to_list(), "s": self.s, "w": self.w}

    @classmethod
    def from_dict(cls, d: Mapping) -> "UnknownObject":
        return cls(Box.from_array(d["box"]), float(d["s"]), float(d["w"]))


@dataclass(frozen=True)
class QueryAssignment:
    proposal: Box
    condition: int
    query_id: int

    @property
    def is_wildcard(self) -> bool:
        return self.condition == WILDCARD


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    total_cost: float

    def prediction_for(self) -> dict[int, int]:
        return dict(self.pairs)

    def matched_predictions(self) -> set[int]:
        return {j for _, j in self.pairs}


def _argmax_lowest(values: np.ndarray) -> int:
    # np.argmax already returns the first maximal index.
    return int(np.argmax(values))


def assign_queries(
    proposals: Sequence[Box],
    region_feats: Sequence[Sequence[float]] | np.ndarray,
    base_embeds: Sequence[Sequence[float]] | np.ndarray,
    unknowns: Sequence[UnknownObject],
    tau: float = 0.5,
) -> list[QueryAssignment]:
    """Condition each proposal on the wildcard or on its nearest base category.

    A proposal whose IoU with some unknown object is strictly greater than
    ``tau`` becomes a wildcard query.  Every other proposal takes the base
    category with the highest cosine similarity to its region feature.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    feats = np.asarray(region_feats, dtype=float).reshape(len(proposals), -1) if len(proposals) else None
    embeds = np.asarray(base_embeds, dtype=float)
    sims = None
    if embeds.size and feats is not None:
        sims = feats @ embeds.T

    out = []
    for i, box in enumerate(proposals):
        if any(iou(box, u.o) > tau for u in unknowns):
            out.append(QueryAssignment(box, WILDCARD, i))
            continue
        if sims is None:
            raise ValueError("no category vocabulary")
        out.append(QueryAssignment(box, _argmax_lowest(sims[i]), i))
    return out


def hungarian(cost: Sequence[Sequence[float]] | np.ndarray) -> Assignment:
    """Exact minimum-cost assignment of every row to a distinct column.

    Shortest augmenting paths with dual potentials, O(rows^2 * cols).
    Requires ``rows <= cols``.
    """
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2:
        if c.size == 0:
            return Assignment((), 0.0)
        raise ValueError("cost matrix must be two-dimensional")
    n, m = c.shape
    if n == 0:
        return Assignment((), 0.0)
    if n > m:
        raise ValueError(f"over-constrained assignment: {n} rows > {m} columns")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix entries must be finite")

    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    owner = [0] * (m + 1)  # owner[j]: 1-based row matched to column j, 0 = free
    way = [0] * (m + 1)
    rows = c.tolist()

    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = owner[j0]
            row = rows[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - ui0 - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    col_of_row = [0] * n
    for j in range(1, m + 1):
        if owner[j]:
            col_of_row[owner[j] - 1] = j - 1
    pairs = tuple((r, col_of_row[r]) for r in range(n))
    total = math.fsum(rows[r][col] for r, col in pairs)
    return Assignment(pairs, total)


def cost_matrix(
    targets: Sequence[tuple[Box, int]],
    preds: Sequence[tuple[Box, float]],
    w: LossWeights = LossWeights(),
    fp: FocalParams = FocalParams(),
) -> np.ndarray:
    out = np.empty((len(targets), len(preds)))
    for r, (b, label) in enumerate(targets):
        for k, (b_hat, m_hat) in enumerate(preds):
            out[r, k] = pair_cost(label, m_hat, b, b_hat, w, fp)
    return out


def match_group(
    targets: Sequence[tuple[Box, int]],
    preds: Sequence[tuple[Box, float]],
    w: LossWeights = LossWeights(),
    fp: FocalParams = FocalParams(),
) -> Assignment:
    """Optimal pairing between the targets and predictions of one condition group."""
    if not targets:
        return Assignment((), 0.0)
    return hungarian(cost_matrix(targets, preds, w, fp))


def pseudo_loss(
    unknowns: Sequence[UnknownObject],
    preds: Sequence[tuple[Box, float]],
    assignment: Assignment,
    fp: FocalParams = FocalParams(),
) -> float:
    """Match-only loss of the wildcard group.

    Matched predictions are pulled towards 1 with weight ``w_i`` of their
    unknown object; unmatched wildcard predictions are pushed towards 0
    without weighting.  Prediction boxes do not enter the value.
    """
    matched = assignment.prediction_for()
    total = 0.0
    for i, u in enumerate(unknowns):
        total += u.w * focal_loss(preds[matched[i]][1], 1, fp)[0]
    taken = assignment.matched_predictions()
    for j, (_, m_hat) in enumerate(preds):
        if j not in taken:
            total += focal_loss(m_hat, 0, fp)[0]
    return total


def wildcard_loss(
    unknowns: Sequence[UnknownObject],
    preds: Sequence[tuple[Box, float]],
    w: LossWeights = LossWeights(),
    fp: FocalParams = FocalParams(),
) -> tuple[float, Assignment]:
    """Match unknown objects to wildcard predictions, then score the pairing."""
    assignment = match_group([(u.o, 1) for u in unknowns], preds, w, fp)
    return pseudo_loss(unknowns, preds, assignment, fp), assignment


def group_loss(
    targets: Sequence[Box],
    preds: Sequence[tuple[Box, float]],
    w: LossWeights = LossWeights(),
    fp: FocalParams = FocalParams(),
) -> tuple[float, Assignment]:
    """Weighted classification and box loss for one base category."""
    assignment = match_group([(b, 1) for b in targets], preds, w, fp)
    total = 0.0
    for r, k in assignment.pairs:
        b_hat, m_hat = preds[k]
        total += w.class_weight * focal_loss(m_hat, 1, fp)[0]
        total += w.bbox_weight * l1_box_loss(targets[r], b_hat)[0]
        total += w.giou_weight * giou_loss(targets[r], b_hat)[0]
    taken = assignment.matched_predictions()
    for k, (_, m_hat) in enumerate(preds):
        if k not in taken:
            total += w.class_weight * focal_loss(m_hat, 0, fp)[0]
    return total, assignment


def base_loss(
    targets_by_category: Mapping[int, Sequence[Box]],
    preds_by_category: Mapping[int, Sequence[tuple[Box, float]]],
    w: LossWeights = LossWeights(),
    fp: FocalParams = FocalParams(),
) -> float:
    """Sum of per-category group losses under conditional matching."""
    total = 0.0
    for c in sorted(set(targets_by_category) | set(preds_by_category)):
        loss, _ = group_loss(targets_by_category.get(c, ()), preds_by_category.get(c, ()), w, fp)
        total += loss
    return total
