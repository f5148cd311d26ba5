"""Noisy query-box synthesis around unknown objects and its contrastive loss.

For every unknown object ``2N`` boxes are drawn.  Indices ``0..N-1`` are
positives: each coordinate moves by at most half the box extent.  Indices
``N..2N-1`` are negatives: each coordinate moves by between one and two
half-extents.  Negatives may additionally be conditioned on a random base
category instead of the wildcard.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .geometry import Box
from .losses import FocalParams, focal_loss
from .matcher import WILDCARD, UnknownObject

DEFAULT_PAIRS = 3


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def noise_box_array(
    o: Box,
    n: int,
    seed=None,
    noise_scale: float = 1.0,
    random_sign: bool = True,
) -> np.ndarray:
    """``(2n, 4)`` center-size array of perturbed copies of ``o``.

    Every coordinate gets its own scale draw, ``U(0, 1)`` for the first
    ``n`` rows and ``U(1, 2)`` for the rest, times ``(w/2, h/2, w/2, h/2)``
    and an independent random sign.  Sizes are clamped at zero.
    """
    if n < 1:
        raise ValueError(f"need at least one noise pair, got n={n}")
    if o.w <= 0.0 or o.h <= 0.0:
        raise ValueError("degenerate noise source")
    rng = _rng(seed)
    lam = rng.uniform(0.0, 1.0, size=(2 * n, 4))
    lam[n:] += 1.0
    if random_sign:
        lam *= rng.choice((-1.0, 1.0), size=(2 * n, 4))
    offset = np.array([o.w / 2.0, o.h / 2.0, o.w / 2.0, o.h / 2.0])
    out = o.to_array() + noise_scale * lam * offset
    out[:, 2:] = np.clip(out[:, 2:], 0.0, None)
    return out


def synthesize_noise_boxes(o: Box, n: int, seed=None, noise_scale: float = 1.0, random_sign: bool = True) -> list[Box]:
    return [Box(*row) for row in noise_box_array(o, n, seed, noise_scale, random_sign).tolist()]


@dataclass(frozen=True)
class NoiseGroup:
    source: UnknownObject
    boxes: tuple[Box, ...]
    conditions: tuple[int, ...]

    def __post_init__(self):
        if len(self.boxes) != len(self.conditions) or len(self.boxes) % 2:
            raise ValueError("a noise group needs 2N boxes and 2N conditions")

    @property
    def n(self) -> int:
        return len(self.boxes) // 2

    @property
    def polarity(self) -> tuple[int, ...]:
        return tuple(1 if i < self.n else 0 for i in range(len(self.boxes)))

    def to_dict(self) -> dict:
        return {
            "source": self.source.to_dict(),
            "boxes": [b.to_list() for b in self.boxes],
            "conditions": list(self.conditions),
        }

    @classmethod
    def from_dict(cls, d) -> "NoiseGroup":
        return cls(
            UnknownObject.from_dict(d["source"]),
            tuple(Box.from_array(b) for b in d["boxes"]),
            tuple(int(c) for c in d["conditions"]),
        )


def make_noise_group(source: UnknownObject, n: int = DEFAULT_PAIRS, seed=None, **noise) -> NoiseGroup:
    boxes = tuple(synthesize_noise_boxes(source.o, n, seed, **noise))
    return NoiseGroup(source, boxes, (WILDCARD,) * len(boxes))


def label_denoise_queries(group: NoiseGroup, rho: float, base_count: int, seed=None) -> NoiseGroup:
    """Give each negative a random base category with probability ``rho``.

    The corruption decision uses its own ``U(0, 1)`` draw per negative,
    independent of the box noise.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if base_count <= 0 and rho > 0.0:
        raise ValueError("no base vocabulary to corrupt with")
    rng = _rng(seed)
    n = group.n
    draws = rng.uniform(0.0, 1.0, size=n)
    cats = rng.integers(0, max(base_count, 1), size=n)
    conditions = [WILDCARD] * n
    for k in range(n):
        conditions.append(int(cats[k]) if draws[k] < rho else WILDCARD)
    return replace(group, conditions=tuple(conditions))


def pairs_per_object(num_unknowns: int, vanilla_count: int, n: int = DEFAULT_PAIRS) -> int:
    """Largest ``N <= n`` keeping ``2N * num_unknowns`` within the vanilla query budget."""
    if num_unknowns == 0:
        return 0
    return max(0, min(n, vanilla_count // (2 * num_unknowns)))


def isolation_mask(vanilla_count: int, group_sizes: Sequence[int]) -> np.ndarray:
    """Attention allowance over ``[vanilla queries, group 0, group 1, ...]``.

    ``mask[i, j]`` is True when query ``i`` may attend to query ``j``.
    Vanilla queries only see each other; a denoising query sees the
    vanilla queries and its own group.
    """
    if vanilla_count < 0 or any(s < 0 for s in group_sizes):
        raise ValueError("query counts must be >= 0")
    total = vanilla_count + sum(group_sizes)
    mask = np.zeros((total, total), dtype=bool)
    mask[:, :vanilla_count] = True
    start = vanilla_count
    for size in group_sizes:
        mask[start : start + size, start : start + size] = True
        start += size
    return mask


def denoise_loss(
    groups: Sequence[NoiseGroup],
    probs: Sequence[Sequence[float]],
    fp: FocalParams = FocalParams(),
) -> float:
    """Foreground-weighted focal loss of the synthetic queries.

    ``probs[g][i]`` is the match probability of query ``i`` in group ``g``.
    """
    if len(groups) != len(probs):
        raise ValueError("one probability sequence per noise group is required")
    total = 0.0
    for group, group_probs in zip(groups, probs):
        if len(group_probs) != len(group.boxes):
            raise ValueError("one probability per synthetic query is required")
        weight = group.source.w
        for target, p in zip(group.polarity, group_probs):
            total += weight * focal_loss(p, target, fp)[0]
    return total
