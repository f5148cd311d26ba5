"""COCO-style box metrics: AP at one IoU threshold, AP averaged over
0.50:0.95, and recall at an IoU threshold, with base/novel grouping."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .geometry import Box, boxes_to_array, iou_matrix

RECALL_POINTS = np.linspace(0.0, 1.0, 101)
COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())


@dataclass(frozen=True)
class DetectionRecord:
    image_id: Hashable
    box: Box
    category: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "box": self.box.to_list(),
            "category": self.category,
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, d) -> "DetectionRecord":
        return cls(d["image_id"], Box.from_array(d["box"]), int(d["category"]), float(d["confidence"]))


@dataclass(frozen=True)
class GroundTruth:
    image_id: Hashable
    box: Box
    category: int


def _cap_per_image(dets: Sequence[DetectionRecord], max_dets: int | None) -> list[tuple[int, DetectionRecord]]:
    indexed = list(enumerate(dets))
    if max_dets is None:
        return indexed
    by_image = defaultdict(list)
    for i, d in indexed:
        by_image[d.image_id].append((i, d))
    kept = []
    for items in by_image.values():
        items.sort(key=lambda t: (-t[1].confidence, t[0]))
        kept.extend(items[:max_dets])
    kept.sort(key=lambda t: t[0])
    return kept


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0 or tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # Precision envelope: best precision at any recall >= r.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(sampled.mean())


def _category_tp(
    dets: list[tuple[int, DetectionRecord]],
    gts: Sequence[GroundTruth],
    iou_thr: float,
) -> np.ndarray:
    gt_by_image = defaultdict(list)
    for g in gts:
        gt_by_image[g.image_id].append(g.box)
    gt_arrays = {k: boxes_to_array(v) for k, v in gt_by_image.items()}
    taken = {k: np.zeros(len(v), dtype=bool) for k, v in gt_by_image.items()}

    order = sorted(dets, key=lambda t: (-t[1].confidence, t[0]))
    tp = np.zeros(len(order))
    for rank, (_, d) in enumerate(order):
        if d.image_id not in gt_arrays:
            continue
        overlaps = iou_matrix(d.box.to_array()[None], gt_arrays[d.image_id])[0]
        overlaps[taken[d.image_id]] = -1.0
        best = int(np.argmax(overlaps))  # first index on ties
        if overlaps[best] >= iou_thr:
            taken[d.image_id][best] = True
            tp[rank] = 1.0
    return tp


def ap_at_iou(
    dets: Sequence[DetectionRecord],
    gts: Sequence[GroundTruth],
    iou_thr: float = 0.5,
    max_dets: int | None = None,
) -> dict[int, float]:
    """101-point interpolated AP for every category that has ground truth.

    Detections are visited by descending confidence (ties by input order);
    each one claims the highest-IoU unclaimed ground truth of its category
    in its image when that IoU reaches ``iou_thr``.
    """
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1], got {iou_thr}")
    kept = _cap_per_image(dets, max_dets)
    dets_by_cat = defaultdict(list)
    for i, d in kept:
        dets_by_cat[d.category].append((i, d))
    gts_by_cat = defaultdict(list)
    for g in gts:
        gts_by_cat[g.category].append(g)
    out = {}
    for c in sorted(gts_by_cat):
        tp = _category_tp(dets_by_cat.get(c, []), gts_by_cat[c], iou_thr)
        out[c] = _interpolated_ap(tp, len(gts_by_cat[c]))
    return out


def _mean(values: Iterable[float]) -> float:
    values = list(values)
    return float(np.mean(values)) if values else 0.0


def map_range(
    dets: Sequence[DetectionRecord],
    gts: Sequence[GroundTruth],
    thresholds: Sequence[float] = COCO_THRESHOLDS,
    max_dets: int | None = None,
) -> float:
    """Mean over thresholds of the category-averaged AP."""
    return _mean(_mean(ap_at_iou(dets, gts, t, max_dets).values()) for t in thresholds)


def recall_at_iou(
    boxes: Mapping[Hashable, Sequence[Box]],
    gts: Mapping[Hashable, Sequence[Box]],
    iou_thr: float = 0.5,
) -> float:
    """Fraction of ground-truth boxes covered one-to-one at ``iou_thr``.

    Within each image, candidate (box, gt) pairs are claimed greedily in
    order of decreasing IoU.
    """
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1], got {iou_thr}")
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return 0.0
    hits = 0
    for image_id, gt_boxes in gts.items():
        cand = boxes.get(image_id, ())
        if not gt_boxes or not cand:
            continue
        overlaps = iou_matrix(boxes_to_array(cand), boxes_to_array(gt_boxes))
        rows, cols = np.nonzero(overlaps >= iou_thr)
        order = np.lexsort((cols, rows, -overlaps[rows, cols]))
        used_box, used_gt = set(), set()
        for k in order:
            r, g = int(rows[k]), int(cols[k])
            if r in used_box or g in used_gt:
                continue
            used_box.add(r)
            used_gt.add(g)
            hits += 1
    return hits / n_gt


@dataclass
class EvalReport:
    per_category_ap50: dict[int, float]
    ap50: dict[str, float]
    map: dict[str, float]
    ar50: dict[str, float]
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_category_ap50": {str(k): v for k, v in sorted(self.per_category_ap50.items())},
            "ap50": dict(self.ap50),
            "map": dict(self.map),
            "ar50": dict(self.ar50),
            "counts": dict(self.counts),
        }

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        return cls(
            {int(k): float(v) for k, v in d["per_category_ap50"].items()},
            dict(d["ap50"]),
            dict(d["map"]),
            dict(d["ar50"]),
            dict(d.get("counts", {})),
        )

    def table(self, names: Mapping[int, str] | None = None) -> str:
        names = names or {}
        lines = [f"{'group':<10}{'AP50':>8}{'mAP':>8}{'AR50':>8}"]
        for group in ("novel", "base", "all"):
            if group in self.ap50:
                lines.append(
                    f"{group:<10}{100 * self.ap50[group]:8.1f}{100 * self.map[group]:8.1f}{100 * self.ar50[group]:8.1f}"
                )
        lines.append("")
        lines.append(f"{'category':<16}{'AP50':>8}")
        for c, ap in sorted(self.per_category_ap50.items()):
            lines.append(f"{names.get(c, str(c)):<16}{100 * ap:8.1f}")
        return "\n".join(lines)


def evaluate(
    dets: Sequence[DetectionRecord],
    gts: Sequence[GroundTruth],
    base: Iterable[int] = (),
    novel: Iterable[int] = (),
    max_dets: int | None = None,
) -> EvalReport:
    """AP50, mAP and AR50 for the novel, base and all-category groups."""
    base, novel = set(base), set(novel)
    groups = {"novel": novel, "base": base, "all": base | novel | {g.category for g in gts}}
    per_thr = {t: ap_at_iou(dets, gts, t, max_dets) for t in COCO_THRESHOLDS}
    ap50 = per_thr[0.5]
    kept = [d for _, d in _cap_per_image(dets, max_dets)]

    report = EvalReport(ap50, {}, {}, {}, {"detections": len(kept), "ground_truth": len(gts)})
    for name, cats in groups.items():
        present = [c for c in sorted(cats) if c in ap50]
        report.ap50[name] = _mean(ap50[c] for c in present)
        report.map[name] = _mean(_mean(per_thr[t][c] for c in present) for t in COCO_THRESHOLDS) if present else 0.0
        gt_boxes = defaultdict(list)
        for g in gts:
            if g.category in cats:
                gt_boxes[g.image_id].append(g.box)
        det_boxes = defaultdict(list)
        for d in kept:
            det_boxes[d.image_id].append(d.box)
        report.ar50[name] = recall_at_iou(det_boxes, gt_boxes, 0.5)
        report.counts[f"gt_{name}"] = sum(len(v) for v in gt_boxes.values())
    return report
