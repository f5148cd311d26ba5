"""Iterative open-world pseudo-labeling.

Each iteration asks a proposal source for class-agnostic boxes, drops the
ones that duplicate annotations or fail the heuristic filters, scores the
survivors with the foreground estimator and appends them to the
annotation store as unknown objects.  Accepted pseudo labels are never
revisited; later iterations can only add.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from typing import Callable, Hashable, Mapping, Protocol, Sequence

import numpy as np

from . import jsonio
from .dataset import Dataset
from .evalkit import recall_at_iou
from .foreground import ForegroundEstimator
from .geometry import Box, iou, max_iou
from .matcher import UnknownObject

Proposal = tuple[Box, float]
EtaProvider = Callable[[Hashable, Box], "float | None"]


@dataclass(frozen=True)
class FilterConfig:
    max_iou_vs_gt: float = 0.5
    min_quality: float = 0.3
    min_area: float = 0.001
    max_area: float = 0.9
    dedup_iou: float = 0.7
    per_image_cap: int = 30

    def __post_init__(self):
        for name in ("max_iou_vs_gt", "min_quality", "min_area", "max_area", "dedup_iou"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if not self.min_area < self.max_area:
            raise ValueError("min_area must be smaller than max_area")
        if self.per_image_cap < 0:
            raise ValueError("per_image_cap must be >= 0")

    @classmethod
    def from_dict(cls, d: Mapping) -> "FilterConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def admits(self, box: Box, s: float, gt: Sequence[Box]) -> bool:
        """Per-proposal predicates (everything except dedup and the cap)."""
        return (
            s >= self.min_quality
            and self.min_area <= box.area <= self.max_area
            and max_iou(box, gt) <= self.max_iou_vs_gt
        )


def filter_proposals(proposals: Sequence[Proposal], gt: Sequence[Box], cfg: FilterConfig) -> list[Proposal]:
    """Drop GT-overlapping, low-quality and out-of-range proposals, then
    greedily keep the best-scoring member of each near-duplicate cluster."""
    kept = [(b, s) for b, s in proposals if cfg.admits(b, s, gt)]
    order = sorted(range(len(kept)), key=lambda i: (-kept[i][1], i))
    out: list[Proposal] = []
    for i in order:
        box = kept[i][0]
        if any(iou(box, other) > cfg.dedup_iou for other, _ in out):
            continue
        out.append(kept[i])
        if len(out) >= cfg.per_image_cap:
            break
    return out


class ProposalSource(Protocol):
    def proposals(self, image_id: Hashable, iteration: int) -> list[Proposal]: ...


class FileProposalSource:
    """Proposals read from ``{"images": [{"id", "proposals": [{"box", "s", "eta"?}]}]}``.

    The same proposals are served on every iteration.  When entries carry
    ``eta`` the source doubles as an eta provider.
    """

    def __init__(self, doc: Mapping):
        self._props: dict = {}
        self._eta: dict = {}
        for img in doc.get("images", []):
            entries = []
            for p in img.get("proposals", []):
                box = Box.from_array(p["box"])
                entries.append((box, float(p["s"])))
                if p.get("eta") is not None:
                    self._eta[(img["id"], box)] = float(p["eta"])
            self._props[img["id"]] = entries

    @classmethod
    def load(cls, path) -> "FileProposalSource":
        return cls(jsonio.load(path))

    def proposals(self, image_id, iteration):
        return list(self._props.get(image_id, ()))

    def eta(self, image_id, box):
        return self._eta.get((image_id, box))


class OracleProposalSource:
    """Synthetic stand-in for a retrained open-world detector.

    Each held-out novel object is first emitted at some iteration with
    probability ``emit_prob`` per iteration and is re-emitted on every
    later iteration, so each iteration's output is a superset of the
    previous one.  Base objects and the dataset's background regions are
    emitted on every iteration as distractors.  ``quality_gain`` raises
    the localization quality of object proposals per iteration to mimic
    detector retraining.
    """

    def __init__(
        self,
        dataset: Dataset,
        emit_prob: float = 0.6,
        jitter: float = 0.03,
        quality_gain: float = 0.0,
        seed: int = 0,
    ):
        if not 0.0 <= emit_prob <= 1.0:
            raise ValueError("emit_prob must lie in [0, 1]")
        self.emit_prob = emit_prob
        self.quality_gain = quality_gain
        self.seed = seed
        self._images: dict = {}
        self._eta: dict = {}
        for idx, img in enumerate(dataset.images):
            rng = np.random.default_rng([seed, 101, idx])
            novel, distractors = [], []
            for o in img.novel_heldout:
                box = _jittered(o.box, jitter, rng)
                novel.append((box, float(rng.uniform(0.5, 0.95))))
                self._remember(img.id, box, o.eta)
            for o in img.gt:
                box = _jittered(o.box, jitter, rng)
                distractors.append((box, float(rng.uniform(0.5, 0.95))))
                self._remember(img.id, box, o.eta)
            for o in img.background:
                distractors.append((o.box, float(rng.uniform(0.05, 0.6))))
                self._remember(img.id, o.box, o.eta)
            self._images[img.id] = (idx, novel, distractors)

    def _remember(self, image_id, box, eta):
        if eta is not None:
            self._eta[(image_id, box)] = float(eta)

    def _emitted(self, idx: int, k: int, iteration: int) -> bool:
        for t in range(iteration + 1):
            if np.random.default_rng([self.seed, 102, idx, k, t]).uniform() < self.emit_prob:
                return True
        return False

    def proposals(self, image_id, iteration):
        if image_id not in self._images:
            return []
        idx, novel, distractors = self._images[image_id]
        gain = self.quality_gain * iteration
        out = [(b, min(1.0, s + gain)) for k, (b, s) in enumerate(novel) if self._emitted(idx, k, iteration)]
        out.extend((b, min(1.0, s + gain)) for b, s in distractors)
        return out

    def eta(self, image_id, box):
        return self._eta.get((image_id, box))


def _jittered(box: Box, sigma: float, rng: np.random.Generator) -> Box:
    noise = rng.normal(0.0, sigma, 4) * np.array([box.w, box.h, box.w, box.h])
    return Box.clamped(*(box.to_array() + noise))


@dataclass
class ImageAnnotations:
    gt: list[tuple[Box, str]] = field(default_factory=list)
    pseudo: list[UnknownObject] = field(default_factory=list)


@dataclass
class AnnotationStore:
    images: dict[Hashable, ImageAnnotations]
    iteration: int = 0
    history: list[int] = field(default_factory=list)

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "AnnotationStore":
        return cls({img.id: ImageAnnotations([(o.box, o.category) for o in img.gt]) for img in dataset.images})

    def copy(self) -> "AnnotationStore":
        return copy.deepcopy(self)

    def pseudo_boxes(self) -> dict[Hashable, list[Box]]:
        return {k: [u.o for u in v.pseudo] for k, v in self.images.items()}

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "history": list(self.history),
            "images": [
                {"id": k, "unknowns": [u.to_dict() for u in v.pseudo]} for k, v in self.images.items()
            ],
        }

    def load_pseudo(self, doc: Mapping) -> None:
        """Attach pseudo labels from a document produced by :meth:`to_dict`."""
        for img in doc.get("images", []):
            self.images.setdefault(img["id"], ImageAnnotations()).pseudo = [
                UnknownObject.from_dict(u) for u in img.get("unknowns", [])
            ]
        self.iteration = int(doc.get("iteration", 0))
        self.history = list(doc.get("history", [0] * self.iteration))


def run_iteration(
    store: AnnotationStore,
    src: ProposalSource,
    fe: ForegroundEstimator,
    eta_provider: EtaProvider,
    cfg: FilterConfig = FilterConfig(),
) -> AnnotationStore:
    """One propose/filter/score/merge round; returns a new store."""
    out = store.copy()
    added = 0
    for image_id, ann in out.images.items():
        gt = [b for b, _ in ann.gt]
        room = cfg.per_image_cap - len(ann.pseudo)
        if room <= 0:
            continue
        candidates = filter_proposals(src.proposals(image_id, store.iteration), gt, cfg)
        fresh = []
        for box, s in candidates:
            if any(iou(box, u.o) > cfg.dedup_iou for u in ann.pseudo):
                continue
            eta = eta_provider(image_id, box)
            if eta is None:
                raise KeyError(f"missing reconstruction error for image {image_id!r}, box {box.to_list()}")
            fresh.append(UnknownObject(box, s, float(fe.score(eta))))
            if len(fresh) >= room:
                break
        ann.pseudo.extend(fresh)
        added += len(fresh)
    out.iteration += 1
    out.history.append(added)
    return out


def novel_recall(store: AnnotationStore, dataset: Dataset, iou_thr: float = 0.5) -> float:
    """Recall of held-out novel objects by GT plus pseudo boxes."""
    boxes = {img_id: [b for b, _ in ann.gt] + [u.o for u in ann.pseudo] for img_id, ann in store.images.items()}
    heldout = {img.id: [o.box for o in img.novel_heldout] for img in dataset.images}
    return recall_at_iou(boxes, heldout, iou_thr)


def run_pipeline(
    dataset: Dataset,
    src: ProposalSource,
    iterations: int,
    cfg: FilterConfig,
    fe: ForegroundEstimator,
    eta_provider: EtaProvider,
) -> tuple[AnnotationStore, list[float]]:
    """Chain ``iterations`` rounds, logging novel AR50 before the first and after each."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    store = AnnotationStore.from_dataset(dataset)
    log = [novel_recall(store, dataset)]
    for _ in range(iterations):
        store = run_iteration(store, src, fe, eta_provider, cfg)
        log.append(novel_recall(store, dataset))
    return store, log
