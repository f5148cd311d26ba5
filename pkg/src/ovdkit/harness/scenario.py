"""Synthetic open-vocabulary scenes.

Seeds are split per stage and per image as
``np.random.default_rng([seed, stage, image_index])`` so that any image
can be regenerated on its own and stages never share a stream.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np

from ..dataset import Dataset, ImageRecord, ObjectRecord
from ..foreground import WeibullParams, sample
from ..geometry import Box, iou
from ..roqis import WILDCARD_LABEL, EmbeddingTable

# Stage tags for seed splitting.
STAGE_PROTOTYPES = 0
STAGE_IMAGES = 1
STAGE_PROPOSALS = 2
STAGE_STUB = 3
STAGE_DENOISE = 4
STAGE_ORACLE = 5


def stage_rng(seed: int, stage: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stage, index])


@dataclass(frozen=True)
class StubFidelity:
    """Calibration of the detector stub.

    ``correct_mean`` is the mean match probability when a query's condition
    agrees with the object under it (the wildcard agrees with any object);
    ``wrong_mean`` covers every other case.  ``concentration`` is the Beta
    concentration; ``None`` makes the stub output the means exactly.
    """

    box_jitter: float = 0.01
    correct_mean: float = 0.85
    wrong_mean: float = 0.15
    concentration: float | None = 20.0
    fg_iou: float = 0.5

    def __post_init__(self):
        if self.box_jitter < 0:
            raise ValueError("box_jitter must be >= 0")
        for name in ("correct_mean", "wrong_mean", "fg_iou"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.concentration is not None and self.concentration <= 0:
            raise ValueError("concentration must be > 0")


@dataclass(frozen=True)
class ScenarioConfig:
    images: int = 200
    base_categories: int = 10
    novel_categories: int = 5
    min_objects: int = 1
    max_objects: int = 8
    embed_dim: int = 32
    embed_noise: float = 0.1
    background_per_image: int = 6
    proposals_per_image: int = 24
    fg_weibull: tuple[float, float] = (3.0, 2.0)
    bg_weibull: tuple[float, float] = (1.0, 1.0)
    base_objectness: tuple[float, float] = (0.6, 0.95)
    novel_objectness: tuple[float, float] = (0.15, 0.6)
    background_objectness: tuple[float, float] = (0.1, 0.75)
    proposal_jitter: float = 0.03
    stub: StubFidelity = field(default_factory=StubFidelity)
    seed: int = 0

    def __post_init__(self):
        if self.base_categories < 1 or self.novel_categories < 0:
            raise ValueError("invalid split: need at least one base category")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.embed_dim < self.base_categories + self.novel_categories:
            raise ValueError("embed_dim must be at least the number of categories")
        for name in ("embed_noise", "proposal_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def base_names(self) -> list[str]:
        return [f"base{i:02d}" for i in range(self.base_categories)]

    @property
    def novel_names(self) -> list[str]:
        return [f"novel{i:02d}" for i in range(self.novel_categories)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in known}
        for key in ("fg_weibull", "bg_weibull", "base_objectness", "novel_objectness", "background_objectness"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        if isinstance(kwargs.get("stub"), Mapping):
            kwargs["stub"] = StubFidelity(**kwargs["stub"])
        return cls(**kwargs)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def make_embedding_table(cfg: ScenarioConfig) -> EmbeddingTable:
    """Orthonormal category prototypes plus a wildcard pointing at their mean."""
    k = cfg.base_categories + cfg.novel_categories
    rng = stage_rng(cfg.seed, STAGE_PROTOTYPES)
    q, _ = np.linalg.qr(rng.normal(size=(cfg.embed_dim, k)))
    protos = q.T
    wildcard = _unit(protos.sum(axis=0))
    labels = tuple(cfg.base_names + cfg.novel_names + [WILDCARD_LABEL])
    return EmbeddingTable(labels, np.vstack([protos, wildcard]))


def noisy_embedding(proto: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    if noise == 0.0:
        return proto.copy()
    return _unit(proto + noise * rng.normal(size=proto.shape) / np.sqrt(proto.size))


def random_unit(dim: int, rng: np.random.Generator) -> np.ndarray:
    return _unit(rng.normal(size=dim))


def _place_box(rng: np.random.Generator, taken: list[Box], max_overlap: float, size=(0.08, 0.3)) -> Box:
    box = None
    for _ in range(50):
        w, h = rng.uniform(*size, 2)
        box = Box(float(rng.uniform(w / 2, 1 - w / 2)), float(rng.uniform(h / 2, 1 - h / 2)), float(w), float(h))
        if all(iou(box, t) <= max_overlap for t in taken):
            return box
    return box


def synth_dataset(cfg: ScenarioConfig) -> tuple[Dataset, EmbeddingTable]:
    """Scenes with base objects annotated and novel objects held out.

    Every object carries a region embedding (its category prototype plus
    spherical noise) and a foreground reconstruction error; background
    regions carry a random embedding and a background error.
    """
    table = make_embedding_table(cfg)
    vocab = cfg.base_names + cfg.novel_names
    fg = WeibullParams(*cfg.fg_weibull)
    bg = WeibullParams(*cfg.bg_weibull)
    images = []
    for idx in range(cfg.images):
        rng = stage_rng(cfg.seed, STAGE_IMAGES, idx)
        count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        boxes: list[Box] = []
        rec = ImageRecord(id=idx)
        fg_eta = sample(fg, count, rng)
        for k in range(count):
            box = _place_box(rng, boxes, 0.3)
            boxes.append(box)
            cat = int(rng.integers(len(vocab)))
            obj = ObjectRecord(
                box,
                vocab[cat],
                float(fg_eta[k]),
                noisy_embedding(table.vectors[cat], cfg.embed_noise, rng).tolist(),
            )
            (rec.gt if cat < cfg.base_categories else rec.novel_heldout).append(obj)
        bg_eta = sample(bg, cfg.background_per_image, rng)
        for k in range(cfg.background_per_image):
            box = _place_box(rng, boxes, 0.1)
            rec.background.append(
                ObjectRecord(box, None, float(bg_eta[k]), random_unit(cfg.embed_dim, rng).tolist())
            )
        images.append(rec)
    return Dataset(cfg.base_names, cfg.novel_names, images), table
