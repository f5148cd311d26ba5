"""The JSON dataset document shared by the pipeline, evaluator and harness.

Layout::

    {
      "categories": {"base": [...names], "novel": [...names]},
      "images": [
        {"id": 0, "width": 640, "height": 480,
         "gt": [{"box": [cx, cy, w, h], "category": "name", ...}],
         "novel_heldout": [{"box": [...], "category": "name", ...}],
         "background": [{"box": [...], ...}]}
      ]
    }

Object entries may carry an ``eta`` reconstruction error and an
``embedding`` region feature.  Category indices follow the vocabulary
order ``base + novel``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from . import jsonio
from .evalkit import GroundTruth
from .geometry import Box


@dataclass
class ObjectRecord:
    box: Box
    category: str | None = None
    eta: float | None = None
    embedding: list[float] | None = None

    def to_dict(self) -> dict:
        d = {"box": self.box.to_list()}
        if self.category is not None:
            d["category"] = self.category
        if self.eta is not None:
            d["eta"] = self.eta
        if self.embedding is not None:
            d["embedding"] = list(self.embedding)
        return d

    @classmethod
    def from_dict(cls, d) -> "ObjectRecord":
        return cls(
            Box.from_array(d["box"]),
            d.get("category"),
            None if d.get("eta") is None else float(d["eta"]),
            None if d.get("embedding") is None else [float(x) for x in d["embedding"]],
        )


@dataclass
class ImageRecord:
    id: int
    width: int = 640
    height: int = 480
    gt: list[ObjectRecord] = field(default_factory=list)
    novel_heldout: list[ObjectRecord] = field(default_factory=list)
    background: list[ObjectRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "width": self.width,
            "height": self.height,
            "gt": [o.to_dict() for o in self.gt],
            "novel_heldout": [o.to_dict() for o in self.novel_heldout],
            "background": [o.to_dict() for o in self.background],
        }

    @classmethod
    def from_dict(cls, d) -> "ImageRecord":
        return cls(
            d["id"],
            int(d.get("width", 640)),
            int(d.get("height", 480)),
            [ObjectRecord.from_dict(o) for o in d.get("gt", [])],
            [ObjectRecord.from_dict(o) for o in d.get("novel_heldout", [])],
            [ObjectRecord.from_dict(o) for o in d.get("background", [])],
        )

    @property
    def objects(self) -> list[ObjectRecord]:
        return self.gt + self.novel_heldout


@dataclass
class Dataset:
    base: list[str]
    novel: list[str]
    images: list[ImageRecord]

    def __post_init__(self):
        overlap = set(self.base) & set(self.novel)
        if overlap:
            raise ValueError(f"invalid split: categories {sorted(overlap)} are both base and novel")

    @property
    def vocabulary(self) -> list[str]:
        return list(self.base) + list(self.novel)

    def category_index(self, name: str) -> int:
        return self.vocabulary.index(name)

    def base_ids(self) -> list[int]:
        return list(range(len(self.base)))

    def novel_ids(self) -> list[int]:
        return list(range(len(self.base), len(self.base) + len(self.novel)))

    def ground_truth(self, include_novel: bool = True) -> list[GroundTruth]:
        vocab = {name: i for i, name in enumerate(self.vocabulary)}
        out = []
        for img in self.images:
            objs: Sequence[ObjectRecord] = img.objects if include_novel else img.gt
            out.extend(GroundTruth(img.id, o.box, vocab[o.category]) for o in objs)
        return out

    def to_dict(self) -> dict:
        return {
            "categories": {"base": list(self.base), "novel": list(self.novel)},
            "images": [img.to_dict() for img in self.images],
        }

    @classmethod
    def from_dict(cls, d) -> "Dataset":
        cats = d.get("categories", {})
        return cls(
            list(cats.get("base", [])),
            list(cats.get("novel", [])),
            [ImageRecord.from_dict(i) for i in d["images"]],
        )

    def save(self, path):
        return jsonio.save(self.to_dict(), path)

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_dict(jsonio.load(path))
