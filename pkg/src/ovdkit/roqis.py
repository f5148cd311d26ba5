"""Region-of-query-interest selection, cosine region classification,
class-aware query construction and inference score fusion."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Box

WILDCARD_LABEL = "wildcard"
UNIT_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    labels: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=float)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.labels):
            raise ValueError("need one vector per label")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("labels must be unique")
        norms = np.linalg.norm(vectors, axis=1)
        if vectors.size and np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ValueError("embedding vectors must be unit-norm")
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "vectors", vectors)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def subset(self, labels: Sequence[str]) -> "EmbeddingTable":
        idx = [self.index(l) for l in labels]
        return EmbeddingTable(tuple(labels), self.vectors[idx].reshape(len(idx), self.dim))

    def without_wildcard(self) -> "EmbeddingTable":
        return self.subset([l for l in self.labels if l != WILDCARD_LABEL])

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "entries": [{"label": l, "vector": v.tolist()} for l, v in zip(self.labels, self.vectors)],
        }

    @classmethod
    def from_dict(cls, d) -> "EmbeddingTable":
        entries = d["entries"]
        vectors = np.array([e["vector"] for e in entries], dtype=float).reshape(len(entries), int(d["dim"]))
        return cls(tuple(e["label"] for e in entries), vectors)

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class Projection:
    """Affine map from embedding space into query space."""

    matrix: np.ndarray  # (query_dim, embed_dim)
    offset: np.ndarray  # (query_dim,)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        b = np.asarray(self.offset, dtype=float)
        if m.ndim != 2 or b.shape != (m.shape[0],):
            raise ValueError("projection matrix and offset shapes disagree")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(b))):
            raise ValueError("projection entries must be finite")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "offset", b)

    @classmethod
    def random(cls, embed_dim: int, query_dim: int, seed=None) -> "Projection":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, 1.0 / np.sqrt(embed_dim), (query_dim, embed_dim)), np.zeros(query_dim))

    @classmethod
    def zeros(cls, embed_dim: int, query_dim: int) -> "Projection":
        return cls(np.zeros((query_dim, embed_dim)), np.zeros(query_dim))

    @classmethod
    def identity(cls, dim: int) -> "Projection":
        return cls(np.eye(dim), np.zeros(dim))

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if t.shape[-1] != self.matrix.shape[1]:
            raise ValueError(f"dimension mismatch: embedding {t.shape[-1]} vs projection {self.matrix.shape[1]}")
        return t @ self.matrix.T + self.offset

    def to_dict(self) -> dict:
        return {"matrix": self.matrix.tolist(), "offset": self.offset.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Projection":
        return cls(np.array(d["matrix"], dtype=float), np.array(d["offset"], dtype=float))


def to_unit_interval(cosines):
    """Map cosine similarities from [-1, 1] onto [0, 1]."""
    return (np.asarray(cosines, dtype=float) + 1.0) / 2.0


def region_similarity(region_feats, table: EmbeddingTable, include_wildcard: bool = False) -> np.ndarray:
    """Regions x categories cosine matrix mapped to [0, 1]."""
    if not include_wildcard:
        table = table.without_wildcard()
    feats = np.asarray(region_feats, dtype=float).reshape(-1, table.dim)
    return to_unit_interval(np.clip(feats @ table.vectors.T, -1.0, 1.0))


def roqis_criterion(similarities, objectness, alpha: float = 0.45) -> np.ndarray:
    """``max_c(sim)^alpha * objectness^(1 - alpha)`` per region.

    ``similarities`` must already lie in [0, 1] (see :func:`to_unit_interval`).
    """
    sims = np.asarray(similarities, dtype=float)
    obj = np.asarray(objectness, dtype=float)
    if sims.ndim != 2 or obj.ndim != 1 or sims.shape[0] != obj.shape[0]:
        raise ValueError(f"dimension mismatch: similarities {sims.shape} vs objectness {obj.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if sims.shape[1] == 0:
        raise ValueError("dimension mismatch: no categories to compare against")
    best = sims.max(axis=1)
    # Explicit collapse keeps the endpoints exact (0 ** 0 is 1 in numpy anyway).
    if alpha == 0.0:
        return obj.copy()
    if alpha == 1.0:
        return best
    return best**alpha * obj ** (1.0 - alpha)


def top_indices(phi, n: int) -> list[int]:
    phi = np.asarray(phi, dtype=float)
    order = np.argsort(-phi, kind="stable")
    return order[: max(n, 0)].tolist()


def select_top(proposals: Sequence[Box], phi, n: int) -> list[Box]:
    """The ``n`` proposals with the largest criterion, best first; ties keep input order."""
    if len(proposals) != len(phi):
        raise ValueError("need one criterion value per proposal")
    return [proposals[i] for i in top_indices(phi, n)]


def classify_region(v, table: EmbeddingTable) -> int:
    if len(table) == 0:
        raise ValueError("empty embedding table")
    return int(np.argmax(table.vectors @ np.asarray(v, dtype=float)))


def class_aware_query(q, t, proj: Projection) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    shifted = proj(t)
    if shifted.shape != q.shape:
        raise ValueError(f"dimension mismatch: query {q.shape} vs projected embedding {shifted.shape}")
    return q + shifted


def fuse_score(m_hat: float, v_hat, table: EmbeddingTable) -> np.ndarray:
    """Per-category inference score ``m_hat * cosine(v_hat, t_c)``."""
    v = np.asarray(v_hat, dtype=float)
    norm = np.linalg.norm(v)
    cos = table.vectors @ v / norm if norm > 0 else np.zeros(len(table))
    return m_hat * cos
