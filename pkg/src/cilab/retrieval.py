"""Query/gallery retrieval metrics: AP, mAP and the Forget ratio."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError
from .model import EmbeddingNet, embed_numpy


@dataclass
class RetrievalSplit:
    query_images: np.ndarray
    query_ids: np.ndarray
    gallery_images: np.ndarray
    gallery_ids: np.ndarray
    query_sample_ids: np.ndarray | None = None
    gallery_sample_ids: np.ndarray | None = None

    def __post_init__(self):
        self.query_ids = np.asarray(self.query_ids, dtype=np.int64)
        self.gallery_ids = np.asarray(self.gallery_ids, dtype=np.int64)
        missing = set(self.query_ids.tolist()) - set(self.gallery_ids.tolist())
        if missing:
            raise ProtocolError(f"query instances without gallery matches: {sorted(missing)}")
        if self.query_sample_ids is not None and self.gallery_sample_ids is not None:
            if set(self.query_sample_ids.tolist()) & set(self.gallery_sample_ids.tolist()):
                raise ProtocolError("query and gallery share samples")

    @property
    def instances(self) -> set[int]:
        return set(self.query_ids.tolist()) | set(self.gallery_ids.tolist())


@dataclass(frozen=True)
class MetricsRecord:
    strategy: str
    loss_family: str
    t: int
    mAP: float
    ref_mAP: float
    forget: float


def average_precision(ranking, num_relevant: int) -> float:
    """Non-interpolated AP of a ranked list of relevance flags."""
    if num_relevant < 1:
        raise ProtocolError("average precision needs at least one relevant item")
    hits = 0
    total = 0.0
    for k, rel in enumerate(ranking, start=1):
        if rel:
            hits += 1
            total += hits / k
    return total / num_relevant


def rank_gallery(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Gallery order by ascending Euclidean distance, ties by gallery index."""
    d = np.sum((gallery - query) ** 2, axis=1)
    return np.argsort(d, kind="stable")


def map_from_embeddings(q_emb, q_ids, g_emb, g_ids) -> float:
    """mAP in percent."""
    q_ids = np.asarray(q_ids)
    g_ids = np.asarray(g_ids)
    if len(q_ids) == 0:
        raise ProtocolError("empty query set")
    total = 0.0
    for qi in range(len(q_ids)):
        rel = g_ids[rank_gallery(q_emb[qi], g_emb)] == q_ids[qi]
        num_rel = int(rel.sum())
        if num_rel == 0:
            raise ProtocolError(f"query {qi} (instance {q_ids[qi]}) has no gallery match")
        total += average_precision(rel, num_rel)
    return 100.0 * total / len(q_ids)


def mean_average_precision(net: EmbeddingNet, split: RetrievalSplit) -> float:
    q = embed_numpy(net, split.query_images)
    g = embed_numpy(net, split.gallery_images)
    return map_from_embeddings(q, split.query_ids, g, split.gallery_ids)


def forget_ratio(ref_map: float, map_: float) -> float:
    """Relative mAP drop against the cumulative reference, percent to 2 decimals."""
    if ref_map <= 0:
        raise ProtocolError(f"reference mAP must be positive, got {ref_map}")
    return round(100.0 * (ref_map - map_) / ref_map, 2)
