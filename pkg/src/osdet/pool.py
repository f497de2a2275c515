"""Bounded per-class store of filtered, unit-norm proposal embeddings.

Candidates must clear two gates before entering: localization quality
(IoU of the predicted box against its matched target above
``iou_threshold``) and semantic agreement (cosine similarity against the
class center above ``cos_threshold``). A class at capacity evicts its
minimum-score entry when a better-scoring candidate arrives, where the
score is the product of the two gate signals. Stored vectors are detached
constants; gradients never flow into the pool.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BoundingBox, iou

ADMITTED = "admitted"
REPLACED = "replaced"
REJECTED = "rejected"

_NORM_TOL = 1e-4


@dataclass(frozen=True)
class PooledEmbedding:
    vector: np.ndarray
    class_id: int
    score: float


def admission_score(
    embedding: np.ndarray,
    box: BoundingBox,
    gt_box: BoundingBox,
    center: np.ndarray | None,
) -> tuple[float, float]:
    """Gate signals for a candidate: (IoU vs target, cosine vs class center).

    An empty class has no center yet; the cosine defaults to 1.0 so classes
    can bootstrap their first entries.
    """
    s_iou = iou(box, gt_box)
    if center is None:
        return s_iou, 1.0
    return s_iou, float(np.dot(embedding, center))


class EmbeddingPool:
    """Per-class bounded embedding store with score-ordered replacement."""

    def __init__(
        self,
        capacity: int = 256,
        iou_threshold: float = 0.7,
        cos_threshold: float = 0.5,
    ):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = int(capacity)
        self.iou_threshold = float(iou_threshold)
        self.cos_threshold = float(cos_threshold)
        self._vectors: dict[int, list[np.ndarray]] = {}
        self._scores: dict[int, list[float]] = {}
        self._centers: dict[int, np.ndarray] = {}

    # ------------------------------------------------------------- views --

    def class_ids(self) -> list[int]:
        return sorted(c for c in self._vectors if self._vectors[c])

    def count(self, class_id: int) -> int:
        return len(self._vectors.get(class_id, ()))

    def occupancy(self) -> dict[int, int]:
        return {c: len(v) for c, v in sorted(self._vectors.items())}

    def center(self, class_id: int) -> np.ndarray | None:
        """Renormalized mean of the class's stored vectors, or None if empty."""
        return self._centers.get(class_id)

    def scores(self, class_id: int) -> list[float]:
        return list(self._scores.get(class_id, ()))

    def snapshot(self) -> dict[int, np.ndarray]:
        """Immutable per-class matrices; later inserts do not affect the copy."""
        return {c: np.stack(v).copy() for c, v in sorted(self._vectors.items()) if v}

    # ----------------------------------------------------------- mutation --

    def admission_score(
        self, embedding: np.ndarray, box: BoundingBox, gt_box: BoundingBox, class_id: int
    ) -> tuple[float, float]:
        return admission_score(embedding, box, gt_box, self.center(class_id))

    def try_insert(self, class_id: int, vector: np.ndarray, s_iou: float, s_cos: float) -> str:
        """Admit, replace or reject a candidate embedding.

        Gates are strict: ``s_iou > iou_threshold`` and ``s_cos >
        cos_threshold``. The stored score is ``s_iou * s_cos``.
        """
        vector = np.asarray(vector, dtype=np.float64)
        norm = float(np.linalg.norm(vector))
        if abs(norm - 1.0) > _NORM_TOL:
            raise ValueError(f"pool vectors must be unit-norm, got norm {norm}")
        if not (s_iou > self.iou_threshold and s_cos > self.cos_threshold):
            return REJECTED
        slot = self._vectors.setdefault(class_id, [])
        scores = self._scores.setdefault(class_id, [])
        score = float(s_iou * s_cos)
        if len(slot) < self.capacity:
            slot.append(vector.copy())
            scores.append(score)
            self._recenter(class_id)
            return ADMITTED
        min_idx = int(np.argmin(scores))
        if score > scores[min_idx]:
            slot[min_idx] = vector.copy()
            scores[min_idx] = score
            self._recenter(class_id)
            return REPLACED
        return REJECTED

    def _recenter(self, class_id: int):
        mean = np.mean(self._vectors[class_id], axis=0)
        norm = np.linalg.norm(mean)
        self._centers[class_id] = mean / max(norm, 1e-12)

    # ------------------------------------------------------- persistence --

    def state_arrays(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """(vectors, scores) per non-empty class, for checkpoint payloads."""
        return {
            c: (np.stack(v), np.asarray(self._scores[c], dtype=np.float64))
            for c, v in sorted(self._vectors.items())
            if v
        }

    @classmethod
    def from_state(
        cls,
        state: dict[int, tuple[np.ndarray, np.ndarray]],
        capacity: int,
        iou_threshold: float,
        cos_threshold: float,
    ) -> "EmbeddingPool":
        pool = cls(capacity=capacity, iou_threshold=iou_threshold, cos_threshold=cos_threshold)
        for class_id, (vectors, scores) in state.items():
            if vectors.shape[0] > capacity:
                raise ValueError(f"class {class_id} state exceeds capacity {capacity}")
            pool._vectors[class_id] = [np.asarray(v, dtype=np.float64).copy() for v in vectors]
            pool._scores[class_id] = [float(s) for s in scores]
            if pool._vectors[class_id]:
                pool._recenter(class_id)
        return pool
