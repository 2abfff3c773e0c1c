"""Weighted bipartite graph construction and two-step resource diffusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .activity import SparseUserTagMatrix, TemporalActivityMatrix
from .corpus import IdIndex

WEIGHTED_DEGREES = "weighted"
EDGE_COUNT_DEGREES = "edge-count"
DEGREE_MODES = (WEIGHTED_DEGREES, EDGE_COUNT_DEGREES)

DEFAULT_OPERATOR_CAP = 2000


class UnscorableQuestionError(ValueError):
    """None of the question's tags exist in the model's tag index."""


class OperatorCapExceeded(RuntimeError):
    """Refusing to materialize the dense diffusion operator above the cap."""


@dataclass(frozen=True)
class BipartiteGraph:
    """User-tag graph whose edge weights are the temporal activity entries.

    Degrees are weighted row/column sums by default (the mode that keeps the
    two-step diffusion column-stochastic); edge-count degrees are available
    for comparison.
    """

    adjacency: SparseUserTagMatrix
    user_degrees: np.ndarray
    tag_degrees: np.ndarray
    degree_mode: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.adjacency.shape


def build_graph(
    activity: TemporalActivityMatrix | SparseUserTagMatrix,
    degree_mode: str = WEIGHTED_DEGREES,
) -> BipartiteGraph:
    if degree_mode not in DEGREE_MODES:
        raise ValueError(f"degree_mode must be one of {DEGREE_MODES}, got {degree_mode!r}")
    matrix = activity.matrix if isinstance(activity, TemporalActivityMatrix) else activity
    csr = matrix.csr
    if degree_mode == WEIGHTED_DEGREES:
        user_degrees = np.asarray(csr.sum(axis=1)).ravel()
        tag_degrees = np.asarray(csr.sum(axis=0)).ravel()
    else:
        binary = csr.copy()
        binary.data = np.ones_like(binary.data)
        user_degrees = np.asarray(binary.sum(axis=1)).ravel()
        tag_degrees = np.asarray(binary.sum(axis=0)).ravel()
    return BipartiteGraph(
        adjacency=matrix,
        user_degrees=user_degrees,
        tag_degrees=tag_degrees,
        degree_mode=degree_mode,
    )


def _safe_inverse(values: np.ndarray) -> np.ndarray:
    # Zero-degree nodes are isolated: their diffusion terms are defined as 0.
    out = np.zeros_like(values, dtype=np.float64)
    np.divide(1.0, values, out=out, where=values > 0)
    return out


def _check_resource(values: np.ndarray, length: int, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (length,):
        raise ValueError(f"{what} must have length {length}, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} must be finite")
    if np.any(values < 0):
        raise ValueError(f"{what} must be non-negative")
    return values


def diffuse_to_tags(graph: BipartiteGraph, user_resource: np.ndarray) -> np.ndarray:
    """First diffusion step: each user splits its resource over its tags."""
    m, n = graph.shape
    f = _check_resource(user_resource, m, "user resource")
    scaled = f * _safe_inverse(graph.user_degrees)
    return np.asarray(graph.adjacency.csr.T @ scaled).ravel()


def diffuse_to_users(graph: BipartiteGraph, tag_resource: np.ndarray) -> np.ndarray:
    """Second diffusion step: each tag returns its resource to its users."""
    m, n = graph.shape
    g = _check_resource(tag_resource, n, "tag resource")
    scaled = g * _safe_inverse(graph.tag_degrees)
    return np.asarray(graph.adjacency.csr @ scaled).ravel()


def score_question(graph: BipartiteGraph, tag_indices: Iterable[int]) -> np.ndarray:
    """Diffused expertise scores for a question with the given tag indices.

    The initial resource vector is each user's summed activity on the
    question's tags; two diffusion steps then spread it via all two-step
    user-tag-user paths. The dense operator is never formed.
    """
    tags = sorted(set(int(t) for t in tag_indices))
    n = graph.shape[1]
    if any(t < 0 or t >= n for t in tags):
        raise ValueError(f"tag index out of range for {n} tags: {tags}")
    if not tags:
        raise UnscorableQuestionError("question has no tags known to the model")
    initial = np.asarray(graph.adjacency.csr[:, tags].sum(axis=1)).ravel()
    return diffuse_to_users(graph, diffuse_to_tags(graph, initial))


def materialize_diffusion_operator(
    graph: BipartiteGraph, cap: int = DEFAULT_OPERATOR_CAP
) -> np.ndarray:
    """Dense user-to-user diffusion operator; testing and diagnostics only.

    Entry (i, b) is the share of user b's resource that reaches user i over
    all two-step paths. Columns of users with positive degree (and no
    zero-degree incident tags) sum to one.
    """
    m, _ = graph.shape
    if m > cap:
        raise OperatorCapExceeded(
            f"{m} users exceeds the dense-operator cap of {cap}; use the "
            "matrix-vector scoring path"
        )
    dense = graph.adjacency.toarray()
    inv_tag = _safe_inverse(graph.tag_degrees)
    inv_user = _safe_inverse(graph.user_degrees)
    return (dense * inv_tag[np.newaxis, :]) @ dense.T * inv_user[np.newaxis, :]


@dataclass(frozen=True)
class Ranking:
    """Candidate users ordered by descending score, ties by ascending user id."""

    entries: tuple[tuple[int, float], ...]
    question_id: int | None = None

    def rank_of(self, user_id: int) -> int | None:
        """1-based position of a user, or None if absent."""
        for position, (uid, _) in enumerate(self.entries, start=1):
            if uid == user_id:
                return position
        return None

    def top(self, k: int) -> tuple[tuple[int, float], ...]:
        return self.entries[:k]


def rank_users(
    scores: np.ndarray | Sequence[float],
    user_index: IdIndex,
    question_id: int | None = None,
) -> Ranking:
    """Order all candidate users by score; deterministic under ties."""
    values = np.asarray(scores, dtype=np.float64)
    if values.shape != (len(user_index),):
        raise ValueError(
            f"scores must cover all {len(user_index)} candidates, got {values.shape}"
        )
    if not np.all(np.isfinite(values)):
        raise ValueError("scores must be finite")
    labels = np.asarray(user_index.labels)
    order = np.lexsort((labels, -values))
    entries = tuple((int(labels[i]), float(values[i])) for i in order)
    return Ranking(entries=entries, question_id=question_id)


def rank_position(
    scores: np.ndarray,
    user_index: IdIndex,
    user_id: int,
) -> int:
    """1-based rank of one user without building the full ordering."""
    target = user_index.to_index[user_id]
    values = np.asarray(scores, dtype=np.float64)
    target_score = values[target]
    labels = np.asarray(user_index.labels)
    better = int(np.sum(values > target_score))
    tied_before = int(np.sum((values == target_score) & (labels < user_id)))
    return better + tied_before + 1
