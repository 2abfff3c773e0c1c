"""Non-deep reference baselines: vote-score sampling and tag matrix factorization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .activity import SparseUserTagMatrix, WindowedActivity, temporal_activity
from .corpus import IdIndex
from .diffusion import Ranking, UnscorableQuestionError, rank_users
from .ingest import PostCorpus

logger = logging.getLogger(__name__)

DEFAULT_TRIALS = 50
DEFAULT_LATENT_DIM = 10
WEIGHT_EPSILON = 1e-6

MODEL_FORMAT_VERSION = 1


class MFTrainingError(RuntimeError):
    """Factorization training failed (empty input or divergence)."""


@dataclass(frozen=True)
class VoteScoreTable:
    """Mean vote score per user plus the positive sampling weight derived from it."""

    user_ids: tuple[int, ...]
    mean_scores: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True)
class MFHyperparams:
    learning_rate: float = 0.01
    l2: float = 0.01
    epochs: int = 200
    batch_size: int = 1024
    negative_ratio: float = 1.0

    def describe(self) -> str:
        return (
            f"lr={self.learning_rate} l2={self.l2} epochs={self.epochs} "
            f"batch={self.batch_size} neg={self.negative_ratio}"
        )


@dataclass
class MFModel:
    """Learned user/tag latent factors; expertise is their dot product."""

    user_factors: np.ndarray
    tag_factors: np.ndarray
    latent_dim: int
    hyperparams: MFHyperparams
    seed: int
    epoch_losses: list[float] = field(default_factory=list)


def build_vote_score_table(
    corpus: PostCorpus,
    training_questions: set[int],
    candidates: Iterable[int],
) -> VoteScoreTable:
    """Average vote score over each candidate's training answers.

    Users whose mean is zero or negative get a tiny positive weight so that
    sampling probabilities stay valid; when every user is at the floor the
    sampling degenerates to uniform, which is the specified fallback.
    """
    totals: dict[int, float] = {}
    counts: dict[int, int] = {}
    candidate_set = set(candidates)
    for answer in corpus.answers.values():
        if answer.question_id in training_questions and answer.owner_user_id in candidate_set:
            totals[answer.owner_user_id] = totals.get(answer.owner_user_id, 0.0) + answer.score
            counts[answer.owner_user_id] = counts.get(answer.owner_user_id, 0) + 1
    user_ids = tuple(sorted(candidate_set))
    means = np.array(
        [totals.get(uid, 0.0) / counts[uid] if counts.get(uid) else 0.0 for uid in user_ids]
    )
    weights = np.where(means > 0, means, WEIGHT_EPSILON)
    return VoteScoreTable(user_ids=user_ids, mean_scores=means, weights=weights)


def score_baseline_rank(
    table: VoteScoreTable,
    trials: int = DEFAULT_TRIALS,
    seed: int = 0,
) -> Ranking:
    """Average rank over randomized rank lists drawn proportionally to weight.

    Each trial draws a full permutation where users are picked one by one
    with probability proportional to their weight among those remaining.
    Sampling uses the Gumbel-race formulation (sort of log-weight plus
    Gumbel noise), which draws from exactly that distribution in
    O(n log n) per trial.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    n = len(table.user_ids)
    rng = np.random.default_rng(seed)
    log_weights = np.log(table.weights)
    rank_sums = np.zeros(n, dtype=np.float64)
    positions = np.arange(1, n + 1, dtype=np.float64)
    for _ in range(trials):
        keys = log_weights + rng.gumbel(size=n)
        order = np.argsort(-keys, kind="stable")
        rank_sums[order] += positions
    average_rank = rank_sums / trials
    user_index = IdIndex.from_labels(table.user_ids)
    # Lower average rank is better; negate so rank_users' descending order applies.
    return rank_users(-average_rank, user_index)


def _sample_negatives(
    rng: np.random.Generator,
    observed_keys: np.ndarray,
    n_cells: int,
    count: int,
) -> np.ndarray:
    """Uniform unobserved cells, drawn by rejection against the observed set."""
    if count <= 0 or n_cells <= len(observed_keys):
        return np.empty(0, dtype=np.int64)
    collected: list[np.ndarray] = []
    remaining = count
    while remaining > 0:
        draw = rng.integers(0, n_cells, size=max(remaining * 2, 16))
        hits = np.searchsorted(observed_keys, draw)
        hits = np.clip(hits, 0, len(observed_keys) - 1)
        fresh = draw[observed_keys[hits] != draw]
        collected.append(fresh[:remaining])
        remaining -= min(len(fresh), remaining)
    return np.concatenate(collected)


def train_tag_mf(
    matrix: SparseUserTagMatrix,
    latent_dim: int = DEFAULT_LATENT_DIM,
    hyperparams: MFHyperparams | None = None,
    seed: int = 0,
) -> MFModel:
    """Factorize the user-tag activity matrix by mini-batch SGD.

    Observed entries are regression targets; an equal share (negative_ratio)
    of uniformly sampled unobserved cells is treated as zero each epoch. The
    loss is L2-regularized squared error. Raises MFTrainingError on an empty
    matrix or when the loss diverges.
    """
    if latent_dim < 1:
        raise ValueError(f"latent_dim must be >= 1, got {latent_dim}")
    hp = hyperparams or MFHyperparams()
    if matrix.nnz == 0:
        raise MFTrainingError("cannot factorize an empty activity matrix")
    m, n = matrix.shape
    coo = matrix.csr.tocoo()
    obs_rows = coo.row.astype(np.int64)
    obs_cols = coo.col.astype(np.int64)
    obs_vals = coo.data.astype(np.float64)
    observed_keys = np.sort(obs_rows * n + obs_cols)

    rng = np.random.default_rng(seed)
    user_factors = rng.normal(0.0, 0.1, size=(m, latent_dim))
    tag_factors = rng.normal(0.0, 0.1, size=(n, latent_dim))

    n_negatives = int(round(hp.negative_ratio * len(obs_vals)))
    losses: list[float] = []
    for epoch in range(hp.epochs):
        neg_keys = _sample_negatives(rng, observed_keys, m * n, n_negatives)
        rows = np.concatenate([obs_rows, neg_keys // n])
        cols = np.concatenate([obs_cols, neg_keys % n])
        targets = np.concatenate([obs_vals, np.zeros(len(neg_keys))])
        order = rng.permutation(len(targets))
        rows, cols, targets = rows[order], cols[order], targets[order]

        for start in range(0, len(targets), hp.batch_size):
            i = rows[start : start + hp.batch_size]
            j = cols[start : start + hp.batch_size]
            t = targets[start : start + hp.batch_size]
            u = user_factors[i]
            v = tag_factors[j]
            err = t - np.einsum("ij,ij->i", u, v)
            np.add.at(
                user_factors, i, hp.learning_rate * (err[:, None] * v - hp.l2 * u)
            )
            np.add.at(
                tag_factors, j, hp.learning_rate * (err[:, None] * u - hp.l2 * v)
            )

        preds = np.einsum("ij,ij->i", user_factors[rows], tag_factors[cols])
        mse = float(np.mean((targets - preds) ** 2))
        penalty = hp.l2 * (
            float(np.sum(user_factors**2)) + float(np.sum(tag_factors**2))
        ) / len(targets)
        loss = 0.5 * (mse + penalty)
        if not np.isfinite(loss):
            raise MFTrainingError(
                f"training diverged at epoch {epoch} with {hp.describe()}"
            )
        losses.append(loss)
        if len(losses) >= 2 and abs(losses[-2] - losses[-1]) <= 1e-10 * abs(losses[-2]):
            break
    return MFModel(
        user_factors=user_factors,
        tag_factors=tag_factors,
        latent_dim=latent_dim,
        hyperparams=hp,
        seed=seed,
        epoch_losses=losses,
    )


def mf_score(model: MFModel, tag_indices: Iterable[int]) -> np.ndarray:
    """Summed predicted expertise over the question's known tags."""
    tags = sorted(set(int(t) for t in tag_indices))
    n = len(model.tag_factors)
    tags = [t for t in tags if 0 <= t < n]
    if not tags:
        raise UnscorableQuestionError("question has no tags known to the model")
    profile = model.tag_factors[tags].sum(axis=0)
    return model.user_factors @ profile


def build_t_tag_mf_input(
    windowed: WindowedActivity, query_time: int
) -> SparseUserTagMatrix:
    """Temporally discounted activity matrix used as the t-TAG-MF input."""
    return temporal_activity(windowed, query_time).matrix


def save_mf_model(model: MFModel, path: str | Path) -> None:
    np.savez(
        path,
        format_version=np.int64(MODEL_FORMAT_VERSION),
        user_factors=model.user_factors,
        tag_factors=model.tag_factors,
        latent_dim=np.int64(model.latent_dim),
        learning_rate=np.float64(model.hyperparams.learning_rate),
        l2=np.float64(model.hyperparams.l2),
        epochs=np.int64(model.hyperparams.epochs),
        batch_size=np.int64(model.hyperparams.batch_size),
        negative_ratio=np.float64(model.hyperparams.negative_ratio),
        seed=np.int64(model.seed),
        epoch_losses=np.asarray(model.epoch_losses),
    )


def load_mf_model(path: str | Path) -> MFModel:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != MODEL_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported model format {version}")
        return MFModel(
            user_factors=data["user_factors"],
            tag_factors=data["tag_factors"],
            latent_dim=int(data["latent_dim"]),
            hyperparams=MFHyperparams(
                learning_rate=float(data["learning_rate"]),
                l2=float(data["l2"]),
                epochs=int(data["epochs"]),
                batch_size=int(data["batch_size"]),
                negative_ratio=float(data["negative_ratio"]),
            ),
            seed=int(data["seed"]),
            epoch_losses=list(data["epoch_losses"]),
        )
