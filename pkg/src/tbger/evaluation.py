"""Ranking metrics and the end-to-end experiment harness."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import baselines
from .activity import (
    WindowedActivity,
    build_windowed_activity,
    quantize_to_block_start,
    temporal_activity,
    undiscounted_activity,
)
from .baselines import MFHyperparams, MFModel, MFTrainingError
from .config import (
    ALL_METHODS,
    METHOD_SCORE,
    METHOD_T_TAG_MF,
    METHOD_TAG_MF,
    METHOD_TBGER,
    ExperimentConfig,
)
from .corpus import (
    DatasetSplit,
    IdIndex,
    build_tag_index,
    build_user_index,
    count_training_answers,
    select_candidates,
    training_period_question_ids,
    training_records,
)
from .diffusion import (
    Ranking,
    UnscorableQuestionError,
    build_graph,
    rank_users,
    score_question,
)
from .ingest import PostCorpus

logger = logging.getLogger(__name__)

# Validation-MRR grid for the factorization baselines.
MF_LEARNING_RATES = (0.1, 0.01)
MF_L2_WEIGHTS = (0.1, 0.01, 0.001)


class MetricError(ValueError):
    """A metric was requested over zero evaluated questions."""


class SnapshotMismatchError(ValueError):
    """A supplied activity snapshot does not fit the experiment's indices/grid."""


def _check_snapshot_compatible(
    windowed: WindowedActivity,
    shape: tuple[int, int],
    window_seconds: int,
    origin: int,
    reference: int,
) -> None:
    if windowed.shape != shape:
        raise SnapshotMismatchError(
            f"snapshot shape {windowed.shape} does not match the experiment's "
            f"{shape}; it was built with different candidates or tags"
        )
    if windowed.window_length != window_seconds:
        raise SnapshotMismatchError(
            f"snapshot window length {windowed.window_length}s does not match "
            f"the configured {window_seconds}s"
        )
    if (windowed.reference_time - origin) % window_seconds != 0:
        raise SnapshotMismatchError(
            "snapshot reference time is not on the corpus window grid"
        )
    if windowed.reference_time < reference:
        raise SnapshotMismatchError(
            "snapshot reference time predates the latest test block; rebuild "
            "with a later --at"
        )


class UnknownMethodError(ValueError):
    """Requested evaluation method does not exist."""


@dataclass(frozen=True)
class QuestionResult:
    question_id: int
    ground_truth_user: int
    rank: int
    scorable: bool
    query_block_start: int


@dataclass(frozen=True)
class MetricSummary:
    evaluated: int
    mrr: float
    p_at_1: float
    p_at_3: float


@dataclass
class EvalReport:
    """Per-question ranks plus aggregate metrics for one method on one site."""

    method: str
    site_name: str
    config_fingerprint: str
    results: tuple[QuestionResult, ...]
    evaluated: int
    excluded_ground_truth_not_candidate: int
    unscorable: int
    mrr: float | None
    p_at_1: float | None
    p_at_3: float | None
    cold_threshold: int
    cold: MetricSummary | None
    mf_hyperparams: dict | None = None
    extras: dict = field(default_factory=dict)

    @property
    def total_questions(self) -> int:
        return self.evaluated + self.excluded_ground_truth_not_candidate + self.unscorable


def mrr(results: Iterable[QuestionResult]) -> float:
    """Mean reciprocal rank over scorable results."""
    ranks = [r.rank for r in results if r.scorable]
    if not ranks:
        raise MetricError("MRR is undefined over zero evaluated questions")
    return float(np.mean([1.0 / r for r in ranks]))


def precision_at_k(results: Iterable[QuestionResult], k: int) -> float:
    """Fraction of scorable results with the ground truth in the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ranks = [r.rank for r in results if r.scorable]
    if not ranks:
        raise MetricError(f"P@{k} is undefined over zero evaluated questions")
    return float(np.mean([1.0 if r <= k else 0.0 for r in ranks]))


def _summarize(results: Sequence[QuestionResult]) -> MetricSummary | None:
    scorable = [r for r in results if r.scorable]
    if not scorable:
        return None
    return MetricSummary(
        evaluated=len(scorable),
        mrr=mrr(scorable),
        p_at_1=precision_at_k(scorable, 1),
        p_at_3=precision_at_k(scorable, 3),
    )


@dataclass
class _ExperimentContext:
    """Everything derived once from (corpus, split, config)."""

    corpus: PostCorpus
    split: DatasetSplit
    config: ExperimentConfig
    candidates: frozenset[int]
    user_index: IdIndex
    tag_index: IdIndex
    windowed: WindowedActivity
    test_questions: list[int]
    origin: int
    training_answer_counts: dict[int, int]


def prepare_experiment(
    corpus: PostCorpus,
    split: DatasetSplit,
    config: ExperimentConfig,
    candidates: frozenset[int] | None = None,
    windowed: WindowedActivity | None = None,
) -> _ExperimentContext:
    """Build indices, records, and the windowed activity shared by all methods.

    The windowed activity is anchored at the block start of the latest test
    question; earlier query blocks are served by rebasing window ordinals,
    which is exact because all block starts lie on one grid. A precomputed
    snapshot may be passed instead; it must match the indices and grid.
    """
    if candidates is None:
        candidates = select_candidates(split, corpus, config.min_answers)
    user_index = build_user_index(candidates)
    tag_index = build_tag_index(split, corpus)
    origin = corpus.earliest_post_time()
    window = config.window_seconds

    test_questions = sorted(
        split.test_questions,
        key=lambda qid: (corpus.questions[qid].creation_date, qid),
    )
    if not test_questions:
        raise MetricError("the split has no test questions to evaluate")
    latest = corpus.questions[test_questions[-1]].creation_date
    reference = quantize_to_block_start(latest, origin, window)
    if windowed is not None:
        _check_snapshot_compatible(windowed, (len(user_index), len(tag_index)),
                                   window, origin, reference)
    else:
        records = training_records(split, corpus, candidates, user_index, tag_index)
        usable = [r for r in records if r.answer_time < reference]
        windowed = build_windowed_activity(
            usable, window, reference, (len(user_index), len(tag_index)), origin
        )
    counts = count_training_answers(corpus, training_period_question_ids(split, corpus))
    return _ExperimentContext(
        corpus=corpus,
        split=split,
        config=config,
        candidates=candidates,
        user_index=user_index,
        tag_index=tag_index,
        windowed=windowed,
        test_questions=test_questions,
        origin=origin,
        training_answer_counts=dict(counts),
    )


def _question_tag_indices(ctx: _ExperimentContext, question_id: int) -> list[int]:
    question = ctx.corpus.questions[question_id]
    return [ctx.tag_index.to_index[t] for t in question.tags if t in ctx.tag_index]


def _zero_ranking(ctx: _ExperimentContext, question_id: int) -> Ranking:
    zeros = np.zeros(len(ctx.user_index))
    return rank_users(zeros, ctx.user_index, question_id)


def _block_start(ctx: _ExperimentContext, question_id: int) -> int:
    t = ctx.corpus.questions[question_id].creation_date
    return quantize_to_block_start(t, ctx.origin, ctx.config.window_seconds)


def _collect_results(
    ctx: _ExperimentContext,
    rank_for_question,
) -> tuple[list[QuestionResult], int, int]:
    """Run the per-question loop shared by every method.

    rank_for_question(question_id, tag_indices) returns (ranking, scorable).
    """
    results: list[QuestionResult] = []
    excluded = 0
    unscorable = 0
    for qid in ctx.test_questions:
        ground_truth = ctx.corpus.accepted_answerer(qid)
        if ground_truth not in ctx.candidates:
            excluded += 1
            continue
        tags = _question_tag_indices(ctx, qid)
        ranking, scorable = rank_for_question(qid, tags)
        if not scorable:
            unscorable += 1
        rank = ranking.rank_of(ground_truth)
        results.append(
            QuestionResult(
                question_id=qid,
                ground_truth_user=ground_truth,
                rank=rank,
                scorable=scorable,
                query_block_start=_block_start(ctx, qid),
            )
        )
    return results, excluded, unscorable


def _diffusion_runner(ctx: _ExperimentContext):
    graphs: dict[int, object] = {}

    def ranker(qid: int, tags: list[int]) -> tuple[Ranking, bool]:
        block = _block_start(ctx, qid)
        if block not in graphs:
            graphs[block] = build_graph(
                temporal_activity(ctx.windowed, block), ctx.config.degree_mode
            )
        if not tags:
            return _zero_ranking(ctx, qid), False
        scores = score_question(graphs[block], tags)
        return rank_users(scores, ctx.user_index, qid), True

    return ranker


def _score_runner(ctx: _ExperimentContext):
    table = baselines.build_vote_score_table(
        ctx.corpus,
        training_period_question_ids(ctx.split, ctx.corpus),
        ctx.candidates,
    )
    ranking = baselines.score_baseline_rank(
        table, trials=ctx.config.score_trials, seed=ctx.config.seed
    )

    def ranker(qid: int, tags: list[int]) -> tuple[Ranking, bool]:
        # The vote-score ranking is question-independent, so every question
        # is scorable regardless of its tags.
        return ranking, True

    return ranker


def _mf_matrix(ctx: _ExperimentContext, query_time: int, discounted: bool):
    if discounted:
        return temporal_activity(ctx.windowed, query_time).matrix
    return undiscounted_activity(ctx.windowed, query_time)


def _validation_mrr(ctx: _ExperimentContext, model: MFModel) -> float | None:
    ranks: list[int] = []
    for qid in ctx.split.validation_questions:
        ground_truth = ctx.corpus.accepted_answerer(qid)
        if ground_truth not in ctx.candidates:
            continue
        tags = _question_tag_indices(ctx, qid)
        if not tags:
            continue
        scores = baselines.mf_score(model, tags)
        ranks.append(rank_users(scores, ctx.user_index, qid).rank_of(ground_truth))
    if not ranks:
        return None
    return float(np.mean([1.0 / r for r in ranks]))


def _tune_mf(ctx: _ExperimentContext, discounted: bool) -> MFHyperparams:
    """Pick (learning rate, L2) by validation MRR; diverging combos are skipped."""
    cfg = ctx.config
    if not cfg.mf_tune:
        return MFHyperparams(
            learning_rate=cfg.mf_learning_rate, l2=cfg.mf_l2, epochs=cfg.mf_epochs
        )
    val_questions = [
        qid
        for qid in ctx.split.validation_questions
        if ctx.corpus.accepted_answerer(qid) in ctx.candidates
    ]
    if not val_questions:
        logger.info("no usable validation questions; using default MF hyperparameters")
        return MFHyperparams(
            learning_rate=cfg.mf_learning_rate, l2=cfg.mf_l2, epochs=cfg.mf_epochs
        )
    earliest_val = min(ctx.corpus.questions[q].creation_date for q in val_questions)
    t_val = quantize_to_block_start(earliest_val, ctx.origin, cfg.window_seconds)
    matrix = _mf_matrix(ctx, t_val, discounted)
    best: tuple[float, MFHyperparams] | None = None
    for lr in MF_LEARNING_RATES:
        for l2 in MF_L2_WEIGHTS:
            hp = MFHyperparams(learning_rate=lr, l2=l2, epochs=cfg.mf_epochs)
            try:
                model = baselines.train_tag_mf(
                    matrix, cfg.mf_latent_dim, hp, seed=cfg.seed
                )
            except MFTrainingError as exc:
                logger.info("skipping MF combo %s: %s", hp.describe(), exc)
                continue
            score = _validation_mrr(ctx, model)
            if score is None:
                continue
            if best is None or score > best[0]:
                best = (score, hp)
    if best is None:
        logger.warning("all MF combos failed validation; using defaults")
        return MFHyperparams(
            learning_rate=cfg.mf_learning_rate, l2=cfg.mf_l2, epochs=cfg.mf_epochs
        )
    logger.info("selected MF hyperparameters %s (val MRR %.4f)", best[1].describe(), best[0])
    return best[1]


def _mf_runner(ctx: _ExperimentContext, discounted: bool):
    hp = _tune_mf(ctx, discounted)
    earliest_test = ctx.corpus.questions[ctx.test_questions[0]].creation_date
    t_eval = quantize_to_block_start(earliest_test, ctx.origin, ctx.config.window_seconds)
    matrix = _mf_matrix(ctx, t_eval, discounted)
    model = baselines.train_tag_mf(matrix, ctx.config.mf_latent_dim, hp, seed=ctx.config.seed)

    def ranker(qid: int, tags: list[int]) -> tuple[Ranking, bool]:
        if not tags:
            return _zero_ranking(ctx, qid), False
        scores = baselines.mf_score(model, tags)
        return rank_users(scores, ctx.user_index, qid), True

    return ranker, hp


def run_experiment(
    corpus: PostCorpus,
    split: DatasetSplit,
    method: str,
    config: ExperimentConfig,
    context: _ExperimentContext | None = None,
) -> EvalReport:
    """Score and rank every test question with one method; emit the report.

    The cold-start sub-report restricts the metrics to questions whose
    ground-truth answerer has fewer than cold_threshold training answers.
    """
    if method not in ALL_METHODS:
        raise UnknownMethodError(
            f"unknown method {method!r}; expected one of {ALL_METHODS}"
        )
    ctx = context or prepare_experiment(corpus, split, config)
    mf_hp: MFHyperparams | None = None
    if method == METHOD_TBGER:
        ranker = _diffusion_runner(ctx)
    elif method == METHOD_SCORE:
        ranker = _score_runner(ctx)
    elif method in (METHOD_TAG_MF, METHOD_T_TAG_MF):
        ranker, mf_hp = _mf_runner(ctx, discounted=method == METHOD_T_TAG_MF)
    results, excluded, unscorable = _collect_results(ctx, ranker)

    scorable = [r for r in results if r.scorable]
    cold_results = [
        r
        for r in results
        if ctx.training_answer_counts.get(r.ground_truth_user, 0) < config.cold_threshold
    ]
    report = EvalReport(
        method=method,
        site_name=config.site_name or corpus.site_name,
        config_fingerprint=config.fingerprint(),
        results=tuple(results),
        evaluated=len(scorable),
        excluded_ground_truth_not_candidate=excluded,
        unscorable=unscorable,
        mrr=mrr(scorable) if scorable else None,
        p_at_1=precision_at_k(scorable, 1) if scorable else None,
        p_at_3=precision_at_k(scorable, 3) if scorable else None,
        cold_threshold=config.cold_threshold,
        cold=_summarize(cold_results),
        mf_hyperparams=(
            {
                "learning_rate": mf_hp.learning_rate,
                "l2": mf_hp.l2,
                "epochs": mf_hp.epochs,
            }
            if mf_hp
            else None
        ),
        extras={
            "candidates": len(ctx.candidates),
            "test_questions": len(ctx.test_questions),
            "cold_questions": len(cold_results),
        },
    )
    if report.total_questions != len(ctx.test_questions):
        raise AssertionError(
            "report totals do not reconcile: "
            f"{report.total_questions} != {len(ctx.test_questions)}"
        )
    return report
