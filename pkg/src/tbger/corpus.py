"""Chronological splitting, answer filtering, and dense index assignment."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .ingest import PostCorpus

logger = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.7, 0.1, 0.2)
DEFAULT_MIN_ANSWERS = 5
MIN_EVALUABLE_QUESTIONS = 10

MANIFEST_FORMAT_VERSION = 1


class SplitError(ValueError):
    """Corpus cannot be split under the requested configuration."""


class ConfigurationError(ValueError):
    """A run-time configuration value is unusable (e.g. empty candidate set)."""


@dataclass(frozen=True)
class DatasetSplit:
    """Chronological train/validation/test partition of evaluable questions.

    Partitions hold question ids ordered by (creation_date, id); only
    questions with an owner-attributed accepted answer participate.
    """

    train_questions: tuple[int, ...]
    validation_questions: tuple[int, ...]
    test_questions: tuple[int, ...]
    ratios: tuple[float, float, float]

    def all_question_ids(self) -> tuple[int, ...]:
        return self.train_questions + self.validation_questions + self.test_questions


@dataclass(frozen=True)
class IdIndex:
    """Bijection between external identifiers and dense indices 0..n-1."""

    labels: tuple
    to_index: dict

    @classmethod
    def from_labels(cls, labels: Iterable) -> "IdIndex":
        ordered = tuple(sorted(set(labels)))
        return cls(labels=ordered, to_index={label: i for i, label in enumerate(ordered)})

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label) -> bool:
        return label in self.to_index


@dataclass(frozen=True)
class TrainingRecord:
    """One positively scored answer by a candidate, ready for windowing."""

    answerer_index: int
    tag_indices: tuple[int, ...]
    answer_time: int
    answer_score: int


def validate_ratios(ratios: Sequence[float]) -> tuple[float, float, float]:
    if len(ratios) != 3:
        raise ConfigurationError(f"expected 3 split ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios) or ratios[0] <= 0 or ratios[2] <= 0:
        raise ConfigurationError(f"split ratios must be positive: {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must sum to 1: {ratios}")
    return (float(ratios[0]), float(ratios[1]), float(ratios[2]))


def chronological_split(
    corpus: PostCorpus, ratios: Sequence[float] = DEFAULT_RATIOS
) -> DatasetSplit:
    """Split evaluable questions by question time; latest fraction is the test set.

    Boundary ties share a timestamp: the lower question id goes to the
    earlier partition (guaranteed by the (creation_date, id) sort order).
    """
    ratios = validate_ratios(ratios)
    ordered = corpus.evaluable_question_ids()
    n = len(ordered)
    if n < MIN_EVALUABLE_QUESTIONS:
        raise SplitError(
            f"need at least {MIN_EVALUABLE_QUESTIONS} questions with accepted "
            f"answers to split, found {n}"
        )
    train_end = int(math.floor(n * ratios[0] + 1e-9))
    val_end = int(math.floor(n * (ratios[0] + ratios[1]) + 1e-9))
    return DatasetSplit(
        train_questions=tuple(ordered[:train_end]),
        validation_questions=tuple(ordered[train_end:val_end]),
        test_questions=tuple(ordered[val_end:]),
        ratios=ratios,
    )


def training_period_question_ids(split: DatasetSplit, corpus: PostCorpus) -> set[int]:
    """Question ids whose answers may feed expertise computation.

    Evaluable training questions, plus questions without an accepted answer
    created no later than the last training question (they carry no ground
    truth but their answers are real activity).
    """
    train = set(split.train_questions)
    if not train:
        return train
    cutoff = max(corpus.questions[qid].creation_date for qid in train)
    evaluable = {qid for qid in corpus.questions if corpus.questions[qid].accepted_answer_id is not None}
    for qid, question in corpus.questions.items():
        if qid not in evaluable and question.creation_date <= cutoff:
            train.add(qid)
    return train


def count_training_answers(
    corpus: PostCorpus, training_questions: set[int]
) -> Counter:
    """Answers (any score) per user to the training-period questions."""
    counts: Counter = Counter()
    for answer in corpus.answers.values():
        if answer.question_id in training_questions:
            counts[answer.owner_user_id] += 1
    return counts


def select_candidates(
    split: DatasetSplit,
    corpus: PostCorpus,
    min_answers: int = DEFAULT_MIN_ANSWERS,
) -> frozenset[int]:
    """Users with at least min_answers training answers (any score)."""
    if min_answers < 1:
        raise ConfigurationError(f"min_answers must be >= 1, got {min_answers}")
    counts = count_training_answers(corpus, training_period_question_ids(split, corpus))
    candidates = frozenset(user for user, c in counts.items() if c >= min_answers)
    if not candidates:
        raise ConfigurationError(
            f"no users have {min_answers} or more training answers"
        )
    return candidates


def build_user_index(candidates: Iterable[int]) -> IdIndex:
    return IdIndex.from_labels(candidates)


def build_tag_index(split: DatasetSplit, corpus: PostCorpus) -> IdIndex:
    """Dense tag indices over training-period question tags only."""
    tags: set[str] = set()
    for qid in training_period_question_ids(split, corpus):
        tags.update(corpus.questions[qid].tags)
    return IdIndex.from_labels(tags)


def training_records(
    split: DatasetSplit,
    corpus: PostCorpus,
    candidates: frozenset[int],
    user_index: IdIndex,
    tag_index: IdIndex,
) -> list[TrainingRecord]:
    """Positively scored candidate answers to training-period questions.

    Records are ordered by (answer_time, answer_id); this order is the
    canonical accumulation order for all activity matrices built from them.
    """
    training_questions = training_period_question_ids(split, corpus)
    records: list[TrainingRecord] = []
    for aid in sorted(corpus.answers, key=lambda a: (corpus.answers[a].creation_date, a)):
        answer = corpus.answers[aid]
        if answer.score <= 0:
            continue
        if answer.owner_user_id not in candidates:
            continue
        if answer.question_id not in training_questions:
            continue
        question = corpus.questions[answer.question_id]
        tag_indices = tuple(
            tag_index.to_index[tag] for tag in question.tags if tag in tag_index
        )
        if not tag_indices:
            continue
        records.append(
            TrainingRecord(
                answerer_index=user_index.to_index[answer.owner_user_id],
                tag_indices=tag_indices,
                answer_time=answer.creation_date,
                answer_score=answer.score,
            )
        )
    return records


def manifest_payload(
    split: DatasetSplit,
    candidates: frozenset[int],
    min_answers: int,
    site_name: str = "",
    config_fingerprint: str = "",
) -> dict:
    return {
        "format": MANIFEST_FORMAT_VERSION,
        "config_fingerprint": config_fingerprint,
        "site_name": site_name,
        "ratios": list(split.ratios),
        "min_answers": min_answers,
        "train": list(split.train_questions),
        "validation": list(split.validation_questions),
        "test": list(split.test_questions),
        "candidates": sorted(candidates),
    }


def save_manifest(path: str | Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> dict:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != MANIFEST_FORMAT_VERSION:
        raise ConfigurationError(
            f"{path}: unsupported manifest format {payload.get('format')!r}"
        )
    return payload


def split_from_manifest(payload: dict) -> tuple[DatasetSplit, frozenset[int], int]:
    split = DatasetSplit(
        train_questions=tuple(payload["train"]),
        validation_questions=tuple(payload["validation"]),
        test_questions=tuple(payload["test"]),
        ratios=tuple(payload["ratios"]),
    )
    return split, frozenset(payload["candidates"]), int(payload["min_answers"])
