"""Streaming Posts.xml ingestion into a validated in-memory post corpus."""

from __future__ import annotations

import html
import json
import logging
import re
import xml.parsers.expat
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

logger = logging.getLogger(__name__)

QUESTION_TYPE = 1
ANSWER_TYPE = 2
MAX_TAGS = 5

_CHUNK_SIZE = 1 << 16
_TAG_RE = re.compile(r"<([^<>]+)>")
_REQUIRED_ATTRS = ("Id", "PostTypeId", "CreationDate", "Score")

CORPUS_FORMAT_VERSION = 1


class DumpParseError(ValueError):
    """Malformed dump XML; carries the byte offset where parsing failed."""

    def __init__(self, message: str, byte_offset: int | None = None):
        self.byte_offset = byte_offset
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)


class CorpusFormatError(ValueError):
    """Corpus file does not match the expected newline-delimited JSON layout."""


@dataclass(frozen=True)
class RawPost:
    """One <row> of Posts.xml, restricted to question/answer fields."""

    id: int
    post_type: int
    creation_date: int  # UTC seconds since epoch
    score: int
    owner_user_id: int | None = None
    tags: tuple[str, ...] | None = None
    accepted_answer_id: int | None = None
    parent_id: int | None = None

    @property
    def is_question(self) -> bool:
        return self.post_type == QUESTION_TYPE

    @property
    def is_answer(self) -> bool:
        return self.post_type == ANSWER_TYPE


@dataclass(frozen=True)
class Question:
    id: int
    creation_date: int
    tags: tuple[str, ...]
    accepted_answer_id: int | None = None
    asker_id: int | None = None


@dataclass(frozen=True)
class Answer:
    id: int
    question_id: int
    owner_user_id: int
    creation_date: int
    score: int


@dataclass
class ParseStats:
    """Row-level accounting for one parse_posts pass."""

    rows_seen: int = 0
    questions: int = 0
    answers: int = 0
    skipped_other_type: int = 0
    rejected_rows: int = 0


@dataclass
class CorpusBuildCounts:
    """Records dropped or repaired while assembling a PostCorpus."""

    answers_missing_parent: int = 0
    answers_without_owner: int = 0
    answers_before_question: int = 0
    duplicate_ids: int = 0
    accepted_refs_cleared: int = 0
    untagged_questions: int = 0

    def total_dropped_answers(self) -> int:
        return (
            self.answers_missing_parent
            + self.answers_without_owner
            + self.answers_before_question
        )


@dataclass(eq=True)
class PostCorpus:
    """Immutable-by-convention container of validated questions and answers.

    Every Answer.question_id resolves to a question, and every
    Question.accepted_answer_id resolves to a surviving answer of that
    question; dangling references are cleared during build with a count.
    """

    questions: dict[int, Question]
    answers: dict[int, Answer]
    site_name: str = ""
    build_counts: CorpusBuildCounts = field(
        default_factory=CorpusBuildCounts, compare=False
    )

    def evaluable_question_ids(self) -> list[int]:
        """Questions with an owner-attributed accepted answer, in (time, id) order."""
        ids = [q.id for q in self.questions.values() if q.accepted_answer_id is not None]
        ids.sort(key=lambda qid: (self.questions[qid].creation_date, qid))
        return ids

    def accepted_answerer(self, question_id: int) -> int:
        aid = self.questions[question_id].accepted_answer_id
        if aid is None:
            raise KeyError(f"question {question_id} has no accepted answer")
        return self.answers[aid].owner_user_id

    def distinct_tags(self) -> set[str]:
        tags: set[str] = set()
        for q in self.questions.values():
            tags.update(q.tags)
        return tags

    def earliest_post_time(self) -> int:
        times = [q.creation_date for q in self.questions.values()]
        times.extend(a.creation_date for a in self.answers.values())
        if not times:
            raise ValueError("empty corpus has no earliest post time")
        return min(times)


def _parse_timestamp(value: str) -> int:
    # Dump timestamps are naive ISO-8601 in UTC; sub-second precision is
    # irrelevant at month-scale windowing and is truncated.
    text = value.strip()
    if text.endswith("Z"):
        text = text[:-1]
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _parse_tags(value: str) -> tuple[str, ...]:
    # Attribute arrives XML-unescaped from expat; some dumps double-escape,
    # so unescape once more before splitting <tag1><tag2> groups.
    text = html.unescape(value)
    seen: list[str] = []
    for tag in _TAG_RE.findall(text):
        tag = tag.strip().lower()
        if tag and tag not in seen:
            seen.append(tag)
    return tuple(seen)


def _optional_positive_int(value: str | None) -> int | None:
    if value is None:
        return None
    try:
        number = int(value)
    except ValueError:
        return None
    return number if number > 0 else None


def _row_to_post(attrs: dict[str, str], stats: ParseStats) -> RawPost | None:
    stats.rows_seen += 1
    for name in _REQUIRED_ATTRS:
        if name not in attrs:
            stats.rejected_rows += 1
            return None
    try:
        post_id = int(attrs["Id"])
        post_type = int(attrs["PostTypeId"])
        score = int(attrs["Score"])
        creation = _parse_timestamp(attrs["CreationDate"])
    except ValueError:
        stats.rejected_rows += 1
        return None
    if post_id <= 0:
        stats.rejected_rows += 1
        return None
    if post_type not in (QUESTION_TYPE, ANSWER_TYPE):
        stats.skipped_other_type += 1
        return None

    owner = _optional_positive_int(attrs.get("OwnerUserId"))
    if post_type == QUESTION_TYPE:
        tags = _parse_tags(attrs["Tags"]) if "Tags" in attrs else None
        if tags is not None and len(tags) > MAX_TAGS:
            # The platform caps questions at five tags; a longer list means
            # a corrupt row rather than valid data.
            stats.rejected_rows += 1
            return None
        stats.questions += 1
        return RawPost(
            id=post_id,
            post_type=post_type,
            creation_date=creation,
            score=score,
            owner_user_id=owner,
            tags=tags if tags else None,
            accepted_answer_id=_optional_positive_int(attrs.get("AcceptedAnswerId")),
        )
    stats.answers += 1
    return RawPost(
        id=post_id,
        post_type=post_type,
        creation_date=creation,
        score=score,
        owner_user_id=owner,
        parent_id=_optional_positive_int(attrs.get("ParentId")),
    )


def parse_posts(
    stream: BinaryIO,
    stats: ParseStats | None = None,
    chunk_size: int = _CHUNK_SIZE,
) -> Iterator[RawPost]:
    """Stream question/answer rows out of a Posts.xml byte stream.

    Memory use is bounded by the rows contained in a single read chunk, not
    by file size. Rows missing a required attribute are dropped with a
    logged count; malformed XML raises DumpParseError with a byte offset.
    """
    if stats is None:
        stats = ParseStats()
    parser = xml.parsers.expat.ParserCreate()
    pending: list[RawPost] = []

    def handle_start(name: str, attrs: dict[str, str]) -> None:
        if name != "row":
            return
        post = _row_to_post(attrs, stats)
        if post is not None:
            pending.append(post)

    parser.StartElementHandler = handle_start
    while True:
        chunk = stream.read(chunk_size)
        if not chunk:
            break
        try:
            parser.Parse(chunk, False)
        except xml.parsers.expat.ExpatError as exc:
            raise DumpParseError(str(exc), byte_offset=parser.ErrorByteIndex) from exc
        if pending:
            yield from pending
            pending.clear()
    try:
        parser.Parse(b"", True)
    except xml.parsers.expat.ExpatError as exc:
        raise DumpParseError(str(exc), byte_offset=parser.ErrorByteIndex) from exc
    yield from pending
    if stats.rejected_rows:
        logger.warning("rejected %d malformed rows during parse", stats.rejected_rows)


def build_corpus(posts: Iterable[RawPost], site_name: str = "") -> PostCorpus:
    """Assemble a referentially consistent corpus from raw posts.

    Answers without a resolvable parent question, without an owner, or dated
    before their question are dropped and counted. Accepted-answer references
    to dropped answers are cleared. Untagged questions are retained (they are
    never scorable) and counted.
    """
    counts = CorpusBuildCounts()
    questions: dict[int, Question] = {}
    raw_answers: list[RawPost] = []
    seen_ids: set[int] = set()

    for post in posts:
        if post.id in seen_ids:
            counts.duplicate_ids += 1
            continue
        seen_ids.add(post.id)
        if post.is_question:
            questions[post.id] = Question(
                id=post.id,
                creation_date=post.creation_date,
                tags=post.tags or (),
                accepted_answer_id=post.accepted_answer_id,
                asker_id=post.owner_user_id,
            )
        else:
            raw_answers.append(post)

    answers: dict[int, Answer] = {}
    for post in raw_answers:
        if post.parent_id is None or post.parent_id not in questions:
            counts.answers_missing_parent += 1
            continue
        if post.owner_user_id is None:
            counts.answers_without_owner += 1
            continue
        if post.creation_date < questions[post.parent_id].creation_date:
            counts.answers_before_question += 1
            continue
        answers[post.id] = Answer(
            id=post.id,
            question_id=post.parent_id,
            owner_user_id=post.owner_user_id,
            creation_date=post.creation_date,
            score=post.score,
        )

    for qid, question in list(questions.items()):
        aid = question.accepted_answer_id
        if aid is not None and (aid not in answers or answers[aid].question_id != qid):
            questions[qid] = replace(question, accepted_answer_id=None)
            counts.accepted_refs_cleared += 1
        if not question.tags:
            counts.untagged_questions += 1

    dropped = counts.total_dropped_answers()
    if dropped or counts.accepted_refs_cleared:
        logger.info(
            "corpus build dropped %d answers and cleared %d accepted references",
            dropped,
            counts.accepted_refs_cleared,
        )
    return PostCorpus(
        questions=questions,
        answers=answers,
        site_name=site_name,
        build_counts=counts,
    )


def _question_record(question: Question) -> dict:
    return {
        "kind": "q",
        "id": question.id,
        "creation_date": question.creation_date,
        "tags": list(question.tags),
        "accepted_answer_id": question.accepted_answer_id,
        "asker_id": question.asker_id,
    }


def _answer_record(answer: Answer) -> dict:
    return {
        "kind": "a",
        "id": answer.id,
        "question_id": answer.question_id,
        "owner_user_id": answer.owner_user_id,
        "creation_date": answer.creation_date,
        "score": answer.score,
    }


def corpus_to_jsonl(corpus: PostCorpus) -> bytes:
    """Serialize to the newline-delimited JSON corpus format (bit-stable)."""
    lines = [
        json.dumps(
            {
                "kind": "meta",
                "format": CORPUS_FORMAT_VERSION,
                "site_name": corpus.site_name,
            },
            separators=(",", ":"),
        )
    ]
    for qid in sorted(corpus.questions):
        lines.append(json.dumps(_question_record(corpus.questions[qid]), separators=(",", ":")))
    for aid in sorted(corpus.answers):
        lines.append(json.dumps(_answer_record(corpus.answers[aid]), separators=(",", ":")))
    return ("\n".join(lines) + "\n").encode("utf-8")


def save_corpus(corpus: PostCorpus, path: str | Path) -> None:
    Path(path).write_bytes(corpus_to_jsonl(corpus))


def load_corpus(path: str | Path) -> PostCorpus:
    """Read a corpus file written by save_corpus."""
    questions: dict[int, Question] = {}
    answers: dict[int, Answer] = {}
    site_name = ""
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{line_no}: invalid JSON") from exc
            kind = record.get("kind")
            if kind == "meta":
                if record.get("format") != CORPUS_FORMAT_VERSION:
                    raise CorpusFormatError(
                        f"{path}: unsupported corpus format {record.get('format')!r}"
                    )
                site_name = record.get("site_name", "")
            elif kind == "q":
                question = Question(
                    id=record["id"],
                    creation_date=record["creation_date"],
                    tags=tuple(record["tags"]),
                    accepted_answer_id=record["accepted_answer_id"],
                    asker_id=record["asker_id"],
                )
                questions[question.id] = question
            elif kind == "a":
                answer = Answer(
                    id=record["id"],
                    question_id=record["question_id"],
                    owner_user_id=record["owner_user_id"],
                    creation_date=record["creation_date"],
                    score=record["score"],
                )
                answers[answer.id] = answer
            else:
                raise CorpusFormatError(f"{path}:{line_no}: unknown record kind {kind!r}")
    return PostCorpus(questions=questions, answers=answers, site_name=site_name)
