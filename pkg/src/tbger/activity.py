"""Per-window user-tag activity matrices and their discounted aggregate."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import TrainingRecord

DEFAULT_WINDOW_SECONDS = 30 * 24 * 3600

SNAPSHOT_MAGIC = b"TBGRWACT"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<IIQqqII")  # M, N, window_length, origin, reference, delta, n_windows
_WINDOW_HEADER = struct.Struct("<IQ")  # ordinal, nnz
_TRIPLET_DTYPE = np.dtype([("row", "<u4"), ("col", "<u4"), ("value", "<f8")])


class SnapshotFormatError(ValueError):
    """Snapshot file is not a valid windowed-activity snapshot."""


@dataclass(frozen=True)
class SparseUserTagMatrix:
    """CSR user-tag matrix; stored entries are strictly positive and unique."""

    shape: tuple[int, int]
    csr: sp.csr_matrix

    @classmethod
    def from_entries(
        cls,
        shape: tuple[int, int],
        entries: Sequence[tuple[int, int, float]],
    ) -> "SparseUserTagMatrix":
        """Build from unique (row, col, value) triplets; zero values dropped."""
        kept = [(r, c, v) for r, c, v in entries if v != 0.0]
        if not kept:
            return cls(shape=shape, csr=sp.csr_matrix(shape, dtype=np.float64))
        rows = np.fromiter((e[0] for e in kept), dtype=np.int64, count=len(kept))
        cols = np.fromiter((e[1] for e in kept), dtype=np.int64, count=len(kept))
        vals = np.fromiter((e[2] for e in kept), dtype=np.float64, count=len(kept))
        matrix = sp.csr_matrix((vals, (rows, cols)), shape=shape)
        matrix.sort_indices()
        return cls(shape=shape, csr=matrix)

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "SparseUserTagMatrix":
        return cls(shape=shape, csr=sp.csr_matrix(shape, dtype=np.float64))

    @property
    def nnz(self) -> int:
        return int(self.csr.nnz)

    def entries(self) -> Iterable[tuple[int, int, float]]:
        """Yield (row, col, value) in ascending (row, col) order."""
        coo = self.csr.tocoo()
        order = np.lexsort((coo.col, coo.row))
        for i in order:
            yield int(coo.row[i]), int(coo.col[i]), float(coo.data[i])

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()

    def allclose(self, other: "SparseUserTagMatrix", rtol: float = 0.0, atol: float = 0.0) -> bool:
        if self.shape != other.shape:
            return False
        if rtol == 0.0 and atol == 0.0:
            return np.array_equal(self.toarray(), other.toarray())
        return np.allclose(self.toarray(), other.toarray(), rtol=rtol, atol=atol)


@dataclass(frozen=True)
class WindowedActivity:
    """Activity matrices grouped by windows counted backwards from reference_time.

    Ordinal 1 is the window immediately before the reference time; the
    window with ordinal d covers (reference - d*L, reference - (d-1)*L].
    """

    window_length: int
    reference_time: int
    origin: int
    shape: tuple[int, int]
    windows: tuple[tuple[int, SparseUserTagMatrix], ...]

    @property
    def window_count(self) -> int:
        """Highest ordinal with any activity (0 when empty)."""
        return max((ordinal for ordinal, _ in self.windows), default=0)


@dataclass(frozen=True)
class TemporalActivityMatrix:
    """Discount-weighted sum of the window matrices as of query_time."""

    matrix: SparseUserTagMatrix
    query_time: int


def activity_contribution(question_tag_count: int) -> float:
    """Per-tag activity credit for answering a question with that many tags."""
    if not 1 <= question_tag_count <= 5:
        raise ValueError(f"question tag count must be in 1..5, got {question_tag_count}")
    return 1.0 / question_tag_count


def hyperbolic_discount(window_ordinal: int) -> float:
    """Weight 1/(1+d) for activity d windows before the query time."""
    if window_ordinal < 1:
        raise ValueError(f"window ordinal must be >= 1, got {window_ordinal}")
    return 1.0 / (1.0 + window_ordinal)


def window_ordinal(answer_time: int, reference_time: int, window_length: int) -> int:
    """Window index for an answer, counting backwards from the reference."""
    if answer_time >= reference_time:
        raise ValueError(
            f"answer at {answer_time} is not before the reference time {reference_time}"
        )
    return (reference_time - answer_time) // window_length + 1


def _accumulate(contributions: list[tuple[int, int, float]]) -> list[tuple[int, int, float]]:
    # Accumulation order is pinned for bit-reproducibility: ascending
    # (row, col), input order within a cell (sorted() is stable).
    acc: dict[tuple[int, int], float] = {}
    for row, col, value in sorted(contributions, key=lambda e: (e[0], e[1])):
        key = (row, col)
        acc[key] = acc.get(key, 0.0) + value
    return [(r, c, v) for (r, c), v in acc.items()]


def build_windowed_activity(
    records: Iterable[TrainingRecord],
    window_length: int,
    reference_time: int,
    shape: tuple[int, int],
    origin: int,
) -> WindowedActivity:
    """Group record contributions into backward-counted windows.

    Each record credits 1/#tags to every tag of its question, added into the
    window holding the answer time. A record at or after the reference time
    is a contract violation and raises.
    """
    if window_length <= 0:
        raise ValueError(f"window length must be positive, got {window_length}")
    per_window: dict[int, list[tuple[int, int, float]]] = {}
    for record in records:
        ordinal = window_ordinal(record.answer_time, reference_time, window_length)
        credit = activity_contribution(len(record.tag_indices))
        bucket = per_window.setdefault(ordinal, [])
        for tag in record.tag_indices:
            bucket.append((record.answerer_index, tag, credit))
    windows = tuple(
        (ordinal, SparseUserTagMatrix.from_entries(shape, _accumulate(per_window[ordinal])))
        for ordinal in sorted(per_window)
    )
    return WindowedActivity(
        window_length=window_length,
        reference_time=reference_time,
        origin=origin,
        shape=shape,
        windows=windows,
    )


def _aggregate(
    windowed: WindowedActivity,
    query_time: int,
    weight: Callable[[int], float],
) -> SparseUserTagMatrix:
    offset = windowed.reference_time - query_time
    if offset % windowed.window_length != 0:
        raise ValueError(
            "query time must lie on the window grid of the windowed activity "
            f"(offset {offset}s is not a multiple of {windowed.window_length}s)"
        )
    shift = offset // windowed.window_length
    # Windows shift rigidly on the grid: ordinal d relative to the build
    # reference is ordinal d - shift relative to query_time. Ordinals <= 0
    # hold activity at or after query_time and are excluded.
    acc: dict[tuple[int, int], float] = {}
    for ordinal, matrix in windowed.windows:
        rebased = ordinal - shift
        if rebased < 1:
            continue
        w = weight(rebased)
        for row, col, value in matrix.entries():
            key = (row, col)
            acc[key] = acc.get(key, 0.0) + w * value
    return SparseUserTagMatrix.from_entries(
        windowed.shape, [(r, c, v) for (r, c), v in acc.items()]
    )


def temporal_activity(windowed: WindowedActivity, query_time: int) -> TemporalActivityMatrix:
    """Discount-weighted aggregate of the windows as of query_time.

    Summation runs over ascending window ordinals, then ascending (row, col)
    within a window, so results are bit-identical to a dense evaluation in
    the same order.
    """
    matrix = _aggregate(windowed, query_time, hyperbolic_discount)
    return TemporalActivityMatrix(matrix=matrix, query_time=query_time)


def undiscounted_activity(windowed: WindowedActivity, query_time: int) -> SparseUserTagMatrix:
    """Plain activity sums (no temporal weighting) up to query_time."""
    return _aggregate(windowed, query_time, lambda ordinal: 1.0)


def quantize_to_block_start(timestamp: int, origin: int, window_length: int) -> int:
    """Snap a time down to the start of its window-grid block."""
    if timestamp < origin:
        return origin
    return origin + ((timestamp - origin) // window_length) * window_length


def save_snapshot(windowed: WindowedActivity, path: str | Path) -> None:
    """Write the windowed activity as a versioned little-endian binary file."""
    with open(path, "wb") as handle:
        handle.write(SNAPSHOT_MAGIC)
        handle.write(bytes([SNAPSHOT_VERSION]))
        handle.write(
            _HEADER.pack(
                windowed.shape[0],
                windowed.shape[1],
                windowed.window_length,
                windowed.origin,
                windowed.reference_time,
                windowed.window_count,
                len(windowed.windows),
            )
        )
        for ordinal, matrix in windowed.windows:
            triplets = np.fromiter(
                matrix.entries(), dtype=_TRIPLET_DTYPE, count=matrix.nnz
            )
            handle.write(_WINDOW_HEADER.pack(ordinal, len(triplets)))
            handle.write(triplets.tobytes())


def load_snapshot(path: str | Path) -> WindowedActivity:
    data = Path(path).read_bytes()
    if len(data) < len(SNAPSHOT_MAGIC) + 1 + _HEADER.size:
        raise SnapshotFormatError(f"{path}: truncated snapshot")
    if data[: len(SNAPSHOT_MAGIC)] != SNAPSHOT_MAGIC:
        raise SnapshotFormatError(f"{path}: bad magic, not a windowed-activity snapshot")
    version = data[len(SNAPSHOT_MAGIC)]
    if version != SNAPSHOT_VERSION:
        raise SnapshotFormatError(f"{path}: unsupported snapshot version {version}")
    cursor = len(SNAPSHOT_MAGIC) + 1
    m, n, window_length, origin, reference, _delta, n_windows = _HEADER.unpack_from(
        data, cursor
    )
    cursor += _HEADER.size
    windows: list[tuple[int, SparseUserTagMatrix]] = []
    for _ in range(n_windows):
        ordinal, nnz = _WINDOW_HEADER.unpack_from(data, cursor)
        cursor += _WINDOW_HEADER.size
        triplets = np.frombuffer(data, dtype=_TRIPLET_DTYPE, count=nnz, offset=cursor)
        cursor += nnz * _TRIPLET_DTYPE.itemsize
        entries = [
            (int(t["row"]), int(t["col"]), float(t["value"])) for t in triplets
        ]
        windows.append((ordinal, SparseUserTagMatrix.from_entries((m, n), entries)))
    return WindowedActivity(
        window_length=window_length,
        reference_time=reference,
        origin=origin,
        shape=(m, n),
        windows=tuple(windows),
    )
