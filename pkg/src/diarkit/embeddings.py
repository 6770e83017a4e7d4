"""Sliding-window segmentation, embedding files and cosine similarities."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from diarkit.timeline import Timeline, to_seconds, to_ticks

MAGIC = b"EMBD"
VERSION = 1


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot normalize a zero vector")
    return x / norm


@dataclass(frozen=True, eq=False)
class EmbeddingSequence:
    """Unit-norm embeddings tied to ``[start, end)`` tick intervals.

    Entries are kept sorted by onset (stable).  Vectors are L2-normalized
    on construction so that dot products are cosines.
    """

    recording_id: str
    intervals: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        iv = np.asarray(self.intervals, dtype=np.int64).reshape(-1, 2)
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.ndim != 2 or vec.shape[0] != iv.shape[0]:
            raise ValueError(f"{iv.shape[0]} intervals but vectors of shape {vec.shape}")
        if (iv[:, 1] <= iv[:, 0]).any():
            raise ValueError("embedding intervals must have positive duration")
        if vec.shape[0]:
            vec = l2_normalize(vec)
        order = np.argsort(iv[:, 0], kind="stable")
        iv, vec = iv[order], vec[order]
        iv.setflags(write=False)
        vec.setflags(write=False)
        object.__setattr__(self, "intervals", iv)
        object.__setattr__(self, "vectors", vec)

    def __len__(self):
        return self.intervals.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def centers(self) -> np.ndarray:
        return self.intervals.sum(axis=1) / 2.0

    def select(self, mask_or_index) -> "EmbeddingSequence":
        return EmbeddingSequence(self.recording_id, self.intervals[mask_or_index], self.vectors[mask_or_index])

    def restrict(self, start: int, end: int) -> "EmbeddingSequence":
        """Entries overlapping ``[start, end)``."""
        keep = (self.intervals[:, 0] < end) & (self.intervals[:, 1] > start)
        return self.select(keep)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingSequence):
            return NotImplemented
        return (
            self.recording_id == other.recording_id
            and np.array_equal(self.intervals, other.intervals)
            and np.array_equal(self.vectors, other.vectors)
        )


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"similarity matrix must be square, got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]


def uniform_segments(speech: Timeline, window: float = 1.28, shift: float = 0.32) -> list[tuple[int, int]]:
    """Cut speech regions into overlapping fixed-length windows.

    Regions shorter than ``window`` become a single segment.  Otherwise
    full windows start every ``shift`` while they fit, so the tail left
    uncovered is always shorter than ``shift``; no partial window is added.
    """
    win = to_ticks(window)
    hop = to_ticks(shift)
    if win <= 0 or hop <= 0:
        raise ValueError("window and shift must be positive")
    if hop > win:
        raise ValueError(f"shift {shift} exceeds window {window}")
    out = []
    for s, e in speech:
        if e - s <= win:
            out.append((s, e))
            continue
        n_full = (e - s - win) // hop + 1
        out.extend((s + k * hop, s + k * hop + win) for k in range(n_full))
    return out


def cosine_matrix(seq: EmbeddingSequence) -> SimilarityMatrix:
    if len(seq) == 0:
        raise ValueError("cannot build a similarity matrix from an empty sequence")
    v = seq.vectors
    sim = v @ v.T
    sim = np.clip((sim + sim.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(sim, 1.0)
    return SimilarityMatrix(sim)


def merge_groups(
    seq: EmbeddingSequence, sim: SimilarityMatrix, segment_thr: float, max_gap: float = 0.0
) -> np.ndarray:
    """Group index per entry from one greedy left-to-right merging pass.

    The next segment joins the running group when it is adjacent in time
    (gap ``<= max_gap`` seconds, overlaps count as adjacent) and its cosine
    to the group's normalized mean vector is strictly above
    ``segment_thr``.
    """
    n = len(seq)
    if sim.n != n:
        raise ValueError(f"similarity matrix is {sim.n}x{sim.n} for {n} segments")
    groups = np.zeros(n, dtype=np.int64)
    if n == 0:
        return groups
    gap_ticks = to_ticks(max_gap)
    vec = seq.vectors
    iv = seq.intervals
    g = 0
    first = 0
    total = vec[0].copy()
    group_end = iv[0, 1]
    for i in range(1, n):
        if i - first == 1:
            score = sim.values[first, i]
        else:
            score = float(total @ vec[i]) / float(np.linalg.norm(total))
        if iv[i, 0] - group_end <= gap_ticks and score > segment_thr:
            total += vec[i]
            group_end = max(group_end, iv[i, 1])
        else:
            g += 1
            first = i
            total = vec[i].copy()
            group_end = iv[i, 1]
        groups[i] = g
    return groups


def pool_groups(seq: EmbeddingSequence, groups: np.ndarray) -> EmbeddingSequence:
    """One entry per group: hull interval, normalized mean vector."""
    n_groups = int(groups.max()) + 1 if len(groups) else 0
    iv = np.zeros((n_groups, 2), dtype=np.int64)
    vec = np.zeros((n_groups, seq.dim if len(seq) else 0))
    for g in range(n_groups):
        members = groups == g
        iv[g, 0] = seq.intervals[members, 0].min()
        iv[g, 1] = seq.intervals[members, 1].max()
        vec[g] = seq.vectors[members].mean(axis=0)
    return EmbeddingSequence(seq.recording_id, iv, vec)


def merge_consecutive(
    seq: EmbeddingSequence, sim: SimilarityMatrix, segment_thr: float, max_gap: float = 0.0
) -> EmbeddingSequence:
    """Merge runs of consecutive, similar segments into longer ones."""
    return pool_groups(seq, merge_groups(seq, sim, segment_thr, max_gap))


# ----------------------------------------------------------------------------
# embedding files


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("onset", "<f8"), ("duration", "<f8"), ("vector", "<f4", (dim,))])


def encode_embeddings(seq: EmbeddingSequence) -> bytes:
    dim = seq.dim if len(seq) else 0
    rec = np.zeros(len(seq), dtype=_record_dtype(dim))
    rec["onset"] = seq.intervals[:, 0] / 10_000
    rec["duration"] = (seq.intervals[:, 1] - seq.intervals[:, 0]) / 10_000
    if dim:
        rec["vector"] = seq.vectors
    return MAGIC + struct.pack("<III", VERSION, dim, len(seq)) + rec.tobytes()


def decode_embeddings(data: bytes, recording_id: str) -> EmbeddingSequence:
    if data[:4] != MAGIC:
        return _decode_text(data.decode("utf-8"), recording_id)
    version, dim, count = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported embedding file version {version}")
    rec = np.frombuffer(data, dtype=_record_dtype(dim), count=count, offset=16)
    onset = np.round(rec["onset"] * 10_000).astype(np.int64)
    dur = np.round(rec["duration"] * 10_000).astype(np.int64)
    vec = rec["vector"].astype(np.float64).reshape(count, dim)
    return EmbeddingSequence(recording_id, np.stack([onset, onset + dur], axis=1), vec)


def _decode_text(text: str, recording_id: str) -> EmbeddingSequence:
    rows = [line.split() for line in text.splitlines() if line.strip() and not line.startswith("#")]
    if not rows:
        return EmbeddingSequence(recording_id, np.zeros((0, 2)), np.zeros((0, 1)))
    dims = {len(r) - 2 for r in rows}
    if len(dims) != 1 or min(dims) < 1:
        raise ValueError("text embedding rows must all be 'onset duration v1 ... vD'")
    arr = np.array(rows, dtype=np.float64)
    onset = np.round(arr[:, 0] * 10_000).astype(np.int64)
    dur = np.round(arr[:, 1] * 10_000).astype(np.int64)
    return EmbeddingSequence(recording_id, np.stack([onset, onset + dur], axis=1), arr[:, 2:])


def write_embeddings_file(path, seq: EmbeddingSequence) -> None:
    Path(path).write_bytes(encode_embeddings(seq))


def read_embeddings_file(path, recording_id: str | None = None) -> EmbeddingSequence:
    path = Path(path)
    return decode_embeddings(path.read_bytes(), recording_id or path.name.split(".")[0])


def format_segments(recording_id: str, segments: list[tuple[int, int]]) -> str:
    """Segment list for an external embedding extractor, one per line."""
    return "".join(f"{recording_id} {to_seconds(s):.3f} {to_seconds(e):.3f}\n" for s, e in segments)
