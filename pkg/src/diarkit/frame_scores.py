"""Frame-level VAD/OSD posteriors: fusion, binarization and error rates."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from diarkit import kernels
from diarkit.timeline import Timeline, to_ticks

logger = logging.getLogger(__name__)

DEFAULT_FRAME_SHIFT = 0.01


@dataclass(frozen=True, eq=False)
class FrameScoreStream:
    recording_id: str
    scores: np.ndarray
    frame_shift: float = DEFAULT_FRAME_SHIFT

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 1:
            raise ValueError("scores must be one-dimensional")
        if self.frame_shift <= 0:
            raise ValueError(f"frame_shift must be positive, got {self.frame_shift}")
        if scores.size and (scores.min() < 0.0 or scores.max() > 1.0 or np.isnan(scores).any()):
            raise ValueError("scores must lie in [0, 1]")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    def __len__(self):
        return self.scores.shape[0]

    def __eq__(self, other):
        if not isinstance(other, FrameScoreStream):
            return NotImplemented
        return (
            self.recording_id == other.recording_id
            and self.frame_shift == other.frame_shift
            and np.array_equal(self.scores, other.scores)
        )

    @property
    def shift_ticks(self) -> int:
        return to_ticks(self.frame_shift)


@dataclass(frozen=True)
class DetectionErrorReport:
    false_alarm_rate: float
    miss_rate: float
    reference_duration: float

    @property
    def total_rate(self) -> float:
        return self.false_alarm_rate + self.miss_rate


def fuse_streams(streams: Sequence[FrameScoreStream], weights: Sequence[float] | None = None) -> FrameScoreStream:
    """Weighted per-frame mean of several detectors' posteriors.

    Streams of unequal length are truncated to the shortest one.
    """
    if not streams:
        raise ValueError("need at least one stream to fuse")
    first = streams[0]
    for s in streams[1:]:
        if s.recording_id != first.recording_id:
            raise ValueError(f"recording mismatch: {s.recording_id!r} vs {first.recording_id!r}")
        if s.frame_shift != first.frame_shift:
            raise ValueError(f"frame shift mismatch: {s.frame_shift} vs {first.frame_shift}")
    if weights is None:
        w = np.full(len(streams), 1.0 / len(streams))
    else:
        if len(weights) != len(streams):
            raise ValueError(f"{len(weights)} weights for {len(streams)} streams")
        w = np.asarray(weights, dtype=np.float64)
        if (w <= 0).any():
            raise ValueError("weights must be positive")
        w = w / w.sum()
    n = min(len(s) for s in streams)
    if any(len(s) != n for s in streams):
        logger.warning(
            "%s: fusing streams of unequal length %s; truncating to %d frames",
            first.recording_id, [len(s) for s in streams], n,
        )
    # offsets from the first stream keep the mean exact when streams agree
    base = first.scores[:n]
    stacked = np.stack([s.scores[:n] - base for s in streams])
    fused = np.clip(base + w @ stacked, 0.0, 1.0)
    return FrameScoreStream(first.recording_id, fused, first.frame_shift)


def _runs(mask: np.ndarray) -> np.ndarray:
    """``[start, end)`` frame index pairs of the True runs of ``mask``."""
    padded = np.concatenate(([False], mask, [False])).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return edges.reshape(-1, 2)


def binarize_mask(
    scores: np.ndarray,
    frame_shift: float,
    onset_thr: float = 0.5,
    offset_thr: float = 0.5,
    min_on: float = 0.1,
    min_off: float = 0.1,
) -> np.ndarray:
    """Frame runs ``[[start, end), ...]`` after hysteresis and smoothing."""
    if onset_thr < offset_thr:
        raise ValueError(f"onset threshold {onset_thr} below offset threshold {offset_thr}")
    active = kernels.hysteresis(np.asarray(scores, dtype=np.float64), float(onset_thr), float(offset_thr))
    runs = _runs(active)
    if len(runs) == 0:
        return runs
    shift = to_ticks(frame_shift)
    # gap filling first, then short-region pruning
    gaps = (runs[1:, 0] - runs[:-1, 1]) * shift
    keep_gap = gaps >= to_ticks(min_off)
    starts = runs[np.concatenate(([True], keep_gap)), 0]
    ends = runs[np.concatenate((keep_gap, [True])), 1]
    runs = np.stack([starts, ends], axis=1)
    return runs[(runs[:, 1] - runs[:, 0]) * shift >= to_ticks(min_on)]


def binarize(
    stream: FrameScoreStream,
    onset_thr: float = 0.5,
    offset_thr: float = 0.5,
    min_on: float = 0.1,
    min_off: float = 0.1,
) -> Timeline:
    """Hysteresis binarization of a posterior stream into speech regions.

    Args:
        stream: posteriors in [0, 1].
        onset_thr: a region opens at the first frame scoring ``>= onset_thr``.
        offset_thr: it closes at the first frame scoring ``< offset_thr``.
        min_on: regions shorter than this (seconds) are dropped.
        min_off: gaps shorter than this (seconds) are filled.  Filling runs
            before pruning.

    Returns:
        Timeline whose boundaries lie on the frame grid.
    """
    runs = binarize_mask(stream.scores, stream.frame_shift, onset_thr, offset_thr, min_on, min_off)
    shift = stream.shift_ticks
    return Timeline(tuple((int(s) * shift, int(e) * shift) for s, e in runs))


def detection_errors(hyp: Timeline, ref: Timeline, scope: Timeline) -> DetectionErrorReport:
    """False-alarm and miss rates of a detector within ``scope``.

    Both rates are normalized by the scope duration, as in the usual
    VAD/OSD evaluation tables.
    """
    total = scope.duration_ticks
    if total == 0:
        raise ValueError("empty scoring scope")
    hyp_in = hyp.intersect(scope)
    ref_in = ref.intersect(scope)
    fa = hyp_in.subtract(ref_in).duration_ticks
    miss = ref_in.subtract(hyp_in).duration_ticks
    return DetectionErrorReport(fa / total, miss / total, scope.duration)


# ----------------------------------------------------------------------------
# FRAMESCORES files


def format_scores(stream: FrameScoreStream) -> str:
    head = f"FRAMESCORES {stream.recording_id} {stream.frame_shift:g} {len(stream)}\n"
    return head + "".join(f"{x:.6f}\n" for x in stream.scores)


def parse_scores(text: str) -> FrameScoreStream:
    lines = text.split("\n")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "FRAMESCORES":
        raise ValueError(f"bad FRAMESCORES header: {lines[0]!r}")
    rec, shift, n = head[1], float(head[2]), int(head[3])
    body = [x for x in lines[1:] if x.strip()]
    if len(body) != n:
        raise ValueError(f"{rec}: header announces {n} frames, found {len(body)}")
    return FrameScoreStream(rec, np.array([float(x) for x in body]), shift)


def write_scores_file(path, stream: FrameScoreStream) -> None:
    Path(path).write_text(format_scores(stream), encoding="utf-8")


def read_scores_file(path) -> FrameScoreStream:
    return parse_scores(Path(path).read_text(encoding="utf-8"))


def timeline_to_stream(recording_id: str, tl: Timeline, n_frames: int, frame_shift: float = DEFAULT_FRAME_SHIFT) -> FrameScoreStream:
    """Hard 0/1 stream with frame ``k`` active iff its start lies in ``tl``."""
    shift = to_ticks(frame_shift)
    scores = np.zeros(n_frames)
    for s, e in tl:
        a = -(-s // shift)
        b = -(-e // shift)
        scores[a:min(b, n_frames)] = 1.0
    return FrameScoreStream(recording_id, scores, frame_shift)
