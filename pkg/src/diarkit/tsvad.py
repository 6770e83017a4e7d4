"""Target-speaker VAD inference around a pluggable frame scorer.

Speaker profiles come from an initial diarization.  The recording is cut
into fixed-length chunks with a short stride, every chunk is scored for
every profile, and the overlapping chunk predictions are averaged back
onto one frame grid before thresholding.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from diarkit import kernels
from diarkit.embeddings import EmbeddingSequence, l2_normalize, write_embeddings_file
from diarkit.frame_scores import binarize_mask
from diarkit.timeline import Annotation, Timeline, overlap_regions, to_ticks

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 0.08
DEFAULT_CAPACITY = 30


@dataclass(frozen=True, eq=False)
class SpeakerProfileSet:
    recording_id: str
    labels: tuple[str, ...]
    vectors: np.ndarray
    capacity: int = DEFAULT_CAPACITY
    dropped: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.labels) > self.capacity:
            raise ValueError(f"{len(self.labels)} profiles exceed capacity {self.capacity}")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("profile labels must be unique")
        vec = np.asarray(self.vectors, dtype=np.float64)
        if len(self.labels):
            vec = l2_normalize(vec.reshape(len(self.labels), -1))
        else:
            vec = vec.reshape(0, vec.shape[-1] if vec.ndim == 2 else 0)
        object.__setattr__(self, "vectors", vec)

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True, eq=False)
class ActivityMatrix:
    recording_id: str
    labels: tuple[str, ...]
    scores: np.ndarray  # [n_speakers, n_frames]
    weight: np.ndarray  # chunks contributing to each cell
    resolution: float = DEFAULT_RESOLUTION

    @property
    def n_frames(self) -> int:
        return self.scores.shape[1]


class FrameScorer(Protocol):
    """Scores every profile on every frame overlapping a chunk.

    Frames are global: frame ``f`` spans ``[f*res, (f+1)*res)``.  The
    returned block is ``[n_profiles, f1 - f0]`` for the frames
    ``f0 = floor(start/res)`` up to ``f1 = ceil(end/res)`` of the chunk.
    """

    def __call__(
        self,
        chunk: tuple[int, int],
        seq: EmbeddingSequence,
        profiles: SpeakerProfileSet,
        resolution: float,
    ) -> np.ndarray: ...


def chunk_frames(chunk: tuple[int, int], resolution: float) -> tuple[int, int]:
    res = to_ticks(resolution)
    return chunk[0] // res, -(-chunk[1] // res)


class CosineScorer:
    """Training-free scorer: ``(1 + cos(profile, embedding)) / 2``.

    The embedding at a frame is the covering window whose center is
    nearest to the frame center; frames with no covering window score 0.
    Orthogonal profiles land at 0.5, so the decision threshold used with
    this scorer sits at a cosine of 0.4.
    """

    decision_threshold = 0.7

    def __call__(self, chunk, seq, profiles, resolution):
        f0, f1 = chunk_frames(chunk, resolution)
        res = to_ticks(resolution)
        out = np.zeros((len(profiles), f1 - f0))
        if len(seq) == 0 or len(profiles) == 0:
            return out
        # doubled tick coordinates keep centers integral
        t = (2 * np.arange(f0, f1) + 1) * res
        starts = 2 * seq.intervals[:, 0]
        ends = 2 * seq.intervals[:, 1]
        covers = (starts[None, :] <= t[:, None]) & (t[:, None] < ends[None, :])
        dist = np.where(covers, np.abs((starts + ends)[None, :] // 2 - t[:, None]), np.iinfo(np.int64).max)
        nearest = np.argmin(dist, axis=1)
        has = covers.any(axis=1)
        cos = seq.vectors[nearest] @ profiles.vectors.T
        out[:, has] = np.clip((1.0 + cos[has].T) / 2.0, 0.0, 1.0)
        return out


class ExternalScorer:
    """Reads score blocks produced by an out-of-process scorer.

    Blocks are looked up in ``score_dir`` under :func:`block_filename`;
    see :func:`write_chunk_requests` for the matching request side.
    """

    def __init__(self, score_dir, decision_threshold: float = 0.5):
        self.score_dir = Path(score_dir)
        self.decision_threshold = decision_threshold

    def __call__(self, chunk, seq, profiles, resolution):
        path = self.score_dir / block_filename(profiles.recording_id, chunk)
        labels, block, res = read_block_file(path)
        if tuple(labels) != tuple(profiles.labels):
            raise ValueError(f"{path}: speaker order {labels} does not match profiles {profiles.labels}")
        f0, f1 = chunk_frames(chunk, resolution)
        if abs(res - resolution) > 1e-9 or block.shape[1] != f1 - f0:
            raise ValueError(f"{path}: expected {f1 - f0} frames at {resolution} s, got {block.shape[1]} at {res}")
        return block


@dataclass(frozen=True)
class TsvadConfig:
    chunk_len: float = 16.0
    stride: float = 1.0
    resolution: float = DEFAULT_RESOLUTION
    capacity: int = DEFAULT_CAPACITY
    threshold: float | None = None  # None: the scorer's own decision_threshold
    min_on: float = 0.16
    min_off: float = 0.16


def extract_profiles(diar: Annotation, seq: EmbeddingSequence, capacity: int = DEFAULT_CAPACITY) -> SpeakerProfileSet:
    """One profile per speaker from the windows it alone occupies.

    A window belongs to the speaker whose non-overlapped speech contains
    the window's midpoint.  Speakers are ranked by total speech; beyond
    ``capacity`` the shortest ones are dropped and listed in ``dropped``.
    """
    if capacity <= 0:
        raise ValueError("capacity must be positive")
    overlap = overlap_regions(diar)
    total = {}
    vecs = {}
    mids2 = seq.intervals.sum(axis=1)
    for spk, tl in diar.speaker_timelines().items():
        total[spk] = tl.duration_ticks
        clean = tl.subtract(overlap)
        if not clean or len(seq) == 0:
            continue
        iv = np.array(clean.intervals, dtype=np.int64)
        idx = np.searchsorted(2 * iv[:, 0], mids2, side="right") - 1
        inside = (idx >= 0) & (mids2 < 2 * iv[np.maximum(idx, 0), 1])
        if inside.any():
            vecs[spk] = l2_normalize(seq.vectors[inside].mean(axis=0))
    missing = sorted(set(total) - set(vecs))
    if missing:
        logger.warning("%s: no embedding windows for speakers %s; dropped", diar.recording_id, missing)
    ranked = sorted(vecs, key=lambda s: (-total[s], s))
    keep, drop = ranked[:capacity], ranked[capacity:]
    if drop:
        logger.warning("%s: %d speakers exceed capacity %d; dropped %s", diar.recording_id, len(ranked), capacity, drop)
    dim = seq.dim if len(seq) else 0
    vectors = np.array([vecs[s] for s in keep]) if keep else np.zeros((0, dim))
    return SpeakerProfileSet(diar.recording_id, tuple(keep), vectors, capacity, tuple(drop) + tuple(missing))


def chunk_spans(total: float, chunk_len: float, stride: float) -> list[tuple[int, int]]:
    """Chunks ``[k*stride, k*stride + chunk_len)`` clipped to ``total``.

    Chunking stops with the first chunk that reaches the end, so audio no
    longer than ``chunk_len`` yields exactly one chunk.
    """
    T, L, S = to_ticks(total), to_ticks(chunk_len), to_ticks(stride)
    if L <= 0 or S <= 0:
        raise ValueError("chunk_len and stride must be positive")
    if T <= 0:
        return []
    spans = []
    start = 0
    while True:
        spans.append((start, min(start + L, T)))
        if start + L >= T:
            return spans
        start += S


def stitch(
    chunks: Sequence[tuple[tuple[int, int], np.ndarray]],
    labels: Sequence[str],
    resolution: float = DEFAULT_RESOLUTION,
    recording_id: str = "",
) -> ActivityMatrix:
    """Average overlapping chunk predictions frame by frame.

    Sums and coverage counts are accumulated separately and divided once;
    chunks are accumulated in (start, end) order so the result does not
    depend on the order they were produced in.  Frames no chunk covers get
    score 0 and weight 0.
    """
    n_spk = len(labels)
    items = sorted(chunks, key=lambda c: (c[0][0], c[0][1]))
    placed = []
    for span, block in items:
        block = np.asarray(block, dtype=np.float64)
        f0, f1 = chunk_frames(span, resolution)
        if block.ndim != 2 or block.shape[0] != n_spk:
            raise ValueError(f"block of shape {block.shape} for {n_spk} speakers")
        if block.shape[1] != f1 - f0:
            raise ValueError(f"chunk {span} needs {f1 - f0} frames, block has {block.shape[1]}")
        placed.append((f0, block))
    n_frames = max((f0 + b.shape[1] for f0, b in placed), default=0)
    sums = np.zeros((n_spk, n_frames))
    counts = np.zeros(n_frames, dtype=np.int64)
    if placed:
        starts = np.array([f0 for f0, _ in placed], dtype=np.int64)
        widths = np.array([b.shape[1] for _, b in placed], dtype=np.int64)
        offsets = np.concatenate(([0], np.cumsum(widths)[:-1])).astype(np.int64)
        blocks = np.ascontiguousarray(np.concatenate([b for _, b in placed], axis=1))
        kernels.accumulate(sums, counts, starts, offsets, widths, blocks)
    scores = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    weight = np.broadcast_to(counts, (n_spk, n_frames)).astype(np.float64)
    return ActivityMatrix(recording_id, tuple(labels), np.clip(scores, 0.0, 1.0), weight, resolution)


def activities_to_annotation(
    act: ActivityMatrix, threshold: float = 0.5, min_on: float = 0.16, min_off: float = 0.16
) -> Annotation:
    """Threshold each speaker's stitched scores into turns."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    res = to_ticks(act.resolution)
    segments = []
    for spk, row in zip(act.labels, act.scores):
        for s, e in binarize_mask(row, act.resolution, threshold, threshold, min_on, min_off):
            segments.append((spk, int(s) * res, int(e) * res))
    return Annotation.from_segments(act.recording_id, segments)


def diarize_tsvad(
    speech: Timeline,
    seq: EmbeddingSequence,
    init_diar: Annotation,
    scorer: FrameScorer,
    cfg: TsvadConfig | None = None,
) -> Annotation:
    """Refine an initial diarization with target-speaker scoring.

    Output is restricted to ``speech``.
    """
    cfg = cfg or TsvadConfig()
    rec = init_diar.recording_id
    profiles = extract_profiles(init_diar, seq, cfg.capacity)
    if not speech or len(profiles) == 0:
        return Annotation(rec)
    total = speech.extent[1] / 10_000
    blocks = []
    for span in chunk_spans(total, cfg.chunk_len, cfg.stride):
        blocks.append((span, scorer(span, seq.restrict(*span), profiles, cfg.resolution)))
    act = stitch(blocks, profiles.labels, cfg.resolution, rec)
    threshold = cfg.threshold
    if threshold is None:
        threshold = getattr(scorer, "decision_threshold", 0.5)
    ann = activities_to_annotation(act, threshold, cfg.min_on, cfg.min_off)
    return ann.crop(speech)


# ----------------------------------------------------------------------------
# file contract for external scorers


def block_filename(recording_id: str, chunk: tuple[int, int]) -> str:
    return f"{recording_id}_{chunk[0] // 10:08d}_{chunk[1] // 10:08d}.scores"


def format_block(recording_id: str, labels: Sequence[str], block: np.ndarray, resolution: float) -> str:
    """FRAMESCORES header extended with a speaker count, then the speaker
    labels, then one line of per-speaker scores per frame."""
    block = np.asarray(block)
    lines = [
        f"FRAMESCORES {recording_id} {resolution:g} {block.shape[1]} {len(labels)}",
        "SPEAKERS " + " ".join(labels),
    ]
    lines += [" ".join(f"{x:.6f}" for x in col) for col in block.T]
    return "\n".join(lines) + "\n"


def parse_block(text: str) -> tuple[list[str], np.ndarray, float]:
    lines = [x for x in text.splitlines() if x.strip()]
    head = lines[0].split()
    if len(head) != 5 or head[0] != "FRAMESCORES":
        raise ValueError(f"bad multi-speaker FRAMESCORES header {lines[0]!r}")
    res, n_frames, n_spk = float(head[2]), int(head[3]), int(head[4])
    spk_line = lines[1].split()
    if spk_line[0] != "SPEAKERS" or len(spk_line) - 1 != n_spk:
        raise ValueError("SPEAKERS line must list one label per speaker")
    rows = [[float(v) for v in x.split()] for x in lines[2:]]
    if len(rows) != n_frames or any(len(r) != n_spk for r in rows):
        raise ValueError(f"expected {n_frames} rows of {n_spk} scores")
    block = np.array(rows, dtype=np.float64).reshape(n_frames, n_spk).T
    return spk_line[1:], block, res


def read_block_file(path):
    return parse_block(Path(path).read_text(encoding="utf-8"))


def format_profiles(profiles: SpeakerProfileSet) -> str:
    return "".join(
        label + " " + " ".join(f"{x:.8f}" for x in vec) + "\n"
        for label, vec in zip(profiles.labels, profiles.vectors)
    )


def parse_profiles(text: str, recording_id: str, capacity: int = DEFAULT_CAPACITY) -> SpeakerProfileSet:
    rows = [x.split() for x in text.splitlines() if x.strip()]
    labels = tuple(r[0] for r in rows)
    vectors = np.array([[float(v) for v in r[1:]] for r in rows]) if rows else np.zeros((0, 0))
    return SpeakerProfileSet(recording_id, labels, vectors, capacity)


def write_chunk_requests(
    out_dir,
    speech: Timeline,
    seq: EmbeddingSequence,
    init_diar: Annotation,
    cfg: TsvadConfig,
) -> Path:
    """Emit profiles, per-chunk embeddings and a request list for an
    external scorer.  Returns the path of ``requests.tsv``.

    Each request line is ``recording start end profiles embeddings output``
    with times in seconds; the scorer must write ``output`` with
    :func:`format_block`.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = init_diar.recording_id
    profiles = extract_profiles(init_diar, seq, cfg.capacity)
    prof_path = out / f"{rec}.profiles"
    prof_path.write_text(format_profiles(profiles), encoding="utf-8")
    lines = []
    if speech:
        for span in chunk_spans(speech.extent[1] / 10_000, cfg.chunk_len, cfg.stride):
            emb_path = out / (block_filename(rec, span)[: -len(".scores")] + ".emb")
            write_embeddings_file(emb_path, seq.restrict(*span))
            lines.append(
                f"{rec}\t{span[0] / 10_000:.3f}\t{span[1] / 10_000:.3f}\t{prof_path.name}\t"
                f"{emb_path.name}\t{block_filename(rec, span)}\n"
            )
    req = out / "requests.tsv"
    with open(req, "a", encoding="utf-8") as f:
        f.writelines(lines)
    return req
