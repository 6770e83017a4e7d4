"""Synthetic conversations with known ground truth.

Random numbers come from numpy's PCG64 bit generator seeded with
``SimConfig.seed`` (``numpy.random.Generator(numpy.random.PCG64(seed))``),
and draws are made in a fixed order, so a seed fully determines every
output.  Generator version: 1.

Times are quantized to the 10 ms frame grid, which makes the VAD score
stream binarize back to the reference speech exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from diarkit.embeddings import EmbeddingSequence, l2_normalize, uniform_segments, write_embeddings_file
from diarkit.frame_scores import FrameScoreStream, timeline_to_stream, write_scores_file
from diarkit.timeline import (
    Annotation,
    Timeline,
    overlap_regions,
    support,
    timeline_to_annotation,
    to_ticks,
    write_rttm_file,
)

GENERATOR_VERSION = 1
MAX_SPEAKERS = 30
MAX_CENTROID_COS = 0.3
_GRID = 100  # ticks, 10 ms


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    n_speakers: int = 3
    duration: float = 120.0
    turn_len: tuple[float, float] = (1.5, 6.0)
    pause_len: tuple[float, float] = (0.2, 1.0)
    overlap_prob: float = 0.1
    overlap_len: tuple[float, float] = (0.3, 1.2)
    embedding_dim: int = 64
    within_noise: float = 0.04
    score_noise: float = 0.0
    window: float = 1.28
    shift: float = 0.32
    frame_shift: float = 0.01

    def __post_init__(self):
        if not 1 <= self.n_speakers <= MAX_SPEAKERS:
            raise SimulationError(f"n_speakers must be in 1..{MAX_SPEAKERS}")
        for name in ("turn_len", "pause_len", "overlap_len"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise SimulationError(f"{name} must satisfy 0 <= min <= max")
        if self.turn_len[0] <= 0:
            raise SimulationError("turns must have positive length")
        if not 0.0 <= self.overlap_prob <= 1.0:
            raise SimulationError("overlap_prob must be in [0, 1]")
        if self.embedding_dim <= 0 or self.within_noise < 0 or self.score_noise < 0:
            raise SimulationError("embedding_dim must be positive and noise scales non-negative")


class Simulation(NamedTuple):
    ref: Annotation
    speech: Timeline
    osd: Timeline
    vad_scores: FrameScoreStream
    seq: EmbeddingSequence


def noise_for_cosine(target: float, dim: int) -> float:
    """Per-dimension noise scale giving an expected within-speaker cosine
    of about ``target``: two noisy copies of a unit vector have cosine
    close to ``1 / (1 + dim * sigma**2)``.

    Within-speaker similarity stays above the ``MAX_CENTROID_COS`` bound
    on between-speaker similarity as long as ``dim * sigma**2 < 2``.
    """
    if not 0.0 < target <= 1.0:
        raise ValueError("target cosine must be in (0, 1]")
    return math.sqrt((1.0 / target - 1.0) / dim)


def _draw_centroids(rng: np.random.Generator, n: int, dim: int, attempts: int = 1000) -> np.ndarray:
    out = []
    for k in range(n):
        for _ in range(attempts):
            v = rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            if all(abs(v @ u) < MAX_CENTROID_COS for u in out):
                out.append(v)
                break
        else:
            raise SimulationError(
                f"could not place speaker {k + 1} of {n} in {dim} dims with |cos| < {MAX_CENTROID_COS}"
            )
    return np.array(out)


def _quantize(rng: np.random.Generator, lo: float, hi: float) -> int:
    return int(round(rng.uniform(lo, hi) * 10_000 / _GRID)) * _GRID


def _draw_turns(rng: np.random.Generator, cfg: SimConfig) -> list[tuple[int, int, int]]:
    end_of_audio = to_ticks(cfg.duration)
    turns = []
    t = _quantize(rng, *cfg.pause_len)
    prev_spk, prev_len = -1, 0
    while True:
        if cfg.n_speakers == 1:
            spk = 0
        else:
            spk = int(rng.integers(cfg.n_speakers - 1))
            if prev_spk >= 0 and spk >= prev_spk:
                spk += 1
        length = max(_quantize(rng, *cfg.turn_len), _GRID)
        overlapped = rng.random() < cfg.overlap_prob
        pause = _quantize(rng, *cfg.pause_len)
        ov = _quantize(rng, *cfg.overlap_len)
        if overlapped and turns and cfg.n_speakers > 1:
            # keep overlaps shorter than half of either turn
            ov = min(ov, (min(prev_len, length) // 2) // _GRID * _GRID)
            start = t - ov
        else:
            start = t + pause
        end = start + length
        if end > end_of_audio:
            return turns
        turns.append((spk, start, end))
        t = max(t, end)
        prev_spk, prev_len = spk, length


def generate(cfg: SimConfig) -> Simulation:
    """Draw one synthetic recording.

    Every window's embedding is the duration-weighted mix of the active
    speakers' centroids plus isotropic noise of scale ``within_noise``.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    centroids = _draw_centroids(rng, cfg.n_speakers, cfg.embedding_dim)
    rec = f"sim{cfg.seed:05d}"
    turns = _draw_turns(rng, cfg)
    ref = Annotation.from_segments(rec, ((f"S{spk:02d}", s, e) for spk, s, e in turns))
    speech = support(ref)
    osd = overlap_regions(ref)

    n_frames = int(math.ceil(cfg.duration / cfg.frame_shift - 1e-9))
    base = timeline_to_stream(rec, speech, n_frames, cfg.frame_shift).scores
    noise = rng.standard_normal(n_frames) * cfg.score_noise
    vad = FrameScoreStream(rec, np.clip(base + noise, 0.0, 1.0), cfg.frame_shift)

    windows = uniform_segments(speech, cfg.window, cfg.shift)
    by_spk = [(int(lab[1:]), tl) for lab, tl in ref.speaker_timelines().items()]
    vectors = np.zeros((len(windows), cfg.embedding_dim))
    for i, (s, e) in enumerate(windows):
        mix = np.zeros(cfg.embedding_dim)
        for k, tl in by_spk:
            mix += tl.crop(s, e).duration_ticks * centroids[k]
        vectors[i] = l2_normalize(mix) + rng.standard_normal(cfg.embedding_dim) * cfg.within_noise
    iv = np.array(windows, dtype=np.int64).reshape(-1, 2)
    seq = EmbeddingSequence(rec, iv, vectors if len(windows) else np.zeros((0, cfg.embedding_dim)))
    return Simulation(ref, speech, osd, vad, seq)


def corpus(
    n_recordings: int,
    seed: int = 0,
    speakers: tuple[int, int] = (2, 5),
    **overrides,
) -> list[Simulation]:
    """Recordings with seeds ``seed, seed+1, ...``; speaker counts cycle
    through the inclusive ``speakers`` range."""
    lo, hi = speakers
    out = []
    for i in range(n_recordings):
        n_spk = lo + i % (hi - lo + 1)
        out.append(generate(SimConfig(seed=seed + i, n_speakers=n_spk, **overrides)))
    return out


def write_simulation(out_dir, sim: Simulation) -> dict[str, Path]:
    """Write one recording's artifacts; returns their paths by kind."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = sim.ref.recording_id
    paths = {
        "ref": out / f"{rec}.rttm",
        "speech": out / f"{rec}.speech.rttm",
        "osd": out / f"{rec}.osd.rttm",
        "vad_scores": out / f"{rec}.vad.scores",
        "osd_scores": out / f"{rec}.osd.scores",
        "embeddings": out / f"{rec}.emb",
    }
    write_rttm_file(paths["ref"], [sim.ref])
    write_rttm_file(paths["speech"], [timeline_to_annotation(rec, sim.speech, "speech")])
    write_rttm_file(paths["osd"], [timeline_to_annotation(rec, sim.osd, "overlap")])
    write_scores_file(paths["vad_scores"], sim.vad_scores)
    osd_stream = timeline_to_stream(rec, sim.osd, len(sim.vad_scores), sim.vad_scores.frame_shift)
    write_scores_file(paths["osd_scores"], osd_stream)
    write_embeddings_file(paths["embeddings"], sim.seq)
    return paths


def write_corpus(out_dir, sims: list[Simulation]) -> Path:
    """Write every recording plus a pipeline manifest; returns the manifest."""
    out = Path(out_dir)
    lines = []
    for sim in sims:
        p = write_simulation(out, sim)
        lines.append(
            "\t".join([
                sim.ref.recording_id,
                p["vad_scores"].name,
                p["embeddings"].name,
                p["osd_scores"].name,
                p["ref"].name,
            ]) + "\n"
        )
    manifest = out / "manifest.tsv"
    manifest.write_text("".join(lines), encoding="utf-8")
    return manifest
