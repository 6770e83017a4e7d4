import numpy as np
import pytest

from diarkit import simgen
from diarkit.ahc import AHC1, diarize_ahc
from diarkit.embeddings import read_embeddings_file
from diarkit.metrics import ScoringOptions, der
from diarkit.timeline import Annotation, Timeline, support, to_ticks
from diarkit.tsvad import (
    ActivityMatrix,
    CosineScorer,
    ExternalScorer,
    SpeakerProfileSet,
    TsvadConfig,
    activities_to_annotation,
    block_filename,
    chunk_frames,
    chunk_spans,
    diarize_tsvad,
    extract_profiles,
    format_block,
    format_profiles,
    parse_block,
    parse_profiles,
    stitch,
    write_chunk_requests,
)

SEC = 10_000


def stitch_oracle(chunks, n_spk, resolution):
    """Per-frame mean over every chunk covering the frame."""
    res = to_ticks(resolution)
    n = max(-(-e // res) for (s, e), _ in chunks)
    out = np.zeros((n_spk, n))
    for f in range(n):
        vals = [b[:, f - s // res] for (s, e), b in chunks if s // res <= f < -(-e // res)]
        if vals:
            out[:, f] = sum(vals) / len(vals)
    return out


def random_blocks(rng, spans, n_spk, resolution):
    out = []
    for span in spans:
        f0, f1 = chunk_frames(span, resolution)
        out.append((span, rng.integers(0, 9, size=(n_spk, f1 - f0)) / 8.0))
    return out


def test_chunk_spans():
    assert chunk_spans(18, 16, 1) == [(0, 16 * SEC), (SEC, 17 * SEC), (2 * SEC, 18 * SEC)]
    assert chunk_spans(10, 16, 1) == [(0, 10 * SEC)]
    assert chunk_spans(32, 16, 16) == [(0, 16 * SEC), (16 * SEC, 32 * SEC)]
    assert chunk_spans(0, 16, 1) == []
    with pytest.raises(ValueError):
        chunk_spans(10, 0, 1)


def test_stitch_matches_per_frame_mean():
    rng = np.random.default_rng(0)
    for _ in range(20):
        total = float(rng.integers(1, 60)) + float(rng.integers(0, 100)) / 100
        spans = chunk_spans(total, 16.0, 1.0)
        n_spk = int(rng.integers(1, 4))
        chunks = random_blocks(rng, spans, n_spk, 0.08)
        # production order must not matter
        shuffled = [chunks[i] for i in rng.permutation(len(chunks))]
        act = stitch(shuffled, [f"s{k}" for k in range(n_spk)], 0.08)
        assert np.array_equal(act.scores, stitch_oracle(chunks, n_spk, 0.08))


def test_non_overlapping_chunks_concatenate():
    rng = np.random.default_rng(1)
    spans = chunk_spans(48.0, 16.0, 16.0)
    chunks = random_blocks(rng, spans, 2, 0.08)
    act = stitch(chunks, ["a", "b"], 0.08)
    assert np.array_equal(act.scores, np.concatenate([b for _, b in chunks], axis=1))
    assert (act.weight == 1).all()


def test_stitch_rejects_bad_blocks():
    with pytest.raises(ValueError):
        stitch([((0, SEC), np.zeros((2, 3)))], ["a", "b"], 0.08)
    with pytest.raises(ValueError):
        stitch([((0, SEC), np.zeros((1, 13)))], ["a", "b"], 0.08)


def test_activities_to_annotation():
    scores = np.array([[0.0, 0.9, 0.9, 0.9, 0.0, 0.0], [0.0, 0.0, 0.0, 0.8, 0.8, 0.8]])
    act = ActivityMatrix("r", ("a", "b"), scores, np.ones_like(scores), 0.08)
    out = activities_to_annotation(act, 0.5, 0.0, 0.0)
    r = to_ticks(0.08)
    assert [(t.speaker, t.start, t.end) for t in out.turns] == [("a", r, 4 * r), ("b", 3 * r, 6 * r)]
    with pytest.raises(ValueError):
        activities_to_annotation(act, 1.5)


def _simulation(seed=2, n_speakers=3):
    return simgen.generate(simgen.SimConfig(
        seed=seed, n_speakers=n_speakers, duration=60.0, within_noise=simgen.noise_for_cosine(0.9, 64)
    ))


def test_extract_profiles_and_capacity():
    sim = _simulation(n_speakers=4)
    prof = extract_profiles(sim.ref, sim.seq, capacity=30)
    assert set(prof.labels) == set(sim.ref.labels)
    small = extract_profiles(sim.ref, sim.seq, capacity=2)
    assert len(small) == 2 and len(small.dropped) == 2
    durations = {k: tl.duration_ticks for k, tl in sim.ref.speaker_timelines().items()}
    assert min(durations[k] for k in small.labels) >= max(durations[k] for k in small.dropped)
    with pytest.raises(ValueError):
        SpeakerProfileSet("r", ("a", "b"), np.eye(2), capacity=1)


def test_profiles_text_round_trip():
    prof = extract_profiles(_simulation().ref, _simulation().seq)
    back = parse_profiles(format_profiles(prof), prof.recording_id)
    assert back.labels == prof.labels
    assert np.allclose(back.vectors, prof.vectors, atol=1e-7)


def test_cosine_scorer_range_and_coverage():
    sim = _simulation()
    prof = extract_profiles(sim.ref, sim.seq)
    span = (0, 16 * SEC)
    block = CosineScorer()(span, sim.seq.restrict(*span), prof, 0.08)
    assert block.shape == (len(prof), 200)
    assert block.min() >= 0.0 and block.max() <= 1.0


def test_tsvad_refines_ahc_output():
    sim = _simulation(seed=5)
    init = diarize_ahc(sim.speech, sim.seq, sim.osd, AHC1)
    out = diarize_tsvad(sim.speech, sim.seq, init, CosineScorer(), TsvadConfig())
    assert support(out).subtract(sim.speech).duration_ticks == 0
    opts = ScoringOptions(collar=0.25)
    assert der(sim.ref, out, opts).der <= der(sim.ref, init, opts).der + 0.01


def test_tsvad_degenerate_inputs():
    sim = _simulation()
    assert diarize_tsvad(Timeline(), sim.seq, sim.ref, CosineScorer()) == Annotation(sim.ref.recording_id)
    empty = Annotation(sim.ref.recording_id)
    assert diarize_tsvad(sim.speech, sim.seq, empty, CosineScorer()) == empty


def test_block_format_round_trip():
    block = np.array([[0.0, 0.5, 1.0], [0.25, 0.125, 0.75]])
    labels, back, res = parse_block(format_block("r", ["a", "b"], block, 0.08))
    assert labels == ["a", "b"] and res == 0.08
    assert np.array_equal(back, block)
    assert block_filename("r", (SEC, 17 * SEC)) == "r_00001000_00017000.scores"
    with pytest.raises(ValueError):
        parse_block("FRAMESCORES r 0.08 1 2\nSPEAKERS a\n0.1 0.2\n")


def test_external_scorer_file_contract(tmp_path):
    sim = _simulation(seed=3)
    init = diarize_ahc(sim.speech, sim.seq, sim.osd, AHC1)
    cfg = TsvadConfig(chunk_len=16.0, threshold=0.7)
    req = write_chunk_requests(tmp_path / "req", sim.speech, sim.seq, init, cfg)
    rows = [line.split("\t") for line in req.read_text().splitlines()]
    assert rows
    # stand-in external scorer: answer every request with the cosine scorer
    out_dir = tmp_path / "scores"
    out_dir.mkdir()
    for rec, start, end, prof_file, emb_file, out_file in rows:
        prof = parse_profiles((tmp_path / "req" / prof_file).read_text(), rec)
        seq = read_embeddings_file(tmp_path / "req" / emb_file, rec)
        span = (to_ticks(float(start)), to_ticks(float(end)))
        block = CosineScorer()(span, seq, prof, cfg.resolution)
        (out_dir / out_file.strip()).write_text(format_block(rec, prof.labels, block, cfg.resolution))
    ext = diarize_tsvad(sim.speech, sim.seq, init, ExternalScorer(out_dir), cfg)
    ref = diarize_tsvad(sim.speech, sim.seq, init, CosineScorer(), cfg)
    assert der(ref, ext, ScoringOptions(collar=0)).error_ticks == 0
