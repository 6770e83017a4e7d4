import numpy as np
import pytest

from diarkit import simgen
from diarkit.embeddings import read_embeddings_file
from diarkit.frame_scores import binarize, read_scores_file
from diarkit.metrics import ScoringOptions, der
from diarkit.timeline import Annotation, overlap_regions, read_rttm_file, support, timeline_to_annotation


def test_same_seed_same_corpus():
    a = simgen.generate(simgen.SimConfig(seed=11, duration=40.0))
    b = simgen.generate(simgen.SimConfig(seed=11, duration=40.0))
    assert a.ref == b.ref and a.vad_scores == b.vad_scores and a.seq == b.seq
    c = simgen.generate(simgen.SimConfig(seed=12, duration=40.0))
    assert c.ref != a.ref


def test_ground_truth_is_consistent():
    sim = simgen.generate(simgen.SimConfig(seed=3, n_speakers=4, duration=120.0, overlap_prob=0.3))
    assert sim.ref.recording_id == "sim00003"
    assert set(sim.ref.labels) <= {"S00", "S01", "S02", "S03"}
    assert sim.speech == support(sim.ref)
    assert sim.osd == overlap_regions(sim.ref)
    assert sim.osd.duration > 0
    assert sim.speech.extent[1] <= 120 * 10_000
    # the VAD stream binarizes back to the reference speech
    assert binarize(sim.vad_scores, 0.5, 0.5, 0.0, 0.0) == sim.speech
    # all boundaries on the 10 ms grid
    assert all(t.start % 100 == 0 and t.end % 100 == 0 for t in sim.ref.turns)


def test_within_speaker_cosine_near_target():
    sigma = simgen.noise_for_cosine(0.9, 64)
    sim = simgen.generate(simgen.SimConfig(seed=1, n_speakers=2, duration=120.0, overlap_prob=0.0, within_noise=sigma))
    # windows lying inside a single speaker's turn
    spk = {}
    for i, (s, e) in enumerate(sim.seq.intervals):
        owners = [t.speaker for t in sim.ref.turns if t.start <= s and e <= t.end]
        if len(owners) == 1:
            spk.setdefault(owners[0], []).append(i)
    sims = []
    for idx in spk.values():
        v = sim.seq.vectors[idx]
        m = v @ v.T
        sims.extend(m[np.triu_indices(len(idx), 1)])
    assert abs(np.mean(sims) - 0.9) < 0.03


def test_single_speaker_trivial_system_is_perfect():
    sim = simgen.generate(simgen.SimConfig(seed=5, n_speakers=1, overlap_prob=0.0, duration=60.0))
    assert not sim.osd
    hyp = timeline_to_annotation(sim.ref.recording_id, sim.speech, "one")
    assert der(sim.ref, hyp, ScoringOptions(collar=0)).der == 0.0


def test_speaker_counts_cycle_in_corpus():
    sims = simgen.corpus(4, seed=0, speakers=(2, 5), duration=30.0)
    assert [s.ref.recording_id for s in sims] == ["sim00000", "sim00001", "sim00002", "sim00003"]
    for n, s in zip([2, 3, 4, 5], sims):
        assert set(s.ref.labels) <= {f"S{k:02d}" for k in range(n)}
    assert len(sims[0].ref.labels) == 2


@pytest.mark.parametrize(
    "kwargs",
    [dict(n_speakers=0), dict(turn_len=(2.0, 1.0)), dict(overlap_prob=1.5), dict(embedding_dim=0), dict(turn_len=(0.0, 1.0))],
)
def test_config_validation(kwargs):
    with pytest.raises(simgen.SimulationError):
        simgen.SimConfig(**kwargs)


def test_too_many_speakers_for_dimension():
    with pytest.raises(simgen.SimulationError):
        simgen.generate(simgen.SimConfig(n_speakers=20, embedding_dim=2))


def test_noise_for_cosine():
    assert simgen.noise_for_cosine(1.0, 64) == 0.0
    with pytest.raises(ValueError):
        simgen.noise_for_cosine(0.0, 64)


def test_written_corpus_reads_back(tmp_path):
    sims = simgen.corpus(2, seed=7, duration=30.0)
    manifest = simgen.write_corpus(tmp_path, sims)
    rows = [line.split("\t") for line in manifest.read_text().splitlines()]
    assert [r[0] for r in rows] == ["sim00007", "sim00008"]
    for sim, row in zip(sims, rows):
        assert read_rttm_file(tmp_path / row[4]) == [sim.ref]
        assert read_scores_file(tmp_path / row[1]) == sim.vad_scores
        seq = read_embeddings_file(tmp_path / row[2])
        assert np.array_equal(seq.intervals, sim.seq.intervals)
        osd = read_scores_file(tmp_path / row[3])
        assert binarize(osd, 0.5, 0.5, 0.0, 0.0) == sim.osd
        assert read_rttm_file(tmp_path / f"{sim.ref.recording_id}.speech.rttm")[0] == Annotation.from_timelines(
            sim.ref.recording_id, {"speech": sim.speech}
        )
