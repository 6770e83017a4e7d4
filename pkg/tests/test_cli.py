import json
import logging

import pytest
import yaml

from diarkit import cli, pipeline
from diarkit.ahc import AHC2, diarize_ahc
from diarkit.embeddings import read_embeddings_file
from diarkit.frame_scores import binarize, read_scores_file
from diarkit.timeline import parse_rttm, read_rttm_file

SYSTEMS = ["ahc1", "ahc2", "ahc3", "dover_lap_ahc", "tsvad1", "tsvad2", "tsvad3", "dover_lap_final"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert cli.main(["simgen", "--out", str(out), "--n-recordings", "3", "--duration", "30", "--seed", "4"]) == 0
    return out


def write_config(path, corpus, **extra):
    cfg = {
        "manifest": str(corpus / "manifest.tsv"),
        "output_dir": str(path.parent / "out"),
        "ahc.systems": [{"preset": "ahc1"}, {"preset": "ahc2"}, {"preset": "ahc3"}],
        "tsvad": {"systems": [{"chunk_len": 64}, {"chunk_len": 16}, {"chunk_len": 8}]},
    }
    cfg.update(extra)
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_full_pipeline_writes_every_system(tmp_path, corpus):
    cfg = write_config(tmp_path / "cfg.yaml", corpus)
    assert cli.main(["--jobs", "1", "pipeline", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    for name in SYSTEMS:
        assert len(parse_rttm((out / f"{name}.rttm").read_text())) == 3
        assert len(list((out / "rttm" / name).glob("*.rttm"))) == 3
    table = (out / "der_table.txt").read_text().splitlines()
    assert [line.split()[1] for line in table[1:]] == SYSTEMS
    summary = json.loads((out / "summary.json").read_text())
    assert summary["failed"] == [] and len(summary["systems"]) == 8
    for kind in ("speech", "osd", "segments"):
        assert len(list((out / kind).iterdir())) == 3


def test_degenerate_pipeline_equals_direct_clustering(tmp_path, corpus):
    cfg = write_config(
        tmp_path / "cfg.yaml", corpus,
        **{"ahc.systems": [{"preset": "ahc2"}], "tsvad": {"enabled": False}, "fusion": {"enabled": False}},
    )
    assert cli.main(["pipeline", "--config", str(cfg), "--jobs", "1"]) == 0
    rec = "sim00004"
    speech = binarize(read_scores_file(corpus / f"{rec}.vad.scores"), 0.5, 0.5, 0.1, 0.1)
    osd = binarize(read_scores_file(corpus / f"{rec}.osd.scores"), 0.5, 0.5, 0.1, 0.1)
    seq = read_embeddings_file(corpus / f"{rec}.emb")
    direct = diarize_ahc(speech, seq, osd, AHC2, rec)
    assert read_rttm_file(tmp_path / "out" / "rttm" / "ahc1" / f"{rec}.rttm") == [direct]
    assert sorted(p.name for p in (tmp_path / "out").glob("*.rttm")) == ["ahc1.rttm"]


def test_changed_downstream_parameter_reuses_upstream_cache(tmp_path, corpus):
    cfg = write_config(tmp_path / "cfg.yaml", corpus)
    assert cli.main(["pipeline", "--config", str(cfg), "--jobs", "1"]) == 0
    cache = tmp_path / "out" / ".cache"
    before = {p.name: p.stat().st_mtime_ns for p in cache.iterdir()}
    write_config(tmp_path / "cfg.yaml", corpus, **{"tsvad.threshold": 0.75})
    assert cli.main(["pipeline", "--config", str(cfg), "--jobs", "1"]) == 0
    after = {p.name: p.stat().st_mtime_ns for p in cache.iterdir()}
    upstream = [n for n in before if n.split("-")[0] in ("speech", "osd", "ahc")]
    assert upstream and all(after[n] == before[n] for n in upstream)
    assert {n.split("-")[0] for n in set(after) - set(before)} == {"tsvad", "dover_lap"}


def test_failing_recording_is_isolated(tmp_path, corpus, caplog):
    broken = tmp_path / "corpus"
    broken.mkdir()
    for p in corpus.iterdir():
        (broken / p.name).write_bytes(p.read_bytes())
    (broken / "sim00005.emb").write_text("not an embedding file\n")
    cfg = write_config(tmp_path / "cfg.yaml", broken)
    with caplog.at_level(logging.ERROR):
        assert cli.main(["pipeline", "--config", str(cfg), "--jobs", "1"]) == 1
    assert "sim00005" in caplog.text
    out = tmp_path / "out"
    assert [a.recording_id for a in read_rttm_file(out / "ahc1.rttm")] == ["sim00004", "sim00006"]
    assert json.loads((out / "summary.json").read_text())["failed"] == ["sim00005"]


def test_missing_input_fails_fast(tmp_path, corpus, caplog):
    manifest = tmp_path / "manifest.tsv"
    manifest.write_text(f"recX\t{corpus / 'nope.scores'}\t{corpus / 'sim00004.emb'}\t-\n")
    cfg = write_config(tmp_path / "cfg.yaml", corpus, manifest=str(manifest))
    with caplog.at_level(logging.ERROR):
        assert cli.main(["pipeline", "--config", str(cfg)]) == 2
    assert "nope.scores" in caplog.text
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize(
    "extra",
    [
        {"ahc.systems": []},
        {"ahc.systems": [{"preset": "ahc9"}]},
        {"vad": {"onset": 0.3, "offset": 0.6}},
        {"vad": {"treshold": 0.5}},
        {"tsvad": {"systems": [{"scorer": "magic"}]}},
        {"ahc.systems": [{"preset": "ahc1", "name": "x"}, {"preset": "ahc2", "name": "x"}]},
    ],
)
def test_invalid_config_exits_2(tmp_path, corpus, extra):
    cfg = write_config(tmp_path / "cfg.yaml", corpus, **extra)
    assert cli.main(["pipeline", "--config", str(cfg)]) == 2


def test_unparseable_config_and_bad_args(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("x: [\n")
    assert cli.main(["pipeline", "--config", str(bad)]) == 2
    assert cli.main(["pipeline"]) == 2
    assert cli.main(["no-such-command"]) == 2
    assert cli.main(["--jobs", "0", "score", "--ref", "a", "--hyp", "b"]) == 2


def test_dotted_keys_expand():
    raw = pipeline._expand_dotted({"ahc.stop_thr": 0.6, "ahc": {"linkage": "single"}, "a.b.c": 1})
    assert raw == {"ahc": {"stop_thr": 0.6, "linkage": "single"}, "a": {"b": {"c": 1}}}


def test_stage_subcommands_chain(tmp_path, corpus, capsys):
    rec = "sim00004"
    c = lambda name: str(corpus / name)  # noqa: E731
    t = lambda name: str(tmp_path / name)  # noqa: E731
    assert cli.main(["fuse-scores", c(f"{rec}.vad.scores"), c(f"{rec}.vad.scores"), "-o", t("vad.scores")]) == 0
    assert read_scores_file(t("vad.scores")) == read_scores_file(c(f"{rec}.vad.scores"))
    assert cli.main(["binarize", t("vad.scores"), "-o", t("speech.rttm")]) == 0
    assert cli.main(["binarize", c(f"{rec}.osd.scores"), "--section", "osd", "--label", "overlap", "-o", t("osd.rttm")]) == 0
    assert cli.main(["segment", t("speech.rttm"), "-o", t("segments.txt")]) == 0
    assert (tmp_path / "segments.txt").read_text().startswith(rec + " ")
    assert cli.main([
        "ahc", "--speech", t("speech.rttm"), "--embeddings", c(f"{rec}.emb"),
        "--osd", t("osd.rttm"), "--preset", "ahc1", "-o", t("ahc.rttm"),
    ]) == 0
    assert cli.main([
        "tsvad", "--speech", t("speech.rttm"), "--embeddings", c(f"{rec}.emb"),
        "--init", t("ahc.rttm"), "--chunk-len", "16", "-o", t("tsvad.rttm"),
    ]) == 0
    assert cli.main([
        "tsvad", "--speech", t("speech.rttm"), "--embeddings", c(f"{rec}.emb"),
        "--init", t("ahc.rttm"), "--emit-requests", t("req"),
    ]) == 0
    assert (tmp_path / "req" / "requests.tsv").read_text().count("\n") > 1
    assert cli.main(["dover-lap", t("ahc.rttm"), t("tsvad.rttm"), t("ahc.rttm"), "-o", t("fused.rttm")]) == 0
    capsys.readouterr()
    assert cli.main(["score", "--ref", c(f"{rec}.rttm"), "--hyp", t("fused.rttm"), "--collar", "0.25"]) == 0
    text = capsys.readouterr().out
    table, summary = text.split("\n\n")
    assert table.splitlines()[0].split()[:2] == ["recording", "DER(%)"]
    assert json.loads(summary)["overall"]["der"] < 0.05


def test_score_ignore_overlaps_and_uem(tmp_path, corpus, capsys):
    rec = "sim00004"
    (tmp_path / "x.uem").write_text(f"{rec} 1 0.0 10.0\n")
    ref = str(corpus / f"{rec}.rttm")
    assert cli.main(["score", "--ref", ref, "--hyp", ref, "--ignore-overlaps", "--uem", str(tmp_path / "x.uem")]) == 0
    summary = json.loads(capsys.readouterr().out.split("\n\n")[1])
    assert summary["score_overlaps"] is False
    assert summary["overall"]["total_reference"] <= 10.0
