"""Command-line entry point: ``diarkit <subcommand> ...``.

Exit status: 0 on success, 1 when any recording failed, 2 when the
configuration or arguments are invalid.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from diarkit import ahc, fusion, metrics, pipeline, simgen, tsvad
from diarkit.embeddings import format_segments, read_embeddings_file, uniform_segments
from diarkit.frame_scores import binarize, format_scores, fuse_streams, read_scores_file
from diarkit.timeline import Annotation, read_rttm_file, support, timeline_to_annotation, write_rttm

logger = logging.getLogger("diarkit")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _config_section(args, name: str) -> dict:
    if not args.config:
        return {}
    return pipeline.load_config(args.config).get(name) or {}


def _pick(cli_value, section: dict, key: str, default):
    if cli_value is not None:
        return cli_value
    return section.get(key, default)


def _single(path, recording_id: str | None = None) -> Annotation:
    """The one recording in an RTTM file; an empty file gives an empty
    annotation when ``recording_id`` is known."""
    anns = read_rttm_file(path)
    if not anns and recording_id is not None:
        return Annotation(recording_id)
    if len(anns) != 1:
        raise ValueError(f"{path}: expected exactly one recording, found {len(anns)}")
    return anns[0]


# ----------------------------------------------------------------------------
# subcommands


def cmd_fuse_scores(args) -> int:
    streams = [read_scores_file(p) for p in args.scores]
    _emit(format_scores(fuse_streams(streams, args.weights)), args.output)
    return EXIT_OK


def cmd_binarize(args) -> int:
    sec = _config_section(args, args.section)
    stream = read_scores_file(args.scores)
    tl = binarize(
        stream,
        _pick(args.onset, sec, "onset", 0.5),
        _pick(args.offset, sec, "offset", 0.5),
        _pick(args.min_on, sec, "min_on", 0.1),
        _pick(args.min_off, sec, "min_off", 0.1),
    )
    _emit(write_rttm([timeline_to_annotation(stream.recording_id, tl, args.label)]), args.output)
    return EXIT_OK


def cmd_segment(args) -> int:
    sec = _config_section(args, "segmentation")
    out = []
    for ann in read_rttm_file(args.speech):
        segs = uniform_segments(support(ann), _pick(args.window, sec, "window", 1.28), _pick(args.shift, sec, "shift", 0.32))
        out.append(format_segments(ann.recording_id, segs))
    _emit("".join(out), args.output)
    return EXIT_OK


def cmd_ahc(args) -> int:
    sec = _config_section(args, "ahc")
    base = ahc.PRESETS[args.preset] if args.preset else ahc.AhcConfig(
        segment_thr=sec.get("segment_thr", ahc.AHC1.segment_thr),
        stop_thr=sec.get("stop_thr", ahc.AHC1.stop_thr),
        speaker_thr=sec.get("speaker_thr", ahc.AHC1.speaker_thr),
        long_cluster_min=sec.get("long_cluster_min", 6.0),
        linkage=sec.get("linkage", "average"),
    )
    cfg = ahc.with_overrides(
        base, segment_thr=args.segment_thr, stop_thr=args.stop_thr, speaker_thr=args.speaker_thr,
        long_cluster_min=args.long_cluster_min, linkage=args.linkage,
    )
    speech_ann = _single(args.speech)
    rec = speech_ann.recording_id
    seq = read_embeddings_file(args.embeddings, rec)
    osd = support(_single(args.osd, rec)) if args.osd else support(Annotation(rec))
    hyp = ahc.diarize_ahc(support(speech_ann), seq, osd, cfg, rec)
    _emit(write_rttm([hyp]), args.output)
    return EXIT_OK


def cmd_tsvad(args) -> int:
    sec = _config_section(args, "tsvad")
    cfg = tsvad.TsvadConfig(
        chunk_len=_pick(args.chunk_len, sec, "chunk_len", 16.0),
        stride=_pick(args.stride, sec, "stride", 1.0),
        resolution=_pick(args.resolution, sec, "resolution", 0.08),
        capacity=_pick(args.capacity, sec, "capacity", 30),
        threshold=_pick(args.threshold, sec, "threshold", None),
        min_on=_pick(args.min_on, sec, "min_on", 0.16),
        min_off=_pick(args.min_off, sec, "min_off", 0.16),
    )
    speech_ann = _single(args.speech)
    rec = speech_ann.recording_id
    seq = read_embeddings_file(args.embeddings, rec)
    init = _single(args.init, rec)
    if args.emit_requests:
        req = tsvad.write_chunk_requests(args.emit_requests, support(speech_ann), seq, init, cfg)
        logger.info("chunk requests written to %s", req)
        return EXIT_OK
    if args.scorer == "cosine":
        scorer = tsvad.CosineScorer()
    elif args.scorer.startswith("external:"):
        scorer = tsvad.ExternalScorer(args.scorer[len("external:"):])
    else:
        raise ValueError(f"unknown scorer {args.scorer!r}")
    hyp = tsvad.diarize_tsvad(support(speech_ann), seq, init, scorer, cfg)
    _emit(write_rttm([hyp]), args.output)
    return EXIT_OK


def cmd_dover_lap(args) -> int:
    sec = _config_section(args, "fusion")
    per_file = [{a.recording_id: a for a in read_rttm_file(p)} for p in args.rttms]
    recs = sorted(set().union(*per_file))
    exponent = _pick(args.rank_exponent, sec, "rank_exponent", 0.5)
    fused = []
    for rec in recs:
        hyps = [d.get(rec, Annotation(rec)) for d in per_file]
        fused.append(fusion.dover_lap(hyps, args.weights, exponent))
    _emit(write_rttm(fused), args.output)
    return EXIT_OK


def cmd_score(args) -> int:
    sec = _config_section(args, "scoring")
    refs = {a.recording_id: a for a in read_rttm_file(args.ref)}
    hyps = {a.recording_id: a for a in read_rttm_file(args.hyp)}
    uems = metrics.parse_uem(Path(args.uem).read_text(encoding="utf-8")) if args.uem else {}
    collar = _pick(args.collar, sec, "collar", 0.25)
    overlaps = not args.ignore_overlaps and sec.get("score_overlaps", True)
    rows = []
    total = metrics.DERBreakdown()
    for rec in sorted(refs):
        opts = metrics.ScoringOptions(collar=collar, score_overlaps=overlaps, uem=uems.get(rec))
        b = metrics.der(refs[rec], hyps.get(rec, Annotation(rec)), opts)
        total = total + b
        rows.append((rec, b))
    rows.append(("*** OVERALL ***", total))
    lines = [f"{'recording':<24} {'DER(%)':>8} {'MISS(s)':>9} {'FA(s)':>9} {'CONF(s)':>9} {'REF(s)':>9}"]
    for rec, b in rows:
        der_pct = f"{100 * b.der:8.2f}" if b.total_reference_ticks else f"{'n/a':>8}"
        lines.append(f"{rec:<24} {der_pct} {b.miss:9.3f} {b.false_alarm:9.3f} {b.confusion:9.3f} {b.total_reference:9.3f}")
    summary = {
        "collar": collar,
        "score_overlaps": overlaps,
        "recordings": {rec: b.as_dict() for rec, b in rows[:-1]},
        "overall": total.as_dict(),
    }
    _emit("\n".join(lines) + "\n\n" + json.dumps(summary, sort_keys=True) + "\n", args.output)
    return EXIT_OK


def cmd_simgen(args) -> int:
    overrides = {
        "duration": args.duration,
        "overlap_prob": args.overlap_prob,
        "embedding_dim": args.dim,
        "within_noise": simgen.noise_for_cosine(args.target_cosine, args.dim),
        "score_noise": args.score_noise,
    }
    sims = simgen.corpus(args.n_recordings, args.seed, tuple(args.speakers), **overrides)
    manifest = simgen.write_corpus(args.out, sims)
    logger.info("wrote %d recordings; manifest %s", len(sims), manifest)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    if not args.config:
        raise pipeline.ConfigError("pipeline needs --config")
    raw = pipeline.load_config(args.config)
    if args.output_dir:
        raw["output_dir"] = str(Path(args.output_dir).resolve())
    cfg = pipeline.build_config(raw, Path(args.config).parent)
    return pipeline.run_pipeline(cfg, args.jobs)


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML config with dotted keys")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker processes (default: all cores)")
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="diarkit", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, parents=[common])
        p.set_defaults(func=func)
        return p

    p = add("fuse-scores", cmd_fuse_scores, "average several FRAMESCORES files")
    p.add_argument("scores", nargs="+")
    p.add_argument("--weights", type=float, nargs="+")
    p.add_argument("-o", "--output")

    p = add("binarize", cmd_binarize, "hysteresis-binarize a FRAMESCORES file into RTTM")
    p.add_argument("scores")
    p.add_argument("--onset", type=float)
    p.add_argument("--offset", type=float)
    p.add_argument("--min-on", type=float)
    p.add_argument("--min-off", type=float)
    p.add_argument("--label", default="speech")
    p.add_argument("--section", default="vad", choices=["vad", "osd"], help="config section for defaults")
    p.add_argument("-o", "--output")

    p = add("segment", cmd_segment, "list sliding-window segments over speech")
    p.add_argument("speech", help="RTTM whose support is the speech region")
    p.add_argument("--window", type=float)
    p.add_argument("--shift", type=float)
    p.add_argument("-o", "--output")

    p = add("ahc", cmd_ahc, "clustering-based diarization")
    p.add_argument("--speech", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--osd")
    p.add_argument("--preset", choices=sorted(ahc.PRESETS))
    p.add_argument("--segment-thr", type=float)
    p.add_argument("--stop-thr", type=float)
    p.add_argument("--speaker-thr", type=float)
    p.add_argument("--long-cluster-min", type=float)
    p.add_argument("--linkage", choices=ahc.LINKAGES)
    p.add_argument("-o", "--output")

    p = add("tsvad", cmd_tsvad, "target-speaker VAD refinement")
    p.add_argument("--speech", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--init", required=True, help="initial diarization RTTM")
    p.add_argument("--scorer", default="cosine", help="'cosine' or 'external:<score dir>'")
    p.add_argument("--chunk-len", type=float)
    p.add_argument("--stride", type=float)
    p.add_argument("--resolution", type=float)
    p.add_argument("--capacity", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--min-on", type=float)
    p.add_argument("--min-off", type=float)
    p.add_argument("--emit-requests", metavar="DIR", help="write chunk requests for an external scorer and stop")
    p.add_argument("-o", "--output")

    p = add("dover-lap", cmd_dover_lap, "fuse RTTM hypotheses")
    p.add_argument("rttms", nargs="+")
    p.add_argument("--weights", type=float, nargs="+")
    p.add_argument("--rank-exponent", type=float)
    p.add_argument("-o", "--output")

    p = add("score", cmd_score, "diarization error rate")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--collar", type=float)
    p.add_argument("--ignore-overlaps", action="store_true")
    p.add_argument("--uem")
    p.add_argument("-o", "--output")

    p = add("simgen", cmd_simgen, "generate a synthetic corpus and manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n-recordings", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speakers", type=int, nargs=2, default=[2, 5], metavar=("MIN", "MAX"))
    p.add_argument("--duration", type=float, default=120.0)
    p.add_argument("--overlap-prob", type=float, default=0.1)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--target-cosine", type=float, default=0.9)
    p.add_argument("--score-noise", type=float, default=0.0)

    p = add("pipeline", cmd_pipeline, "run the full system over a manifest")
    p.add_argument("--output-dir")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    args.config = getattr(args, "config", None)
    args.jobs = getattr(args, "jobs", None)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.jobs is not None and args.jobs < 1:
        logger.error("--jobs must be at least 1")
        return EXIT_CONFIG
    try:
        return args.func(args)
    except pipeline.ConfigError as exc:
        logger.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
