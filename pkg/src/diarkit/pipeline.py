"""End-to-end runner: VAD fusion through final hypothesis fusion.

Per recording::

    fuse VAD scores -> binarize -> speech
    fuse OSD scores -> binarize -> overlap regions
    for each AHC system: diarize_ahc
    DOVER-Lap over the AHC outputs
    for each TSVAD system: diarize_tsvad seeded by the fused AHC output
    DOVER-Lap over {fused AHC, TSVAD outputs}

Stage results are cached under ``<output_dir>/.cache`` keyed by a hash of
the stage configuration and its inputs, so re-running with a changed
downstream parameter reuses everything upstream.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from diarkit import ahc as ahc_mod
from diarkit import fusion, metrics, tsvad
from diarkit.embeddings import format_segments, read_embeddings_file, uniform_segments
from diarkit.frame_scores import binarize, fuse_streams, read_scores_file
from diarkit.timeline import (
    Annotation,
    Timeline,
    parse_rttm,
    read_rttm_file,
    support,
    timeline_to_annotation,
    write_rttm,
)

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    onset: float = 0.5
    offset: float = 0.5
    min_on: float = 0.1
    min_off: float = 0.1
    weights: tuple[float, ...] | None = None


@dataclass(frozen=True)
class TsvadSystem:
    name: str
    scorer: str = "cosine"
    chunk_len: float = 16.0


@dataclass(frozen=True)
class PipelineConfig:
    manifest: Path
    output_dir: Path
    vad: DetectorConfig = DetectorConfig()
    osd: DetectorConfig = DetectorConfig()
    window: float = 1.28
    shift: float = 0.32
    ahc_systems: tuple[tuple[str, ahc_mod.AhcConfig], ...] = ()
    tsvad_enabled: bool = True
    tsvad: tsvad.TsvadConfig = tsvad.TsvadConfig()
    tsvad_systems: tuple[TsvadSystem, ...] = ()
    fusion_enabled: bool = True
    rank_exponent: float = 0.5
    ahc_fusion_weights: tuple[float, ...] | None = None
    final_fusion_weights: tuple[float, ...] | None = None
    scoring: metrics.ScoringOptions = metrics.ScoringOptions()
    base_dir: Path = field(default=Path("."), compare=False)

    def system_names(self) -> list[str]:
        names = [name for name, _ in self.ahc_systems]
        fused_ahc = self.fusion_enabled and len(self.ahc_systems) > 1
        if fused_ahc:
            names.append("dover_lap_ahc")
        tsvads = [s.name for s in self.tsvad_systems] if self.tsvad_enabled else []
        names += tsvads
        if self.fusion_enabled and tsvads:
            names.append("dover_lap_final")
        return names


def _expand_dotted(raw: dict) -> dict:
    out: dict = {}
    for key, value in raw.items():
        if isinstance(value, dict):
            value = _expand_dotted(value)
        node = out
        parts = str(key).split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        if isinstance(value, dict) and isinstance(node.get(parts[-1]), dict):
            node[parts[-1]].update(value)
        else:
            node[parts[-1]] = value
    return out


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"'{name}' must be a mapping")
    return sec


def _detector(sec: dict, name: str) -> DetectorConfig:
    allowed = {"onset", "offset", "min_on", "min_off", "weights"}
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    w = sec.get("weights")
    cfg = DetectorConfig(**{**sec, "weights": tuple(w) if w else None})
    if cfg.onset < cfg.offset:
        raise ConfigError(f"{name}.onset must be >= {name}.offset")
    return cfg


def load_config(path) -> dict:
    """Read a YAML config; dotted keys (``ahc.stop_thr: 0.6``) are expanded."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return _expand_dotted(raw)


def build_config(raw: dict, base_dir=".") -> PipelineConfig:
    base = Path(base_dir)
    try:
        manifest = base / raw["manifest"]
        output_dir = base / raw.get("output_dir", "diarkit_out")
    except KeyError:
        raise ConfigError("config needs a 'manifest' entry") from None

    seg = _section(raw, "segmentation")
    ahc_sec = _section(raw, "ahc")
    shared = {k: ahc_sec[k] for k in ("long_cluster_min", "linkage") if k in ahc_sec}
    systems = []
    entries = ahc_sec.get("systems")
    if entries is None and "segment_thr" in ahc_sec:
        entries = [{"name": "ahc", **{k: ahc_sec[k] for k in ("segment_thr", "stop_thr", "speaker_thr")}}]
    for i, entry in enumerate(entries or []):
        entry = dict(entry)
        name = entry.pop("name", f"ahc{i + 1}")
        preset = entry.pop("preset", None)
        try:
            if preset is not None:
                cfg = ahc_mod.with_overrides(ahc_mod.PRESETS[preset], **shared, **entry)
            else:
                cfg = ahc_mod.AhcConfig(**{**shared, **entry})
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"ahc system {name!r}: {exc}") from None
        systems.append((name, cfg))
    if not systems:
        raise ConfigError("at least one AHC system must be configured (ahc.systems)")

    ts = _section(raw, "tsvad")
    ts_systems = []
    for i, entry in enumerate(ts.get("systems") or []):
        entry = dict(entry)
        ts_systems.append(TsvadSystem(
            name=entry.pop("name", f"tsvad{i + 1}"),
            scorer=entry.pop("scorer", "cosine"),
            chunk_len=float(entry.pop("chunk_len", 16.0)),
        ))
        if entry:
            raise ConfigError(f"unknown keys in tsvad system: {sorted(entry)}")
    for s in ts_systems:
        if s.scorer != "cosine" and not s.scorer.startswith("external:"):
            raise ConfigError(f"tsvad system {s.name!r}: scorer must be 'cosine' or 'external:<dir>'")
    ts_cfg = tsvad.TsvadConfig(**{k: ts[k] for k in ("stride", "resolution", "capacity", "threshold", "min_on", "min_off") if k in ts})

    fu = _section(raw, "fusion")
    sc = _section(raw, "scoring")
    names = [n for n, _ in systems] + [s.name for s in ts_systems]
    if len(set(names)) != len(names):
        raise ConfigError(f"system names must be unique: {names}")

    def weights(key):
        w = fu.get(key)
        return tuple(float(x) for x in w) if w else None

    return PipelineConfig(
        manifest=manifest,
        output_dir=output_dir,
        vad=_detector(_section(raw, "vad"), "vad"),
        osd=_detector(_section(raw, "osd"), "osd"),
        window=float(seg.get("window", 1.28)),
        shift=float(seg.get("shift", 0.32)),
        ahc_systems=tuple(systems),
        tsvad_enabled=bool(ts.get("enabled", bool(ts_systems))),
        tsvad=ts_cfg,
        tsvad_systems=tuple(ts_systems),
        fusion_enabled=bool(fu.get("enabled", True)),
        rank_exponent=float(fu.get("rank_exponent", 0.5)),
        ahc_fusion_weights=weights("ahc_weights"),
        final_fusion_weights=weights("final_weights"),
        scoring=metrics.ScoringOptions(
            collar=float(sc.get("collar", 0.25)),
            score_overlaps=bool(sc.get("score_overlaps", True)),
        ),
        base_dir=base,
    )


@dataclass(frozen=True)
class ManifestEntry:
    recording_id: str
    vad_scores: tuple[Path, ...]
    embeddings: Path
    osd_scores: tuple[Path, ...]
    ref: Path | None


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        f = line.rstrip("\n").split("\t")
        if len(f) not in (4, 5):
            raise ConfigError(f"{path}:{lineno}: expected 4 or 5 tab-separated fields")

        def paths(field_):
            return tuple(base / p for p in field_.split(",") if p and p != "-")

        ref = base / f[4] if len(f) == 5 and f[4] and f[4] != "-" else None
        entries.append(ManifestEntry(f[0], paths(f[1]), base / f[2], paths(f[3]), ref))
    ids = [e.recording_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"{path}: duplicate recording ids")
    return entries


def validate(cfg: PipelineConfig) -> list[ManifestEntry]:
    """Check every input exists; raises :class:`ConfigError` naming the path."""
    if not cfg.manifest.is_file():
        raise ConfigError(f"manifest not found: {cfg.manifest}")
    entries = read_manifest(cfg.manifest)
    for e in entries:
        if not e.vad_scores:
            raise ConfigError(f"{e.recording_id}: no VAD score files")
        for p in (*e.vad_scores, e.embeddings, *e.osd_scores, *([e.ref] if e.ref else [])):
            if not p.is_file():
                raise ConfigError(f"{e.recording_id}: missing input {p}")
    for s in cfg.tsvad_systems:
        if s.scorer.startswith("external:") and not (cfg.base_dir / s.scorer[9:]).is_dir():
            raise ConfigError(f"external scorer directory not found: {cfg.base_dir / s.scorer[9:]}")
    return entries


# ----------------------------------------------------------------------------
# stage cache


def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else json.dumps(p, sort_keys=True, default=str).encode())
        h.update(b"\x00")
    return h.hexdigest()


class StageCache:
    def __init__(self, root: Path):
        self.root = root
        root.mkdir(parents=True, exist_ok=True)

    def get_or_compute(self, stage: str, params, inputs: list[str], compute) -> tuple[str, str]:
        """Return ``(rttm_text, digest)`` for the stage, computing on a miss."""
        key = _digest(stage, params, inputs)
        path = self.root / f"{stage}-{key[:32]}.rttm"
        if path.is_file():
            text = path.read_text(encoding="utf-8")
        else:
            text = compute()
            tmp = path.with_suffix(f".tmp{os.getpid()}")
            tmp.write_text(text, encoding="utf-8")
            os.replace(tmp, path)
        return text, _digest(text.encode())


def _as_annotation(text: str, rec: str) -> Annotation:
    anns = parse_rttm(text)
    return anns[0] if anns else Annotation(rec)


def _timeline_of(text: str, rec: str) -> Timeline:
    return support(_as_annotation(text, rec))


def _make_scorer(name: str, base_dir: Path):
    if name == "cosine":
        return tsvad.CosineScorer()
    return tsvad.ExternalScorer(base_dir / name[len("external:"):])


def process_recording(cfg: PipelineConfig, entry: ManifestEntry) -> dict[str, str]:
    """Run every stage for one recording; returns RTTM text per system."""
    rec = entry.recording_id
    out = cfg.output_dir
    cache = StageCache(out / ".cache")

    def file_digest(p: Path) -> str:
        return _digest(p.read_bytes())

    def write(kind: str, text: str, suffix: str = ".rttm"):
        d = out / kind
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{rec}{suffix}").write_text(text, encoding="utf-8")

    def detect(det: DetectorConfig, paths, label):
        streams = [read_scores_file(p) for p in paths]
        streams = [s if s.recording_id == rec else type(s)(rec, s.scores, s.frame_shift) for s in streams]
        tl = binarize(fuse_streams(streams, det.weights), det.onset, det.offset, det.min_on, det.min_off)
        return write_rttm([timeline_to_annotation(rec, tl, label)])

    speech_text, speech_h = cache.get_or_compute(
        "speech", asdict(cfg.vad), [file_digest(p) for p in entry.vad_scores],
        lambda: detect(cfg.vad, entry.vad_scores, "speech"),
    )
    write("speech", speech_text)
    speech = _timeline_of(speech_text, rec)
    if entry.osd_scores:
        osd_text, osd_h = cache.get_or_compute(
            "osd", asdict(cfg.osd), [file_digest(p) for p in entry.osd_scores],
            lambda: detect(cfg.osd, entry.osd_scores, "overlap"),
        )
    else:
        osd_text, osd_h = "", _digest(b"")
    write("osd", osd_text)
    osd = _timeline_of(osd_text, rec).intersect(speech)

    write("segments", format_segments(rec, uniform_segments(speech, cfg.window, cfg.shift)), ".txt")
    emb_h = file_digest(entry.embeddings)
    seq = read_embeddings_file(entry.embeddings, rec)
    if speech:
        lo, hi = speech.extent
        seq = seq.restrict(lo, hi)

    results: dict[str, str] = {}
    digests: dict[str, str] = {}

    def emit(name, text, h):
        results[name] = text
        digests[name] = h
        write(f"rttm/{name}", text)

    for name, acfg in cfg.ahc_systems:
        text, h = cache.get_or_compute(
            "ahc", asdict(acfg), [speech_h, osd_h, emb_h],
            lambda acfg=acfg: write_rttm([ahc_mod.diarize_ahc(speech, seq, osd, acfg, rec)]),
        )
        emit(name, text, h)

    ahc_names = [n for n, _ in cfg.ahc_systems]
    seed_name = ahc_names[0]
    if cfg.fusion_enabled and len(ahc_names) > 1:
        text, h = cache.get_or_compute(
            "dover_lap", [cfg.rank_exponent, cfg.ahc_fusion_weights], [digests[n] for n in ahc_names],
            lambda: write_rttm([fusion.dover_lap(
                [_as_annotation(results[n], rec) for n in ahc_names],
                cfg.ahc_fusion_weights, cfg.rank_exponent,
            )]),
        )
        emit("dover_lap_ahc", text, h)
        seed_name = "dover_lap_ahc"

    if cfg.tsvad_enabled and cfg.tsvad_systems:
        init = _as_annotation(results[seed_name], rec)
        for sys_ in cfg.tsvad_systems:
            tcfg = tsvad.TsvadConfig(**{**asdict(cfg.tsvad), "chunk_len": sys_.chunk_len})
            scorer = _make_scorer(sys_.scorer, cfg.base_dir)
            text, h = cache.get_or_compute(
                "tsvad", [asdict(tcfg), sys_.scorer], [speech_h, emb_h, digests[seed_name]],
                lambda tcfg=tcfg, scorer=scorer: write_rttm([tsvad.diarize_tsvad(speech, seq, init, scorer, tcfg)]),
            )
            emit(sys_.name, text, h)
        if cfg.fusion_enabled:
            final_inputs = [seed_name] + [s.name for s in cfg.tsvad_systems]
            text, h = cache.get_or_compute(
                "dover_lap", [cfg.rank_exponent, cfg.final_fusion_weights], [digests[n] for n in final_inputs],
                lambda: write_rttm([fusion.dover_lap(
                    [_as_annotation(results[n], rec) for n in final_inputs],
                    cfg.final_fusion_weights, cfg.rank_exponent,
                )]),
            )
            emit("dover_lap_final", text, h)
    return results


def _worker(args):
    cfg, entry = args
    try:
        return entry.recording_id, process_recording(cfg, entry), None
    except Exception as exc:  # isolate per-recording failures
        logger.exception("%s failed", entry.recording_id)
        return entry.recording_id, None, f"{type(exc).__name__}: {exc}"


def der_table(cfg: PipelineConfig, entries: list[ManifestEntry], results: dict[str, dict[str, str]]) -> tuple[str, dict]:
    """Corpus DER per system over recordings that have a reference."""
    refs = {}
    for e in entries:
        if e.ref is not None and e.recording_id in results:
            anns = [a for a in read_rttm_file(e.ref) if a.recording_id == e.recording_id]
            refs[e.recording_id] = anns[0] if anns else Annotation(e.recording_id)
    summary = {"collar": cfg.scoring.collar, "score_overlaps": cfg.scoring.score_overlaps,
               "recordings": sorted(refs), "systems": []}
    lines = [f"{'#':>2}  {'system':<18} {'DER(%)':>8} {'MISS(%)':>8} {'FA(%)':>8} {'CONF(%)':>8}"]
    if not refs:
        return "", summary
    for i, name in enumerate(cfg.system_names(), start=1):
        pairs = [(refs[r], _as_annotation(results[r][name], r)) for r in sorted(refs)]
        b = metrics.der_corpus(pairs, cfg.scoring)
        tot = b.total_reference_ticks or 1
        row = {
            "system": name,
            "der": b.der if b.total_reference_ticks else None,
            "miss": b.miss_ticks / tot,
            "false_alarm": b.false_alarm_ticks / tot,
            "confusion": b.confusion_ticks / tot,
        }
        summary["systems"].append(row)
        der_pct = f"{100 * row['der']:8.2f}" if row["der"] is not None else f"{'n/a':>8}"
        lines.append(
            f"{i:>2}  {name:<18} {der_pct} {100 * row['miss']:8.2f} "
            f"{100 * row['false_alarm']:8.2f} {100 * row['confusion']:8.2f}"
        )
    return "\n".join(lines) + "\n", summary


def run_pipeline(cfg: PipelineConfig, jobs: int | None = None) -> int:
    """Run the pipeline; returns the process exit status (0 or 1)."""
    entries = validate(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    jobs = jobs or os.cpu_count() or 1
    work = [(cfg, e) for e in entries]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_worker, work))
    else:
        outcomes = [_worker(w) for w in work]

    results = {rec: res for rec, res, err in outcomes if res is not None}
    failed = {rec: err for rec, res, err in outcomes if err is not None}
    for rec, err in sorted(failed.items()):
        logger.error("recording %s failed: %s", rec, err)

    for name in cfg.system_names():
        text = "".join(results[rec][name] for rec in sorted(results))
        (cfg.output_dir / f"{name}.rttm").write_text(text, encoding="utf-8")
    table, summary = der_table(cfg, entries, results)
    summary["failed"] = sorted(failed)
    if table:
        (cfg.output_dir / "der_table.txt").write_text(table, encoding="utf-8")
        logger.info("\n%s", table)
    (cfg.output_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 1 if failed else 0
