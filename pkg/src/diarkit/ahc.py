"""Clustering-based diarization.

Windows are merged into longer segments, clustered with a high stop
threshold, and the resulting small clusters are either folded into the
nearest large cluster or kept as extra speakers.  Overlap regions are
then given the two speakers whose centroids best match the local
embedding.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from diarkit import kernels
from diarkit.embeddings import (
    EmbeddingSequence,
    SimilarityMatrix,
    cosine_matrix,
    l2_normalize,
    merge_groups,
    pool_groups,
)
from diarkit.timeline import Annotation, Timeline, merge_intervals, support, to_ticks

logger = logging.getLogger(__name__)

LINKAGES = tuple(kernels.LINKAGE_CODES)


@dataclass(frozen=True)
class AhcConfig:
    segment_thr: float
    stop_thr: float
    speaker_thr: float
    long_cluster_min: float = 6.0
    linkage: str = "average"

    def __post_init__(self):
        for name in ("segment_thr", "stop_thr", "speaker_thr"):
            v = getattr(self, name)
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [-1, 1]")
        if self.long_cluster_min <= 0:
            raise ValueError("long_cluster_min must be positive")
        if self.linkage not in kernels.LINKAGE_CODES:
            raise ValueError(f"unknown linkage {self.linkage!r}; expected one of {LINKAGES}")


# grid-searched thresholds of the three submitted clustering systems
AHC1 = AhcConfig(segment_thr=0.54, stop_thr=0.60, speaker_thr=0.20)
AHC2 = AhcConfig(segment_thr=0.62, stop_thr=0.62, speaker_thr=0.20)
AHC3 = AhcConfig(segment_thr=0.66, stop_thr=0.68, speaker_thr=0.30)
PRESETS = {"ahc1": AHC1, "ahc2": AHC2, "ahc3": AHC3}


@dataclass(frozen=True, eq=False)
class ClusterState:
    assignments: np.ndarray
    centroids: np.ndarray
    durations: np.ndarray  # ticks, union of member intervals

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]

    @classmethod
    def from_labels(cls, labels, seq: EmbeddingSequence) -> "ClusterState":
        """Renumber clusters by first appearance and compute statistics."""
        labels = np.asarray(labels)
        _, first = np.unique(labels, return_index=True)
        order = labels[np.sort(first)]
        remap = {int(old): new for new, old in enumerate(order)}
        assign = np.array([remap[int(x)] for x in labels], dtype=np.int64)
        k = len(order)
        cent = np.zeros((k, seq.dim))
        dur = np.zeros(k, dtype=np.int64)
        for c in range(k):
            members = assign == c
            cent[c] = seq.vectors[members].mean(axis=0)
            dur[c] = sum(e - s for s, e in merge_intervals(map(tuple, seq.intervals[members])))
        return cls(assign, l2_normalize(cent) if k else cent, dur)


def speaker_label(k: int) -> str:
    return f"spk{k:02d}"


def ahc_cluster(sim: SimilarityMatrix, stop_thr: float, linkage: str = "average") -> np.ndarray:
    """Plain agglomerative clustering on a similarity matrix.

    Repeatedly merges the pair of clusters with the highest linkage
    similarity until that similarity drops below ``stop_thr``.  Ties go to
    the lowest ``(i, j)`` pair, clusters being indexed by their lowest
    member.

    Returns:
        Cluster index per item, numbered by first appearance.
    """
    if linkage not in kernels.LINKAGE_CODES:
        raise ValueError(f"unknown linkage {linkage!r}")
    if sim.n == 0:
        return np.zeros(0, dtype=np.int64)
    roots = kernels.ahc(sim.values, stop_thr, kernels.LINKAGE_CODES[linkage])
    _, first = np.unique(roots, return_index=True)
    remap = {int(r): i for i, r in enumerate(roots[np.sort(first)])}
    return np.array([remap[int(r)] for r in roots], dtype=np.int64)


def reassign_short_clusters(state: ClusterState, seq: EmbeddingSequence, cfg: AhcConfig) -> ClusterState:
    """Fold short clusters into their closest long cluster.

    Clusters totalling less than ``cfg.long_cluster_min`` seconds are short.
    Each short cluster, longest first, joins the long cluster whose centroid
    is most similar when that similarity reaches ``cfg.speaker_thr``;
    otherwise it stays as a speaker of its own.  Comparisons use the
    centroids from before the pass.
    """
    is_long = state.durations >= to_ticks(cfg.long_cluster_min)
    if is_long.all() or not is_long.any():
        return state
    long_ids = np.flatnonzero(is_long)
    short_ids = np.flatnonzero(~is_long)
    short_ids = sorted(short_ids, key=lambda c: (-state.durations[c], c))
    target = np.arange(state.n_clusters)
    long_cent = state.centroids[long_ids]
    for c in short_ids:
        sims = long_cent @ state.centroids[c]
        j = int(np.argmax(sims))
        if sims[j] >= cfg.speaker_thr:
            target[c] = long_ids[j]
    if (target == np.arange(state.n_clusters)).all():
        return state
    return ClusterState.from_labels(target[state.assignments], seq)


def assign_overlaps(
    diar: Annotation,
    osd: Timeline,
    seq: EmbeddingSequence,
    state: ClusterState,
    labels: list[str] | None = None,
) -> Annotation:
    """Give every detected overlap region its two closest speakers.

    For each overlap interval the local embedding is the normalized mean of
    the windows touching it; cluster centroids are ranked by cosine to it.
    Where the current speaker is among the top two, the other one is added
    as an overlapping turn; elsewhere both top speakers replace it for the
    span of the overlap.

    ``labels[k]`` names cluster ``k`` in ``diar`` (default ``spk00``, ...).
    """
    if not osd or state.n_clusters < 2 or len(seq) == 0:
        return diar
    if labels is None:
        labels = [speaker_label(k) for k in range(state.n_clusters)]
    speech = support(diar)
    clipped = osd.intersect(speech)
    if clipped != osd:
        logger.warning(
            "%s: %.3f s of overlap detections fall outside speech; clipped",
            diar.recording_id, osd.duration - clipped.duration,
        )
    original = diar.speaker_timelines()
    result = dict(original)
    for s, e in clipped:
        local = seq.restrict(s, e)
        if len(local) == 0:
            continue
        emb = l2_normalize(local.vectors.mean(axis=0))
        sims = state.centroids @ emb
        top = [labels[k] for k in np.argsort(-sims, kind="stable")[:2]]
        region = Timeline(((s, e),))
        for spk, tl in original.items():
            part = tl.intersect(region)
            if not part:
                continue
            if spk in top:
                other = top[1] if top[0] == spk else top[0]
                result[other] = result.get(other, Timeline()).union(part)
            else:
                result[spk] = result[spk].subtract(part)
                for lab in top:
                    result[lab] = result.get(lab, Timeline()).union(part)
    return Annotation.from_timelines(diar.recording_id, result)


def _voronoi_labels(speech: Timeline, seq: EmbeddingSequence, cluster_of: np.ndarray) -> dict[int, Timeline]:
    """Label each speech instant with the cluster of the nearest window center."""
    centers = seq.intervals.sum(axis=1)  # doubled, stays integral
    order = np.argsort(centers, kind="stable")
    c = centers[order]
    k = cluster_of[order]
    cuts = (c[:-1] + c[1:]) // 4  # midpoints, back in ticks
    lo, hi = speech.extent
    if len(cuts):
        lo, hi = min(lo, int(cuts[0])), max(hi, int(cuts[-1]))
    bounds = np.concatenate(([lo], cuts, [hi]))
    cells: dict[int, list[tuple[int, int]]] = {}
    for i in range(len(k)):
        a, b = int(bounds[i]), int(bounds[i + 1])
        if b > a:
            cells.setdefault(int(k[i]), []).append((a, b))
    return {cl: Timeline(tuple(ivs)).intersect(speech) for cl, ivs in cells.items()}


def _rename_by_first_appearance(ann: Annotation) -> Annotation:
    mapping = {}
    for t in ann.turns:
        if t.speaker not in mapping:
            mapping[t.speaker] = f"__{len(mapping)}"
    tmp = ann.rename(mapping)
    return tmp.rename({v: speaker_label(int(v[2:])) for v in mapping.values()})


def diarize_ahc(
    speech: Timeline,
    seq: EmbeddingSequence,
    osd: Timeline,
    cfg: AhcConfig,
    recording_id: str | None = None,
) -> Annotation:
    """Full clustering-based diarization of one recording.

    Output labels are ``spk00``, ``spk01``, ... in order of first
    appearance, and the union of output turns is exactly ``speech``.
    """
    rec = recording_id or seq.recording_id
    if not speech:
        return Annotation(rec)
    if len(seq) == 0:
        raise ValueError(f"{rec}: speech present but no segment embeddings")
    groups = merge_groups(seq, cosine_matrix(seq), cfg.segment_thr)
    merged = pool_groups(seq, groups)
    clusters = ahc_cluster(cosine_matrix(merged), cfg.stop_thr, cfg.linkage)
    state = ClusterState.from_labels(clusters, merged)
    state = reassign_short_clusters(state, merged, cfg)
    per_window = state.assignments[groups]
    timelines = _voronoi_labels(speech, seq, per_window)
    diar = Annotation.from_timelines(rec, {speaker_label(k): tl for k, tl in timelines.items()})
    diar = assign_overlaps(diar, osd, seq, state)
    return _rename_by_first_appearance(diar)


def with_overrides(cfg: AhcConfig, **kwargs) -> AhcConfig:
    return replace(cfg, **{k: v for k, v in kwargs.items() if v is not None})
