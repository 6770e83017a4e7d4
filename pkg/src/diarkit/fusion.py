"""Overlap-aware fusion of several diarization hypotheses (DOVER-Lap).

Labels of all hypotheses are first mapped onto one global namespace, then
each elementary region is decided by a weighted vote over speakers and
over the number of active speakers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from diarkit.metrics import pairwise_der_matrix
from diarkit.timeline import Annotation

logger = logging.getLogger(__name__)

# guards round-half-up against float drift in the weighted speaker count
_COUNT_EPS = 1e-9


@dataclass(frozen=True)
class HypothesisSet:
    hypotheses: tuple[Annotation, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        hyps = tuple(self.hypotheses)
        if not hyps:
            raise ValueError("need at least one hypothesis")
        if len({h.recording_id for h in hyps}) != 1:
            raise ValueError("all hypotheses must describe the same recording")
        w = np.asarray(self.weights, dtype=np.float64)
        if len(w) != len(hyps) or (w <= 0).any():
            raise ValueError("one positive weight per hypothesis required")
        object.__setattr__(self, "hypotheses", hyps)
        object.__setattr__(self, "weights", tuple(float(x) for x in w / w.sum()))

    @classmethod
    def uniform(cls, hyps: Sequence[Annotation]) -> "HypothesisSet":
        return cls(tuple(hyps), tuple([1.0] * len(hyps)))


def rank_weights(der_matrix, exponent: float = 0.5) -> np.ndarray:
    """DOVER rank weights from pairwise DERs.

    Each hypothesis is scored by its mean DER against the others (both
    scoring directions averaged); the best gets rank 1, ties share the
    average rank, and the weight is ``rank ** -exponent`` normalized.
    """
    D = np.asarray(der_matrix, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError(f"pairwise DER matrix must be square, got {D.shape}")
    n = D.shape[0]
    if n == 1:
        return np.ones(1)
    sym = (D + D.T) / 2.0
    mean = sym.sum(axis=1) / (n - 1)
    ranks = rankdata(np.round(mean, 12), method="average")
    w = ranks ** (-float(exponent))
    return w / w.sum()


def _overlap_ticks(a, b) -> int:
    """Total co-activity between two sorted lists of (start, end)."""
    total = 0
    i = j = 0
    while i < len(a) and j < len(b):
        s = max(a[i][0], b[j][0])
        e = min(a[i][1], b[j][1])
        if e > s:
            total += e - s
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return total


def _fresh_label(base: str, taken: set[str]) -> str:
    if base not in taken:
        return base
    k = 1
    while f"{base}_{k}" in taken:
        k += 1
    return f"{base}_{k}"


def map_labels(hyps: HypothesisSet) -> list[dict[str, str]]:
    """Map every hypothesis' local labels onto shared global labels.

    Hypotheses are visited in descending weight order (index breaks ties).
    The first keeps its own labels.  Each later one is matched to the
    global labels by a maximum-overlap one-to-one assignment, where a
    global label's activity is everything already mapped onto it.
    Speakers left unmatched, or matched with zero overlap, get fresh
    global labels.

    Returns:
        One ``{local: global}`` dict per hypothesis, in input order.
    """
    order = sorted(range(len(hyps.hypotheses)), key=lambda i: (-hyps.weights[i], i))
    mappings: list[dict[str, str]] = [dict() for _ in hyps.hypotheses]
    # global label -> list of mapped speaker timelines contributing to it
    global_tracks: dict[str, list] = {}
    for rank, idx in enumerate(order):
        tls = {spk: tl.intervals for spk, tl in hyps.hypotheses[idx].speaker_timelines().items()}
        local = sorted(tls)
        if rank == 0:
            for spk in local:
                mappings[idx][spk] = spk
                global_tracks[spk] = [tls[spk]]
            continue
        glabels = sorted(global_tracks)
        gain = np.zeros((len(local), len(glabels)), dtype=np.int64)
        for a, spk in enumerate(local):
            for b, g in enumerate(glabels):
                gain[a, b] = sum(_overlap_ticks(tls[spk], track) for track in global_tracks[g])
        matched = {}
        if gain.size:
            rows, cols = linear_sum_assignment(gain, maximize=True)
            matched = {local[r]: glabels[c] for r, c in zip(rows, cols) if gain[r, c] > 0}
        taken = set(global_tracks)
        for spk in local:
            g = matched.get(spk)
            if g is None:
                g = _fresh_label(spk, taken)
                taken.add(g)
                global_tracks[g] = []
            mappings[idx][spk] = g
            global_tracks[g].append(tls[spk])
    return mappings


def vote(hyps: HypothesisSet, mapping: Sequence[dict[str, str]]) -> Annotation:
    """Weighted overlap-aware voting over elementary regions.

    In every region between consecutive turn boundaries, the number of
    speakers is the weighted mean of the hypotheses' speaker counts,
    rounded half up; that many global labels are emitted, highest summed
    weight first, ties broken by label.
    """
    rec = hyps.hypotheses[0].recording_id
    bounds = sorted({b for h in hyps.hypotheses for t in h.turns for b in (t.start, t.end)})
    if len(bounds) < 2:
        return Annotation(rec)
    b = np.array(bounds, dtype=np.int64)
    n = len(b) - 1
    all_labels = sorted({g for m in mapping for g in m.values()})
    col = {g: i for i, g in enumerate(all_labels)}
    score = np.zeros((n, len(all_labels)))
    count = np.zeros(n)
    for h, w, m in zip(hyps.hypotheses, hyps.weights, mapping):
        act = np.zeros((n, len(all_labels)), dtype=bool)
        for t in h.turns:
            act[np.searchsorted(b, t.start):np.searchsorted(b, t.end), col[m[t.speaker]]] = True
        score += w * act
        count += w * act.sum(axis=1)
    k_per_region = np.floor(count + 0.5 + _COUNT_EPS).astype(int)
    segments = []
    for r in range(n):
        k = k_per_region[r]
        if k <= 0:
            continue
        # all_labels is sorted, so a stable sort on -score breaks ties by label
        ranked = np.argsort(-score[r], kind="stable")[:k]
        for c in ranked:
            if score[r, c] > 0:
                segments.append((all_labels[c], int(b[r]), int(b[r + 1])))
    return Annotation.from_segments(rec, segments)


def dover_lap(
    hyps: Sequence[Annotation],
    weights: Sequence[float] | None = None,
    rank_exponent: float = 0.5,
) -> Annotation:
    """Fuse hypotheses of one recording.

    Without explicit ``weights``, rank weights are derived from pairwise
    DERs.  A single hypothesis is returned unchanged.
    """
    hyps = list(hyps)
    if not hyps:
        raise ValueError("need at least one hypothesis")
    if len(hyps) == 1:
        return hyps[0]
    if weights is None:
        weights = rank_weights(pairwise_der_matrix(hyps), rank_exponent)
    hset = HypothesisSet(tuple(hyps), tuple(weights))
    return vote(hset, map_labels(hset))
