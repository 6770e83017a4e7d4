"""Diarization error rate with an optimal global speaker mapping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from diarkit.timeline import Annotation, Timeline, overlap_regions, to_seconds, to_ticks


class UndefinedRateError(ValueError):
    """Raised when a rate is requested for zero reference speech."""


@dataclass(frozen=True)
class ScoringOptions:
    collar: float = 0.25
    score_overlaps: bool = True
    uem: Timeline | None = None

    def __post_init__(self):
        if self.collar < 0:
            raise ValueError("collar must be non-negative")


@dataclass(frozen=True)
class DERBreakdown:
    """Error components in ticks; rates are derived on demand."""

    miss_ticks: int = 0
    false_alarm_ticks: int = 0
    confusion_ticks: int = 0
    total_reference_ticks: int = 0
    mapping: dict = field(default_factory=dict, compare=False)

    @property
    def miss(self) -> float:
        return to_seconds(self.miss_ticks)

    @property
    def false_alarm(self) -> float:
        return to_seconds(self.false_alarm_ticks)

    @property
    def confusion(self) -> float:
        return to_seconds(self.confusion_ticks)

    @property
    def total_reference(self) -> float:
        return to_seconds(self.total_reference_ticks)

    @property
    def error_ticks(self) -> int:
        return self.miss_ticks + self.false_alarm_ticks + self.confusion_ticks

    @property
    def der(self) -> float:
        if self.total_reference_ticks == 0:
            raise UndefinedRateError("DER undefined: no reference speech in the scored region")
        return self.error_ticks / self.total_reference_ticks

    def __add__(self, other: "DERBreakdown") -> "DERBreakdown":
        return DERBreakdown(
            self.miss_ticks + other.miss_ticks,
            self.false_alarm_ticks + other.false_alarm_ticks,
            self.confusion_ticks + other.confusion_ticks,
            self.total_reference_ticks + other.total_reference_ticks,
        )

    def as_dict(self) -> dict:
        out = {
            "miss": self.miss,
            "false_alarm": self.false_alarm,
            "confusion": self.confusion,
            "total_reference": self.total_reference,
        }
        out["der"] = self.der if self.total_reference_ticks else None
        return out


def scored_region(ref: Annotation, hyp: Annotation, opts: ScoringOptions) -> Timeline:
    """Where errors are counted: the UEM minus collars (and overlaps if off)."""
    if opts.uem is not None:
        region = opts.uem
    else:
        ticks = [t.start for t in ref.turns + hyp.turns] + [t.end for t in ref.turns + hyp.turns]
        region = Timeline(((min(ticks), max(ticks)),)) if ticks else Timeline()
    collar = to_ticks(opts.collar)
    if collar > 0:
        zones = []
        for t in ref.turns:
            zones.append((t.start - collar, t.start + collar))
            zones.append((t.end - collar, t.end + collar))
        region = region.subtract(Timeline(tuple(zones)))
    if not opts.score_overlaps:
        region = region.subtract(overlap_regions(ref))
    return region


def activity_matrices(ref: Annotation, hyp: Annotation, region: Timeline):
    """Cut the scored region into elementary pieces.

    Returns ``(durations, ref_active, hyp_active, ref_labels, hyp_labels)``
    where the activity matrices are boolean ``[n_pieces, n_speakers]``.
    """
    edges = {b for iv in region for b in iv}
    edges.update(t.start for t in ref.turns + hyp.turns)
    edges.update(t.end for t in ref.turns + hyp.turns)
    b = np.array(sorted(edges), dtype=np.int64)
    n = max(len(b) - 1, 0)

    def fill(intervals, out):
        for s, e in intervals:
            out[np.searchsorted(b, s):np.searchsorted(b, e)] = True

    scored = np.zeros(n, dtype=bool)
    fill(region, scored)

    def activity(ann):
        labels = ann.labels
        col = {lab: i for i, lab in enumerate(labels)}
        act = np.zeros((n, len(labels)), dtype=bool)
        for t in ann.turns:
            act[np.searchsorted(b, t.start):np.searchsorted(b, t.end), col[t.speaker]] = True
        return act[scored], labels

    ref_act, ref_labels = activity(ref)
    hyp_act, hyp_labels = activity(hyp)
    dur = np.diff(b)[scored] if n else np.zeros(0, dtype=np.int64)
    return dur, ref_act, hyp_act, ref_labels, hyp_labels


def der(ref: Annotation, hyp: Annotation, opts: ScoringOptions | None = None) -> DERBreakdown:
    """Score ``hyp`` against ``ref`` with the md-eval accounting.

    In each elementary piece with ``R`` reference and ``H`` hypothesis
    speakers: miss ``max(0, R-H)``, false alarm ``max(0, H-R)``, confusion
    ``min(R, H) - correct``, all weighted by duration.  ``correct`` counts
    the mapped (ref, hyp) pairs active together, under the one-to-one
    mapping that maximizes total co-activity over the whole recording.
    """
    opts = opts or ScoringOptions()
    region = scored_region(ref, hyp, opts)
    dur, ref_act, hyp_act, ref_labels, hyp_labels = activity_matrices(ref, hyp, region)
    R = ref_act.sum(axis=1)
    H = hyp_act.sum(axis=1)
    overlap = (ref_act * dur[:, None]).T.astype(np.int64) @ hyp_act.astype(np.int64)
    mapping = {}
    correct = 0
    if overlap.size:
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        correct = int(overlap[rows, cols].sum())
        mapping = {ref_labels[r]: hyp_labels[c] for r, c in zip(rows, cols) if overlap[r, c] > 0}
    return DERBreakdown(
        miss_ticks=int((dur * np.maximum(R - H, 0)).sum()),
        false_alarm_ticks=int((dur * np.maximum(H - R, 0)).sum()),
        confusion_ticks=int((dur * np.minimum(R, H)).sum()) - correct,
        total_reference_ticks=int((dur * R).sum()),
        mapping=mapping,
    )


def der_corpus(pairs: Sequence[tuple[Annotation, Annotation]], opts: ScoringOptions | None = None) -> DERBreakdown:
    """Time-weighted corpus DER: components summed before dividing."""
    if not pairs:
        raise ValueError("empty corpus")
    total = DERBreakdown()
    for ref, hyp in pairs:
        total = total + der(ref, hyp, opts)
    return total


def pairwise_der_matrix(hyps: Sequence[Annotation]) -> np.ndarray:
    """``D[i, j]`` = DER of ``hyps[j]`` scored against ``hyps[i]``.

    No collar, overlaps scored.  An empty reference gives 0 against an
    empty hypothesis and 1 otherwise.
    """
    n = len(hyps)
    opts = ScoringOptions(collar=0.0, score_overlaps=True)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            res = der(hyps[i], hyps[j], opts)
            if res.total_reference_ticks == 0:
                out[i, j] = 0.0 if res.false_alarm_ticks == 0 else 1.0
            else:
                out[i, j] = res.der
    return out


def parse_uem(text: str) -> dict[str, Timeline]:
    """UEM lines ``recording channel onset offset`` (seconds)."""
    spans: dict[str, list[tuple[int, int]]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        if len(fields) < 4:
            raise ValueError(f"UEM line {lineno}: expected 'recording channel onset offset'")
        spans.setdefault(fields[0], []).append((to_ticks(float(fields[2])), to_ticks(float(fields[3]))))
    return {rec: Timeline(tuple(ivs)) for rec, ivs in spans.items()}
