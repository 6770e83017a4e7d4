"""Turns, annotations, timelines and RTTM I/O.

All times are stored as integer ticks of 0.1 ms so that interval
arithmetic and DER sums are exact.  Durations passed as function
arguments (window lengths, collars, ...) are in seconds throughout the
package and converted with :func:`to_ticks`.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable, Sequence

TICKS_PER_SECOND = 10_000


class RTTMParseError(ValueError):
    """Malformed RTTM input; ``lineno`` is 1-based."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def to_ticks(seconds: float) -> int:
    return int(round(float(seconds) * TICKS_PER_SECOND))


def to_seconds(ticks: int) -> float:
    return ticks / TICKS_PER_SECOND


def format_ticks(ticks: int) -> str:
    """Fixed 3-decimal seconds, rounded half-up, built from integers."""
    ms = (ticks + 5) // 10
    return f"{ms // 1000}.{ms % 1000:03d}"


# ----------------------------------------------------------------------------
# interval helpers on (start, end) tick pairs


def merge_intervals(intervals: Iterable[tuple[int, int]]) -> tuple[tuple[int, int], ...]:
    """Sort and merge overlapping or touching intervals; drops empty ones."""
    out: list[list[int]] = []
    for s, e in sorted(i for i in intervals if i[1] > i[0]):
        if out and s <= out[-1][1]:
            if e > out[-1][1]:
                out[-1][1] = e
        else:
            out.append([s, e])
    return tuple((s, e) for s, e in out)


def _intersect(a: Sequence[tuple[int, int]], b: Sequence[tuple[int, int]]) -> list[tuple[int, int]]:
    out = []
    i = j = 0
    while i < len(a) and j < len(b):
        s = max(a[i][0], b[j][0])
        e = min(a[i][1], b[j][1])
        if s < e:
            out.append((s, e))
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return out


def _subtract(a: Sequence[tuple[int, int]], b: Sequence[tuple[int, int]]) -> list[tuple[int, int]]:
    out = []
    j = 0
    for s, e in a:
        cur = s
        while j < len(b) and b[j][1] <= cur:
            j += 1
        k = j
        while k < len(b) and b[k][0] < e:
            if b[k][0] > cur:
                out.append((cur, b[k][0]))
            cur = max(cur, b[k][1])
            k += 1
        if cur < e:
            out.append((cur, e))
    return out


@dataclass(frozen=True)
class Timeline:
    """Sorted, pairwise disjoint, non-touching intervals in ticks."""

    intervals: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "intervals", merge_intervals(self.intervals))

    @classmethod
    def from_seconds(cls, pairs: Iterable[tuple[float, float]]) -> "Timeline":
        """Build from ``(start, end)`` pairs in seconds."""
        return cls(tuple((to_ticks(s), to_ticks(e)) for s, e in pairs))

    def __len__(self):
        return len(self.intervals)

    def __iter__(self):
        return iter(self.intervals)

    def __bool__(self):
        return bool(self.intervals)

    @property
    def duration_ticks(self) -> int:
        return sum(e - s for s, e in self.intervals)

    @property
    def duration(self) -> float:
        return to_seconds(self.duration_ticks)

    @property
    def extent(self) -> tuple[int, int] | None:
        if not self.intervals:
            return None
        return self.intervals[0][0], self.intervals[-1][1]

    def to_seconds(self) -> list[tuple[float, float]]:
        """``(onset, duration)`` pairs in seconds."""
        return [(to_seconds(s), to_seconds(e - s)) for s, e in self.intervals]

    def union(self, other: "Timeline") -> "Timeline":
        return Timeline(self.intervals + other.intervals)

    def intersect(self, other: "Timeline") -> "Timeline":
        return Timeline(tuple(_intersect(self.intervals, other.intervals)))

    def subtract(self, other: "Timeline") -> "Timeline":
        return Timeline(tuple(_subtract(self.intervals, other.intervals)))

    def crop(self, start: int, end: int) -> "Timeline":
        return self.intersect(Timeline(((start, end),)))


@dataclass(frozen=True)
class Turn:
    """One speaker-labelled interval. ``start``/``end`` are ticks."""

    recording_id: str
    speaker: str
    start: int
    end: int

    def __post_init__(self):
        if self.start < 0:
            raise ValueError(f"negative onset: {self.start}")
        if self.end <= self.start:
            raise ValueError(f"non-positive duration for turn {self}")
        if not self.speaker or any(c.isspace() for c in self.speaker):
            raise ValueError(f"invalid speaker label {self.speaker!r}")

    @classmethod
    def from_seconds(cls, recording_id: str, speaker: str, onset: float, duration: float) -> "Turn":
        start = to_ticks(onset)
        return cls(recording_id, speaker, start, start + to_ticks(duration))

    @property
    def onset(self) -> float:
        return to_seconds(self.start)

    @property
    def duration(self) -> float:
        return to_seconds(self.end - self.start)


def _normalize(recording_id: str, turns: Iterable[Turn]) -> tuple[Turn, ...]:
    by_speaker: dict[str, list[tuple[int, int]]] = {}
    for t in turns:
        if t.recording_id != recording_id:
            raise ValueError(f"turn from {t.recording_id!r} in annotation {recording_id!r}")
        by_speaker.setdefault(t.speaker, []).append((t.start, t.end))
    out = [
        Turn(recording_id, spk, s, e)
        for spk, ivs in by_speaker.items()
        for s, e in merge_intervals(ivs)
    ]
    out.sort(key=lambda t: (t.start, t.speaker, t.end))
    return tuple(out)


@dataclass(frozen=True)
class Annotation:
    """Normalized set of turns for one recording.

    Construction sorts turns by (onset, speaker) and merges touching or
    overlapping turns of the same speaker, so equality is structural.
    """

    recording_id: str
    turns: tuple[Turn, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "turns", _normalize(self.recording_id, self.turns))

    @classmethod
    def from_segments(cls, recording_id: str, segments: Iterable[tuple[str, int, int]]) -> "Annotation":
        """Build from ``(speaker, start_tick, end_tick)`` triples."""
        return cls(recording_id, tuple(Turn(recording_id, spk, s, e) for spk, s, e in segments if e > s))

    @classmethod
    def from_timelines(cls, recording_id: str, timelines: dict[str, Timeline]) -> "Annotation":
        return cls.from_segments(
            recording_id, ((spk, s, e) for spk, tl in timelines.items() for s, e in tl)
        )

    def __len__(self):
        return len(self.turns)

    @property
    def labels(self) -> list[str]:
        return sorted({t.speaker for t in self.turns})

    def speaker_timeline(self, speaker: str) -> Timeline:
        return Timeline(tuple((t.start, t.end) for t in self.turns if t.speaker == speaker))

    def speaker_timelines(self) -> dict[str, Timeline]:
        return {spk: self.speaker_timeline(spk) for spk in self.labels}

    def rename(self, mapping: dict[str, str]) -> "Annotation":
        return Annotation.from_segments(
            self.recording_id, ((mapping.get(t.speaker, t.speaker), t.start, t.end) for t in self.turns)
        )

    def crop(self, tl: Timeline) -> "Annotation":
        """Restrict every speaker to ``tl``."""
        return Annotation.from_timelines(
            self.recording_id, {spk: t.intersect(tl) for spk, t in self.speaker_timelines().items()}
        )


def support(ann: Annotation) -> Timeline:
    """Union of all turns."""
    return Timeline(tuple((t.start, t.end) for t in ann.turns))


def overlap_regions(ann: Annotation) -> Timeline:
    """Regions where at least two speakers are active."""
    events = []
    for t in ann.turns:
        events.append((t.start, 1))
        events.append((t.end, -1))
    events.sort()
    out = []
    depth = 0
    open_at = None
    for tick, delta in events:
        depth += delta
        if depth >= 2 and open_at is None:
            open_at = tick
        elif depth < 2 and open_at is not None:
            out.append((open_at, tick))
            open_at = None
    return Timeline(tuple(out))


# ----------------------------------------------------------------------------
# RTTM


def parse_rttm(text: str | io.TextIOBase) -> list[Annotation]:
    """Parse RTTM ``SPEAKER`` lines into one annotation per recording.

    Blank lines and lines starting with ``#`` or ``;;`` are skipped.  The
    channel field is ignored.  Recordings are returned in order of first
    appearance.
    """
    if not isinstance(text, str):
        text = text.read()
    turns: dict[str, list[Turn]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#") or stripped.startswith(";;"):
            continue
        fields = stripped.split()
        if len(fields) < 9 or fields[0] != "SPEAKER":
            raise RTTMParseError(lineno, f"expected a 9+ field SPEAKER line, got {stripped!r}")
        rec, onset_s, dur_s, spk = fields[1], fields[3], fields[4], fields[7]
        try:
            onset = to_ticks(float(onset_s))
            dur = to_ticks(float(dur_s))
        except ValueError:
            raise RTTMParseError(lineno, f"non-numeric onset/duration {onset_s!r} {dur_s!r}") from None
        if dur <= 0:
            raise RTTMParseError(lineno, f"non-positive duration {dur_s}")
        if onset < 0:
            raise RTTMParseError(lineno, f"negative onset {onset_s}")
        turns.setdefault(rec, []).append(Turn(rec, spk, onset, onset + dur))
    return [Annotation(rec, tuple(ts)) for rec, ts in turns.items()]


def write_rttm(annotations: Iterable[Annotation]) -> str:
    lines = []
    for ann in annotations:
        for t in ann.turns:
            lines.append(
                f"SPEAKER {ann.recording_id} 1 {format_ticks(t.start)} "
                f"{format_ticks(t.end - t.start)} <NA> <NA> {t.speaker} <NA> <NA>"
            )
    return "".join(line + "\n" for line in lines)


def read_rttm_file(path) -> list[Annotation]:
    with open(path, encoding="utf-8") as f:
        return parse_rttm(f.read())


def write_rttm_file(path, annotations: Iterable[Annotation]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(write_rttm(annotations))


def timeline_to_annotation(recording_id: str, tl: Timeline, label: str) -> Annotation:
    return Annotation.from_segments(recording_id, ((label, s, e) for s, e in tl))
