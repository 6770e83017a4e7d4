"""Speaker diarization toolkit: score fusion, clustering, target-speaker
refinement, hypothesis fusion and DER scoring over RTTM data."""

from diarkit.timeline import Annotation, Timeline, Turn, parse_rttm, write_rttm

__version__ = "0.1.0"

__all__ = ["Annotation", "Timeline", "Turn", "parse_rttm", "write_rttm", "__version__"]
