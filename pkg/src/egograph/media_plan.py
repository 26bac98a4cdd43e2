"""Deterministic video preprocessing plans computed from metadata alone.

Videos are sampled at 1 FPS / 480p and cut into segments of at most 400 s
for scene-graph generation. For whole-video prompts, a temporal divisor
accelerates the video so it fits a 2400 s processing window. No media is
decoded here: frame extraction is left to an external tool consuming the
frame manifest.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

MAX_SEGMENT_S = 400.0
PROCESSING_WINDOW_S = 2400.0
GAZE_LOOKBACK_S = 400.0
MIN_EFFECTIVE_S = 1.0


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    duration: float
    fps_plan: int = 1
    resolution_plan: str = "480p"

    def __post_init__(self):
        if not self.duration > 0 or not math.isfinite(self.duration):
            raise ValueError(f"video duration must be positive, got {self.duration}")


@dataclass(frozen=True)
class SegmentPlan:
    index: int
    start: float
    end: float

    @property
    def length(self) -> float:
        return self.end - self.start

    def manifest_id(self, video_id: str) -> str:
        return f"{video_id}/segment-{self.index:03d}"


@dataclass(frozen=True)
class AccelerationPlan:
    divisor: int
    effective_duration: float


def _as_meta(meta: VideoMeta | float) -> VideoMeta:
    return meta if isinstance(meta, VideoMeta) else VideoMeta("video", float(meta))


def plan_segments(meta: VideoMeta | float, max_segment: float = MAX_SEGMENT_S) -> list[SegmentPlan]:
    """Tile ``[0, duration)`` with contiguous windows of ``max_segment`` seconds.

    All windows but the last are exactly ``max_segment`` long.
    """
    meta = _as_meta(meta)
    if not max_segment > 0:
        raise ValueError("max_segment must be positive")
    n = math.ceil(meta.duration / max_segment)
    return [
        SegmentPlan(i, i * max_segment, min((i + 1) * max_segment, meta.duration))
        for i in range(n)
    ]


def temporal_divisor(meta: VideoMeta | float, window: float = PROCESSING_WINDOW_S) -> AccelerationPlan:
    """Smallest integer speed-up bringing the video within ``window`` seconds."""
    meta = _as_meta(meta)
    divisor = max(1, math.ceil(meta.duration / window))
    return AccelerationPlan(divisor, max(MIN_EFFECTIVE_S, meta.duration / divisor))


def gaze_window(question_time: float, lookback: float = GAZE_LOOKBACK_S) -> tuple[float, float]:
    if question_time < 0:
        raise ValueError("question_time must be nonnegative")
    return (max(0.0, question_time - lookback), float(question_time))


def frame_manifest(
    meta: VideoMeta | float,
    accelerate: bool = True,
    window: float = PROCESSING_WINDOW_S,
    max_segment: float = MAX_SEGMENT_S,
) -> list[dict]:
    """Timestamps to sample at 1 FPS, optionally under the temporal divisor.

    With ``accelerate`` the sampling step is ``divisor`` seconds of source
    video; each entry also carries the 400 s segment it falls in.
    """
    meta = _as_meta(meta)
    step = temporal_divisor(meta, window).divisor if accelerate else 1
    n = math.ceil(meta.duration / step)
    return [
        {"global_time_s": float(i * step), "segment_index": int((i * step) // max_segment)}
        for i in range(n)
    ]


def plan_summary(meta: VideoMeta) -> dict:
    return {
        "video": asdict(meta),
        "segments": [asdict(s) for s in plan_segments(meta)],
        "acceleration": asdict(temporal_divisor(meta)),
    }
