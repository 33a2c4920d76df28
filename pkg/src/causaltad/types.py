"""Core data types: feature sequences, annotations, and proposals."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidData, InvalidSegment


@dataclass
class FeatureSequence:
    """A T x D matrix of snippet features with timing metadata.

    ``features[t]`` describes the snippet covering seconds
    ``[t / feature_fps, (t + 1) / feature_fps)``.
    """

    video_id: str
    features: np.ndarray  # (T, D) float32
    feature_fps: float
    duration_s: float

    @property
    def num_snippets(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def validate(self) -> "FeatureSequence":
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise InvalidData(f"{self.video_id}: features must be a non-empty T x D matrix")
        if not np.all(np.isfinite(self.features)):
            raise InvalidData(f"{self.video_id}: features contain non-finite values")
        if self.feature_fps <= 0:
            raise InvalidData(f"{self.video_id}: feature_fps must be positive")
        grid_duration = self.num_snippets / self.feature_fps
        if abs(grid_duration - self.duration_s) > 1.0 / self.feature_fps + 1e-9:
            raise InvalidData(
                f"{self.video_id}: duration {self.duration_s}s inconsistent with "
                f"{self.num_snippets} snippets at {self.feature_fps} fps"
            )
        return self


@dataclass(frozen=True)
class SegmentAnnotation:
    """One ground-truth action interval, in seconds."""

    start_s: float
    end_s: float
    label_id: int

    @property
    def length_s(self) -> float:
        return self.end_s - self.start_s

    def validate(self, duration_s: float, num_classes: int) -> "SegmentAnnotation":
        if not (0.0 <= self.start_s < self.end_s <= duration_s + 1e-9):
            raise InvalidSegment(
                f"segment [{self.start_s}, {self.end_s}] invalid for duration {duration_s}"
            )
        if not (0 <= self.label_id < num_classes):
            raise InvalidSegment(f"label_id {self.label_id} out of range [0, {num_classes})")
        return self


@dataclass
class VideoRecord:
    """Per-video ground truth: duration, split membership, and segments."""

    duration_s: float
    subset: str  # train | val | test
    segments: list[SegmentAnnotation] = field(default_factory=list)


@dataclass
class AnnotationDB:
    """Ground-truth database keyed by video id."""

    num_classes: int
    class_names: list[str]
    videos: dict[str, VideoRecord]
    clip_warnings: int = 0

    def validate(self) -> "AnnotationDB":
        if len(self.class_names) != self.num_classes:
            raise InvalidData(
                f"class table has {len(self.class_names)} entries, expected {self.num_classes}"
            )
        for video_id, rec in self.videos.items():
            if rec.subset not in ("train", "val", "test"):
                raise InvalidData(f"{video_id}: unknown subset {rec.subset!r}")
            for seg in rec.segments:
                seg.validate(rec.duration_s, self.num_classes)
        return self

    def subset_ids(self, subset: str | None) -> list[str]:
        """Sorted video ids, optionally restricted to one split."""
        ids = [v for v, rec in self.videos.items() if subset is None or rec.subset == subset]
        return sorted(ids)


@dataclass(frozen=True)
class Proposal:
    """A scored candidate interval; flows through decode, NMS, and evaluation."""

    start_s: float
    end_s: float
    score: float
    label_id: int

    def validate(self) -> "Proposal":
        if not (self.start_s < self.end_s):
            raise InvalidData(f"proposal [{self.start_s}, {self.end_s}] is empty")
        if not (np.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise InvalidData(f"proposal score {self.score} outside [0, 1]")
        return self
