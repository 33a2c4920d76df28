"""Temporal action detection with direction-restricted temporal context.

A one-stage anchor-free detector whose encoder blocks fuse past-only /
future-only masked self-attention with a decomposed bidirectional selective
state-space branch, plus training, post-processing, and evaluation — all
verifiable at desk scale on synthetic feature streams.
"""

__version__ = "0.1.0"

from .types import AnnotationDB, FeatureSequence, Proposal, SegmentAnnotation, VideoRecord

__all__ = [
    "AnnotationDB",
    "FeatureSequence",
    "Proposal",
    "SegmentAnnotation",
    "VideoRecord",
    "__version__",
]
