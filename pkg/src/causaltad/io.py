"""On-disk formats for features, annotations, and predictions.

Feature payloads are raw little-endian float32 (one ``.f32`` file per video)
described by a sidecar JSON manifest, so round trips are bit-exact and the
format stays trivially portable. Annotations and predictions are single JSON
documents.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import (
    CorruptFeatureFile,
    InvalidData,
    InvalidSegment,
    IoError,
    NotFound,
    UnknownLabel,
)
from .types import AnnotationDB, FeatureSequence, Proposal, SegmentAnnotation, VideoRecord

FEATURE_DTYPE = np.dtype("<f4")


def _read_json(path: str | os.PathLike) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidData(f"{path} is not valid JSON: {exc}") from exc


def _write_json(path: str | os.PathLike, payload: dict) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Features: JSON manifest + one .f32 binary per video


def write_features(out_dir: str | os.PathLike, sequences: dict[str, FeatureSequence]) -> Path:
    """Write feature payloads and their manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    try:
        feat_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {feat_dir}: {exc}") from exc
    entries = {}
    for video_id in sorted(sequences):
        seq = sequences[video_id].validate()
        rel_path = f"features/{video_id}.f32"
        payload = np.ascontiguousarray(seq.features, dtype=FEATURE_DTYPE).tobytes()
        try:
            with open(out_dir / rel_path, "wb") as f:
                f.write(payload)
        except OSError as exc:
            raise IoError(f"cannot write {out_dir / rel_path}: {exc}") from exc
        entries[video_id] = {
            "path": rel_path,
            "T": seq.num_snippets,
            "D": seq.feature_dim,
            "feature_fps": seq.feature_fps,
        }
    manifest_path = out_dir / "manifest.json"
    _write_json(manifest_path, {"feature_format": "f32le", "videos": entries})
    return manifest_path


def load_manifest(manifest_path: str | os.PathLike) -> dict:
    manifest = _read_json(manifest_path)
    if "videos" not in manifest:
        raise InvalidData(f"{manifest_path}: manifest has no 'videos' table")
    return manifest


def load_features(manifest_path: str | os.PathLike, video_id: str) -> FeatureSequence:
    """Load one video's features as described by the manifest."""
    manifest = load_manifest(manifest_path)
    entry = manifest["videos"].get(video_id)
    if entry is None:
        raise NotFound(f"video {video_id!r} not in manifest {manifest_path}")
    t, d = int(entry["T"]), int(entry["D"])
    fps = float(entry["feature_fps"])
    payload_path = Path(manifest_path).parent / entry["path"]
    try:
        payload = payload_path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {payload_path}: {exc}") from exc
    expected = t * d * FEATURE_DTYPE.itemsize
    if len(payload) != expected:
        raise CorruptFeatureFile(
            f"{payload_path}: expected {expected} bytes for {t}x{d}, got {len(payload)}"
        )
    features = np.frombuffer(payload, dtype=FEATURE_DTYPE).reshape(t, d).copy()
    if not np.all(np.isfinite(features)):
        raise InvalidData(f"{payload_path}: non-finite feature values")
    return FeatureSequence(
        video_id=video_id,
        features=features,
        feature_fps=fps,
        duration_s=t / fps,
    ).validate()


# ---------------------------------------------------------------------------
# Annotations


def load_annotations(path: str | os.PathLike) -> AnnotationDB:
    """Parse the annotation JSON; out-of-range segments are clipped, not dropped."""
    doc = _read_json(path)
    try:
        num_classes = int(doc["num_classes"])
        class_names = list(doc["classes"])
        database = doc["database"]
    except KeyError as exc:
        raise InvalidData(f"{path}: missing annotation key {exc}") from exc
    name_to_id = {name: i for i, name in enumerate(class_names)}
    videos: dict[str, VideoRecord] = {}
    clip_warnings = 0
    for video_id, rec in database.items():
        duration = float(rec["duration"])
        segments = []
        for ann in rec.get("annotations", []):
            start, end = (float(v) for v in ann["segment"])
            if "label_id" in ann:
                label_id = int(ann["label_id"])
                if not (0 <= label_id < num_classes):
                    raise UnknownLabel(f"{video_id}: label_id {label_id} out of range")
            elif "label" in ann:
                if ann["label"] not in name_to_id:
                    raise UnknownLabel(f"{video_id}: unknown label {ann['label']!r}")
                label_id = name_to_id[ann["label"]]
            else:
                raise UnknownLabel(f"{video_id}: annotation has neither label_id nor label")
            clipped_start = min(max(start, 0.0), duration)
            clipped_end = min(max(end, 0.0), duration)
            if (clipped_start, clipped_end) != (start, end):
                clip_warnings += 1
            if not clipped_start < clipped_end:
                raise InvalidSegment(
                    f"{video_id}: segment [{start}, {end}] is empty after clipping"
                )
            segments.append(SegmentAnnotation(clipped_start, clipped_end, label_id))
        videos[video_id] = VideoRecord(
            duration_s=duration,
            subset=str(rec["subset"]),
            segments=segments,
        )
    db = AnnotationDB(
        num_classes=num_classes,
        class_names=class_names,
        videos=videos,
        clip_warnings=clip_warnings,
    )
    return db.validate()


def write_annotations(path: str | os.PathLike, db: AnnotationDB) -> None:
    database = {}
    for video_id in sorted(db.videos):
        rec = db.videos[video_id]
        database[video_id] = {
            "duration": rec.duration_s,
            "subset": rec.subset,
            "annotations": [
                {"segment": [seg.start_s, seg.end_s], "label_id": seg.label_id}
                for seg in rec.segments
            ],
        }
    _write_json(
        path,
        {"num_classes": db.num_classes, "classes": db.class_names, "database": database},
    )


# ---------------------------------------------------------------------------
# Predictions


def write_predictions(path: str | os.PathLike, predictions: dict[str, list[Proposal]]) -> None:
    """Write per-video proposals; floats are kept to six decimal digits."""
    results = {}
    for video_id in sorted(predictions):
        results[video_id] = [
            {
                "segment": [round(p.start_s, 6), round(p.end_s, 6)],
                "score": round(p.score, 6),
                "label_id": p.label_id,
            }
            for p in predictions[video_id]
        ]
    _write_json(path, {"results": results})


def read_predictions(path: str | os.PathLike) -> dict[str, list[Proposal]]:
    doc = _read_json(path)
    if "results" not in doc:
        raise InvalidData(f"{path}: prediction file has no 'results' object")
    predictions: dict[str, list[Proposal]] = {}
    for video_id, entries in doc["results"].items():
        predictions[video_id] = [
            Proposal(
                start_s=float(e["segment"][0]),
                end_s=float(e["segment"][1]),
                score=float(e["score"]),
                label_id=int(e["label_id"]),
            ).validate()
            for e in entries
        ]
    return predictions
