"""Detection metrics: temporal IoU, average precision, mAP, and Recall@kx.

Matching is greedy per class: predictions are visited in descending score
order (ties by earlier start, then video id) and each one claims the
still-unmatched ground-truth interval in its video with the highest tIoU at
or above the threshold. AP sums precision at true-positive ranks divided by
the ground-truth count. Classes with no ground truth are excluded from the
mAP mean and flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyGroundTruth
from .types import AnnotationDB, Proposal


@dataclass
class EvalConfig:
    thresholds: list[float] = field(default_factory=lambda: [0.3, 0.5, 0.7])
    # (k, tIoU) pairs for Recall@kx.
    recall_at: list[tuple[int, float]] = field(default_factory=lambda: [(1, 0.5)])

    def validate(self) -> "EvalConfig":
        if not self.thresholds or any(not (0.0 < t <= 1.0) for t in self.thresholds):
            raise ConfigError("eval.thresholds must be non-empty values in (0, 1]")
        for k, tau in self.recall_at:
            if k < 1 or not (0.0 < tau <= 1.0):
                raise ConfigError(f"eval.recall_at entry ({k}, {tau}) invalid")
        return self


def tiou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Temporal intersection-over-union of two intervals; 0 when disjoint."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    if inter <= 0.0:
        return 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union


def tiou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise tIoU between (n, 2) and (m, 2) interval arrays."""
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    inter = np.maximum(
        0.0,
        np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0]),
    )
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    return np.where(inter > 0.0, inter / np.maximum(union, 1e-12), 0.0)


def _sort_predictions(preds: list[tuple[str, Proposal]]) -> list[tuple[str, Proposal]]:
    return sorted(preds, key=lambda vp: (-vp[1].score, vp[1].start_s, vp[0]))


def _greedy_match(
    preds: list[tuple[str, Proposal]],
    gts: dict[str, list[tuple[float, float]]],
    tau: float,
) -> list[bool]:
    """True/false per prediction (in the given order) under greedy matching."""
    matched: dict[str, np.ndarray] = {
        vid: np.zeros(len(segs), dtype=bool) for vid, segs in gts.items()
    }
    flags = []
    for vid, p in preds:
        segs = gts.get(vid, [])
        best_iou, best_idx = 0.0, -1
        for gi, seg in enumerate(segs):
            if matched[vid][gi]:
                continue
            ov = tiou((p.start_s, p.end_s), seg)
            if ov > best_iou:
                best_iou, best_idx = ov, gi
        if best_idx >= 0 and best_iou >= tau:
            matched[vid][best_idx] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(
    preds: list[tuple[str, Proposal]],
    gts: dict[str, list[tuple[float, float]]],
    tau: float,
) -> float | None:
    """AP for one class; None when the class has no ground truth."""
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None
    if not preds:
        return 0.0
    ordered = _sort_predictions(preds)
    flags = _greedy_match(ordered, gts, tau)
    tp_cum = 0
    ap = 0.0
    for rank, is_tp in enumerate(flags, start=1):
        if is_tp:
            tp_cum += 1
            ap += tp_cum / rank
    return ap / n_gt


@dataclass
class EvalReport:
    thresholds: list[float]
    map_per_threshold: list[float]
    average_map: float
    per_class_ap: dict[str, list[float]]  # class name -> AP per threshold
    recall: dict[str, float]  # "k@tau" -> value
    num_videos: int
    num_ground_truth: int
    num_predictions: int
    skipped_classes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "thresholds": self.thresholds,
            "map_per_threshold": self.map_per_threshold,
            "average_map": self.average_map,
            "per_class_ap": self.per_class_ap,
            "recall": self.recall,
            "counts": {
                "videos": self.num_videos,
                "ground_truth": self.num_ground_truth,
                "predictions": self.num_predictions,
            },
            "skipped_classes": self.skipped_classes,
        }

    def to_table(self) -> str:
        width = max([len("class")] + [len(c) for c in self.per_class_ap])
        header = ["tIoU".ljust(width)] + [f"{t:>8.2f}" for t in self.thresholds]
        lines = ["  ".join(header)]
        for name, aps in self.per_class_ap.items():
            lines.append("  ".join([name.ljust(width)] + [f"{a:>8.4f}" for a in aps]))
        lines.append(
            "  ".join(["mAP".ljust(width)] + [f"{m:>8.4f}" for m in self.map_per_threshold])
        )
        lines.append(f"average mAP: {self.average_map:.4f}")
        for key, value in self.recall.items():
            lines.append(f"recall@{key}: {value:.4f}")
        lines.append(
            f"videos: {self.num_videos}  ground truth: {self.num_ground_truth}  "
            f"predictions: {self.num_predictions}"
        )
        if self.skipped_classes:
            lines.append("skipped (no ground truth): " + ", ".join(self.skipped_classes))
        return "\n".join(lines)


def detection_map(
    predictions: dict[str, list[Proposal]],
    db: AnnotationDB,
    cfg: EvalConfig = EvalConfig(),
    subset: str | None = None,
) -> EvalReport:
    """mAP over the threshold grid plus the configured Recall@kx values."""
    cfg.validate()
    video_ids = db.subset_ids(subset)
    if not video_ids or all(not db.videos[v].segments for v in video_ids):
        raise EmptyGroundTruth(f"no ground truth in subset {subset!r}")
    # Per-class views of ground truth and predictions on the evaluated videos.
    gt_by_class: dict[int, dict[str, list[tuple[float, float]]]] = {
        c: {} for c in range(db.num_classes)
    }
    for vid in video_ids:
        for seg in db.videos[vid].segments:
            gt_by_class[seg.label_id].setdefault(vid, []).append((seg.start_s, seg.end_s))
    preds_by_class: dict[int, list[tuple[str, Proposal]]] = {
        c: [] for c in range(db.num_classes)
    }
    n_preds = 0
    for vid in video_ids:
        for p in predictions.get(vid, []):
            if 0 <= p.label_id < db.num_classes:
                preds_by_class[p.label_id].append((vid, p))
                n_preds += 1

    per_class_ap: dict[str, list[float]] = {}
    skipped = []
    map_per_threshold = []
    ap_table = np.zeros((db.num_classes, len(cfg.thresholds)))
    evaluated = np.zeros(db.num_classes, dtype=bool)
    for c in range(db.num_classes):
        for ti, tau in enumerate(cfg.thresholds):
            ap = average_precision(preds_by_class[c], gt_by_class[c], tau)
            if ap is None:
                break
            ap_table[c, ti] = ap
            evaluated[c] = True
        name = db.class_names[c]
        if evaluated[c]:
            per_class_ap[name] = [float(a) for a in ap_table[c]]
        elif preds_by_class[c]:
            skipped.append(name)
    if not evaluated.any():
        raise EmptyGroundTruth("no class has ground truth")
    for ti in range(len(cfg.thresholds)):
        map_per_threshold.append(float(ap_table[evaluated, ti].mean()))

    recall = {
        f"{k}x@{tau:g}": recall_at_kx(predictions, db, k, tau, subset)
        for k, tau in cfg.recall_at
    }
    n_gt = sum(len(db.videos[v].segments) for v in video_ids)
    return EvalReport(
        thresholds=list(cfg.thresholds),
        map_per_threshold=map_per_threshold,
        average_map=float(np.mean(map_per_threshold)),
        per_class_ap=per_class_ap,
        recall=recall,
        num_videos=len(video_ids),
        num_ground_truth=n_gt,
        num_predictions=n_preds,
        skipped_classes=skipped,
    )


def recall_at_kx(
    predictions: dict[str, list[Proposal]],
    db: AnnotationDB,
    k: int = 1,
    tau: float = 0.5,
    subset: str | None = None,
) -> float:
    """Recall keeping k * n top-scored predictions per (video, class) with n GT.

    Aggregated as total matched over total ground truth across all
    (video, class) pairs that have ground truth.
    """
    if k < 1:
        raise ConfigError(f"recall k must be >= 1, got {k}")
    total_gt = 0
    total_matched = 0
    for vid in db.subset_ids(subset):
        rec = db.videos[vid]
        by_class: dict[int, list[tuple[float, float]]] = {}
        for seg in rec.segments:
            by_class.setdefault(seg.label_id, []).append((seg.start_s, seg.end_s))
        for label_id, segs in by_class.items():
            n = len(segs)
            total_gt += n
            cand = [(vid, p) for p in predictions.get(vid, []) if p.label_id == label_id]
            top = _sort_predictions(cand)[: k * n]
            total_matched += sum(_greedy_match(top, {vid: segs}, tau))
    if total_gt == 0:
        return 0.0
    return total_matched / total_gt
