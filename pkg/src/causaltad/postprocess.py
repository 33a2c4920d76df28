"""Proposal post-processing: Soft-NMS, noun x verb composition, ensembling.

Soft-NMS repeatedly selects the highest-scored proposal and decays the
scores of overlapping survivors with a Gaussian in tIoU (or removes them
outright in hard mode). Composition multiplies top-k noun and verb
probabilities per grid point into joint action candidates. Ensembling
averages raw logits and distances entrywise across seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, GridMismatch, ShapeError
from .heads import RawDetectorOutput
from .types import Proposal


@dataclass
class NmsConfig:
    sigma: float = 2.0  # Gaussian decay scale on tIoU^2
    method: str = "gaussian"  # gaussian | hard
    hard_iou_threshold: float = 0.5
    max_kept: int = 200
    min_score: float = 0.0  # selection stops once every survivor is below this

    def validate(self) -> "NmsConfig":
        if self.sigma <= 0:
            raise ConfigError("nms.sigma must be > 0")
        if self.method not in ("gaussian", "hard"):
            raise ConfigError("nms.method must be 'gaussian' or 'hard'")
        if not (0.0 <= self.hard_iou_threshold <= 1.0):
            raise ConfigError("nms.hard_iou_threshold must be in [0, 1]")
        if not (0.0 <= self.min_score <= 1.0):
            raise ConfigError("nms.min_score must be in [0, 1]")
        if self.max_kept < 1:
            raise ConfigError("nms.max_kept must be >= 1")
        return self


def soft_nms(
    proposals: list[Proposal], cfg: NmsConfig = NmsConfig(), class_aware: bool = True
) -> list[Proposal]:
    """Greedy suppression; exact score ties resolve to the earlier input.

    Gaussian mode rescales survivors by exp(-tIoU^2 / sigma); hard mode
    drops survivors whose tIoU exceeds the threshold. Output is ordered by
    final score (which equals selection order).
    """
    cfg.validate()
    n = len(proposals)
    if n == 0:
        return []
    start = np.array([p.start_s for p in proposals])
    end = np.array([p.end_s for p in proposals])
    label = np.array([p.label_id for p in proposals])
    score = np.array([p.score for p in proposals], dtype=np.float64)
    length = end - start
    alive = np.ones(n, dtype=bool)
    kept: list[Proposal] = []
    while len(kept) < cfg.max_kept and alive.any():
        live_idx = np.nonzero(alive)[0]
        live_scores = score[live_idx]
        if live_scores.max() < cfg.min_score:
            break
        # argmax with original input order breaking exact ties
        m = live_idx[int(np.argmax(live_scores))]
        alive[m] = False
        kept.append(replace(proposals[m], score=float(score[m])))
        rest = np.nonzero(alive)[0]
        if rest.size == 0:
            break
        if class_aware:
            rest = rest[label[rest] == label[m]]
            if rest.size == 0:
                continue
        inter = np.maximum(
            0.0, np.minimum(end[rest], end[m]) - np.maximum(start[rest], start[m])
        )
        union = length[rest] + length[m] - inter
        iou = np.where(inter > 0.0, inter / np.maximum(union, 1e-12), 0.0)
        if cfg.method == "gaussian":
            score[rest] = score[rest] * np.exp(-(iou**2) / cfg.sigma)
        else:
            alive[rest[iou > cfg.hard_iou_threshold]] = False
    return kept


def ensemble(raws: list[RawDetectorOutput]) -> RawDetectorOutput:
    """Entrywise mean of logits and distances across shape-identical runs.

    Values are summed in ascending order at 64-bit so the result is exactly
    invariant to permutations of the input list.
    """
    if not raws:
        raise ShapeError("ensemble requires at least one raw output")
    first = raws[0].validate()
    for other in raws[1:]:
        other.validate()
        if other.grid_signature() != first.grid_signature():
            raise ShapeError(
                f"raw outputs disagree on grid: {other.video_id} vs {first.video_id}"
            )
        if other.num_classes != first.num_classes:
            raise ShapeError("raw outputs disagree on class count")

    def mean_stack(arrays: list[np.ndarray]) -> np.ndarray:
        stacked = np.stack([a.astype(np.float64) for a in arrays], axis=0)
        stacked.sort(axis=0, kind="stable")
        return (stacked.sum(axis=0) / len(arrays)).astype(np.float32)

    n_levels = len(first.strides)
    return RawDetectorOutput(
        video_id=first.video_id,
        feature_fps=first.feature_fps,
        duration_s=first.duration_s,
        strides=list(first.strides),
        logits=[mean_stack([r.logits[l] for r in raws]) for l in range(n_levels)],
        dists=[mean_stack([r.dists[l] for r in raws]) for l in range(n_levels)],
    )


def compose_actions(
    noun_raw: RawDetectorOutput,
    verb_raw: RawDetectorOutput,
    k: int = 10,
    nms_cfg: NmsConfig = NmsConfig(),
    min_score: float = 0.0,
    boundary_source: str = "average",
) -> list[Proposal]:
    """Joint action candidates from separate noun and verb detectors.

    Per grid point the top-k noun and top-k verb probabilities produce k^2
    candidates scored by their product, labeled noun_id * V + verb_id. The
    candidate segment uses the two models' averaged boundary regressions
    (or the verb model's via ``boundary_source='verb'``), then class-agnostic
    Soft-NMS suppresses duplicates.
    """
    noun_raw.validate()
    verb_raw.validate()
    if noun_raw.grid_signature() != verb_raw.grid_signature():
        raise GridMismatch("noun and verb raw outputs were produced on different grids")
    if boundary_source not in ("average", "verb"):
        raise ConfigError("boundary_source must be 'average' or 'verb'")
    if k < 1:
        raise ConfigError("compose k must be >= 1")
    n_verbs = verb_raw.num_classes
    snippet_dt = 1.0 / noun_raw.feature_fps
    candidates: list[Proposal] = []
    for stride, n_logits, v_logits, n_dists, v_dists in zip(
        noun_raw.strides, noun_raw.logits, verb_raw.logits, noun_raw.dists, verb_raw.dists
    ):
        pn = 1.0 / (1.0 + np.exp(-n_logits.astype(np.float64)))
        pv = 1.0 / (1.0 + np.exp(-v_logits.astype(np.float64)))
        kn = min(k, pn.shape[1])
        kv = min(k, pv.shape[1])
        top_n = np.argsort(-pn, axis=1, kind="stable")[:, :kn]
        top_v = np.argsort(-pv, axis=1, kind="stable")[:, :kv]
        if boundary_source == "average":
            dists = 0.5 * (n_dists.astype(np.float64) + v_dists.astype(np.float64))
        else:
            dists = v_dists.astype(np.float64)
        for t in range(pn.shape[0]):
            c_s = t * stride * snippet_dt
            start = max(0.0, c_s - dists[t, 0] * stride * snippet_dt)
            end = min(noun_raw.duration_s, c_s + dists[t, 1] * stride * snippet_dt)
            if end - start <= 1e-9:
                continue
            for ni in top_n[t]:
                for vi in top_v[t]:
                    s = float(pn[t, ni] * pv[t, vi])
                    if s < min_score:
                        continue
                    candidates.append(
                        Proposal(
                            start_s=start,
                            end_s=end,
                            score=s,
                            label_id=int(ni) * n_verbs + int(vi),
                        )
                    )
    return soft_nms(candidates, nms_cfg, class_aware=False)
