"""Anchor-free classification/regression heads, target assignment, losses,
and decoding of raw outputs into scored proposals.

Grid points live at ``i * stride / feature_fps`` seconds on every pyramid
level. A point regresses non-negative distances to the segment start and
end, expressed in units of its level's stride. Raw per-level outputs can be
serialized to ``.raw`` files so runs from several seeds can be averaged
before decoding.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import PyramidFeatures
from .errors import ConfigError, InvalidData, IoError, ShapeError
from .types import Proposal, SegmentAnnotation

BACKGROUND = -1
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class AssignmentConfig:
    center_radius: float = 1.5  # in strides
    range_base: float = 4.0  # first level covers max-distance [0, range_base) snippets

    def validate(self) -> "AssignmentConfig":
        if self.center_radius <= 0:
            raise ConfigError("assignment.center_radius must be > 0")
        if self.range_base <= 0:
            raise ConfigError("assignment.range_base must be > 0")
        return self


@dataclass
class DecodeConfig:
    score_threshold: float = 0.001
    pre_nms_topk: int = 2000

    def validate(self) -> "DecodeConfig":
        if not (0.0 <= self.score_threshold < 1.0):
            raise ConfigError("decode.score_threshold must be in [0, 1)")
        if self.pre_nms_topk < 1:
            raise ConfigError("decode.pre_nms_topk must be >= 1")
        return self


def regression_ranges(levels: int, base: float = 4.0) -> list[tuple[float, float]]:
    """Geometric partition of [0, inf) by max regression distance, in snippets.

    levels=6, base=4 gives [0,4), [4,8), [8,16), [16,32), [32,64), [64,inf).
    """
    bounds = [0.0] + [base * 2.0**l for l in range(levels - 1)]
    bounds.append(math.inf)
    return [(bounds[l], bounds[l + 1]) for l in range(levels)]


class DetectionHeads(nn.Module):
    """Pointwise conv towers shared across pyramid levels.

    The classification tower emits per-class logits; the regression tower
    emits two softplus-positive distances in stride units.
    """

    def __init__(self, width: int, num_classes: int, prior_prob: float = 0.01,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.num_classes = num_classes
        self.cls_hidden = nn.Linear(width, width, dtype=dtype)
        self.cls_out = nn.Linear(width, num_classes, dtype=dtype)
        self.reg_hidden = nn.Linear(width, width, dtype=dtype)
        self.reg_out = nn.Linear(width, 2, dtype=dtype)
        # Bias the classifier toward background so early training is stable.
        with torch.no_grad():
            self.cls_out.bias.fill_(-math.log((1.0 - prior_prob) / prior_prob))

    def forward(self, pyramid: PyramidFeatures) -> list[tuple[torch.Tensor, torch.Tensor]]:
        outputs = []
        for level in pyramid:
            z = level.features
            logits = self.cls_out(F.relu(self.cls_hidden(z)))
            dists = F.softplus(self.reg_out(F.relu(self.reg_hidden(z))))
            outputs.append((logits, dists))
        return outputs


@dataclass
class RawDetectorOutput:
    """Per-level logits and distances for one video, before decoding."""

    video_id: str
    feature_fps: float
    duration_s: float
    strides: list[int]
    logits: list[np.ndarray] = field(default_factory=list)  # (T_l, C) float32
    dists: list[np.ndarray] = field(default_factory=list)  # (T_l, 2) float32

    @property
    def num_classes(self) -> int:
        return int(self.logits[0].shape[1])

    def grid_signature(self) -> tuple:
        return (
            round(self.feature_fps, 9),
            round(self.duration_s, 9),
            tuple(self.strides),
            tuple(l.shape[0] for l in self.logits),
        )

    def validate(self) -> "RawDetectorOutput":
        if not (len(self.strides) == len(self.logits) == len(self.dists)):
            raise ShapeError("raw output level lists disagree in length")
        for lg, ds in zip(self.logits, self.dists):
            if lg.shape[0] != ds.shape[0] or ds.shape[1] != 2:
                raise ShapeError("raw output level shapes inconsistent")
            if (ds < 0).any():
                raise InvalidData("raw distances must be non-negative")
        return self


# ---------------------------------------------------------------------------
# Target assignment


def assign_targets(
    level_lengths: list[int],
    strides: list[int],
    feature_fps: float,
    segments: list[SegmentAnnotation],
    acfg: AssignmentConfig,
) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """Per-level class targets (BACKGROUND or label id) and distance targets.

    A point at time c is positive for segment g when c lies inside g, c is
    within center_radius strides of g's center, and the larger of its two
    boundary distances (in snippets) falls in the level's geometric range.
    Overlaps resolve to the shortest segment, then the earlier start.
    """
    acfg.validate()
    ranges = regression_ranges(len(level_lengths), acfg.range_base)
    snippet_dt = 1.0 / feature_fps
    ordered = sorted(segments, key=lambda s: (s.length_s, s.start_s))
    cls_targets, reg_targets = [], []
    for t_l, stride, (r_min, r_max) in zip(level_lengths, strides, ranges):
        cls = np.full(t_l, BACKGROUND, dtype=np.int64)
        reg = np.zeros((t_l, 2), dtype=np.float64)
        times = np.arange(t_l) * stride * snippet_dt
        for seg in ordered[::-1]:  # longest first; shorter segments overwrite
            inside = (times >= seg.start_s) & (times <= seg.end_s)
            center = 0.5 * (seg.start_s + seg.end_s)
            near_center = np.abs(times - center) <= acfg.center_radius * stride * snippet_dt
            left = (times - seg.start_s) * feature_fps  # snippets
            right = (seg.end_s - times) * feature_fps
            max_dist = np.maximum(left, right)
            in_range = (max_dist >= r_min) & (max_dist < r_max)
            pos = inside & near_center & in_range
            cls[pos] = seg.label_id
            reg[pos, 0] = left[pos] / stride
            reg[pos, 1] = right[pos] / stride
        cls_targets.append(torch.from_numpy(cls))
        reg_targets.append(torch.from_numpy(reg))
    return cls_targets, reg_targets


# ---------------------------------------------------------------------------
# Losses


def focal_loss(logits: torch.Tensor, cls_targets: torch.Tensor,
               num_positives: int | None = None) -> torch.Tensor:
    """Sigmoid focal loss (gamma=2, alpha=0.25) over points x classes,
    normalized by max(1, #positives)."""
    if logits.shape[0] != cls_targets.shape[0]:
        raise ShapeError("logits and class targets disagree on point count")
    num_classes = logits.shape[1]
    onehot = torch.zeros_like(logits)
    pos = cls_targets != BACKGROUND
    if pos.any():
        onehot[pos, cls_targets[pos]] = 1.0
    ce = F.binary_cross_entropy_with_logits(logits, onehot, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * onehot + (1.0 - p) * (1.0 - onehot)
    alpha_t = FOCAL_ALPHA * onehot + (1.0 - FOCAL_ALPHA) * (1.0 - onehot)
    loss = (alpha_t * (1.0 - p_t) ** FOCAL_GAMMA * ce).sum()
    denom = int(pos.sum()) if num_positives is None else num_positives
    return loss / max(1, denom)


def diou_loss(pred_dists: torch.Tensor, target_dists: torch.Tensor) -> torch.Tensor:
    """Distance-IoU loss over positive points, distances in stride units.

    Segments are reconstructed around each point: [-left, right]. Adds a
    squared center-offset penalty normalized by the enclosing length.
    """
    if pred_dists.shape != target_dists.shape:
        raise ShapeError("prediction and target distances disagree in shape")
    if pred_dists.numel() == 0:
        return pred_dists.sum()  # zero, but keeps the graph connected
    lp, rp = pred_dists[:, 0], pred_dists[:, 1]
    lt, rt = target_dists[:, 0], target_dists[:, 1]
    inter = torch.minimum(lp, lt) + torch.minimum(rp, rt)
    union = (lp + rp) + (lt + rt) - inter
    iou = inter / union.clamp(min=1e-9)
    center_pred = 0.5 * (rp - lp)
    center_tgt = 0.5 * (rt - lt)
    enclose = torch.maximum(lp, lt) + torch.maximum(rp, rt)
    penalty = (center_pred - center_tgt) ** 2 / (enclose**2).clamp(min=1e-9)
    return (1.0 - iou + penalty).mean()


def total_loss(
    outputs: list[tuple[torch.Tensor, torch.Tensor]],
    cls_targets: list[torch.Tensor],
    reg_targets: list[torch.Tensor],
    lambda_reg: float = 1.0,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """focal + lambda_reg * diou over flattened levels.

    ``outputs`` holds per-level (logits, dists) already restricted to real
    (unpadded) positions; targets must align 1:1.
    """
    logits = torch.cat([o[0] for o in outputs], dim=0)
    dists = torch.cat([o[1] for o in outputs], dim=0)
    cls = torch.cat(cls_targets, dim=0)
    reg = torch.cat(reg_targets, dim=0).to(dists.dtype)
    if logits.shape[0] != cls.shape[0]:
        raise ShapeError("outputs and targets disagree on point count")
    pos = cls != BACKGROUND
    cls_loss = focal_loss(logits, cls)
    reg_loss = diou_loss(dists[pos], reg[pos]) if bool(pos.any()) else dists.sum() * 0.0
    return cls_loss + lambda_reg * reg_loss, cls_loss, reg_loss


# ---------------------------------------------------------------------------
# Decoding


def decode(
    raw: RawDetectorOutput,
    cfg: DecodeConfig = DecodeConfig(),
    min_length_s: float = 1e-6,
) -> list[Proposal]:
    """Threshold, reconstruct segments, and keep the top-k across levels."""
    cfg.validate()
    snippet_dt = 1.0 / raw.feature_fps
    rows = []  # (score, start, end, label)
    for stride, logits, dists in zip(raw.strides, raw.logits, raw.dists):
        probs = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
        t_idx, c_idx = np.nonzero(probs > cfg.score_threshold)
        if t_idx.size == 0:
            continue
        times = t_idx * stride * snippet_dt
        start = np.clip(times - dists[t_idx, 0] * stride * snippet_dt, 0.0, raw.duration_s)
        end = np.clip(times + dists[t_idx, 1] * stride * snippet_dt, 0.0, raw.duration_s)
        keep = end - start > min_length_s
        rows.append(
            np.stack(
                [probs[t_idx, c_idx][keep], start[keep], end[keep], c_idx[keep].astype(np.float64)],
                axis=1,
            )
        )
    if not rows:
        return []
    table = np.concatenate(rows, axis=0)
    order = np.lexsort((table[:, 3], table[:, 2], table[:, 1], -table[:, 0]))
    table = table[order[: cfg.pre_nms_topk]]
    return [
        Proposal(start_s=float(r[1]), end_s=float(r[2]), score=float(r[0]), label_id=int(r[3]))
        for r in table
    ]


# ---------------------------------------------------------------------------
# .raw exchange files

_RAW_MAGIC = b"CTRW"
_RAW_VERSION = 1


def write_raw(path: str | Path, raw: RawDetectorOutput) -> None:
    raw.validate()
    header = {
        "version": _RAW_VERSION,
        "video_id": raw.video_id,
        "feature_fps": raw.feature_fps,
        "duration_s": raw.duration_s,
        "levels": [
            {"stride": s, "T": int(lg.shape[0]), "C": int(lg.shape[1])}
            for s, lg in zip(raw.strides, raw.logits)
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(_RAW_MAGIC)
            f.write(struct.pack("<IQ", _RAW_VERSION, len(blob)))
            f.write(blob)
            for lg, ds in zip(raw.logits, raw.dists):
                f.write(np.ascontiguousarray(lg, dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(ds, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_raw(path: str | Path) -> RawDetectorOutput:
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if payload[:4] != _RAW_MAGIC:
        raise InvalidData(f"{path}: not a raw detector output file")
    version, header_len = struct.unpack("<IQ", payload[4:16])
    if version != _RAW_VERSION:
        raise InvalidData(f"{path}: unsupported raw version {version}")
    header = json.loads(payload[16 : 16 + header_len].decode("utf-8"))
    offset = 16 + header_len
    logits, dists, strides = [], [], []
    for level in header["levels"]:
        t_l, c = level["T"], level["C"]
        n_logits = t_l * c * 4
        n_dists = t_l * 2 * 4
        if offset + n_logits + n_dists > len(payload):
            raise InvalidData(f"{path}: truncated raw payload")
        logits.append(
            np.frombuffer(payload, dtype="<f4", count=t_l * c, offset=offset).reshape(t_l, c).copy()
        )
        offset += n_logits
        dists.append(
            np.frombuffer(payload, dtype="<f4", count=t_l * 2, offset=offset).reshape(t_l, 2).copy()
        )
        offset += n_dists
        strides.append(int(level["stride"]))
    return RawDetectorOutput(
        video_id=header["video_id"],
        feature_fps=float(header["feature_fps"]),
        duration_s=float(header["duration_s"]),
        strides=strides,
        logits=logits,
        dists=dists,
    ).validate()
