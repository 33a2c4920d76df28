"""The full detector: encoder pyramid plus shared heads, and batch inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .encoder import CausalEncoder, EncoderConfig
from .heads import DecodeConfig, DetectionHeads, RawDetectorOutput, decode
from .postprocess import NmsConfig, soft_nms
from .types import FeatureSequence, Proposal


@dataclass
class LevelOutput:
    """Head outputs for one pyramid level of a batch."""

    logits: torch.Tensor  # (B, T_l, C)
    dists: torch.Tensor  # (B, T_l, 2)
    mask: torch.Tensor | None  # (B, T_l) bool
    stride: int


class Detector(nn.Module):
    def __init__(
        self,
        in_dim: int,
        num_classes: int,
        cfg: EncoderConfig,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.cfg = cfg
        self.encoder = CausalEncoder(in_dim, cfg, dtype=dtype)
        self.heads = DetectionHeads(cfg.width, num_classes, dtype=dtype)

    def forward(
        self,
        x: torch.Tensor,
        pad_mask: torch.Tensor | None = None,
        training: bool = False,
        generator: torch.Generator | None = None,
    ) -> list[LevelOutput]:
        pyramid = self.encoder(x, pad_mask, training=training, generator=generator)
        outputs = self.heads(pyramid)
        return [
            LevelOutput(logits=lg, dists=ds, mask=level.mask, stride=level.stride)
            for (lg, ds), level in zip(outputs, pyramid)
        ]


def pad_batch(sequences: list[np.ndarray], dtype: torch.dtype = torch.float32):
    """Stack variable-length (T_i, D) arrays into (B, T_max, D) plus a mask."""
    t_max = max(s.shape[0] for s in sequences)
    d = sequences[0].shape[1]
    x = torch.zeros(len(sequences), t_max, d, dtype=dtype)
    mask = torch.zeros(len(sequences), t_max, dtype=torch.bool)
    for i, s in enumerate(sequences):
        x[i, : s.shape[0]] = torch.as_tensor(np.ascontiguousarray(s), dtype=dtype)
        mask[i, : s.shape[0]] = True
    return x, mask


def raw_from_outputs(
    outputs: list[LevelOutput],
    batch_index: int,
    seq: FeatureSequence,
) -> RawDetectorOutput:
    """Extract one video's raw output, dropping padded grid positions."""
    strides, logits, dists = [], [], []
    for level in outputs:
        valid = (
            int(level.mask[batch_index].sum()) if level.mask is not None
            else level.logits.shape[1]
        )
        strides.append(level.stride)
        logits.append(
            level.logits[batch_index, :valid].detach().cpu().numpy().astype(np.float32)
        )
        dists.append(level.dists[batch_index, :valid].detach().cpu().numpy().astype(np.float32))
    return RawDetectorOutput(
        video_id=seq.video_id,
        feature_fps=seq.feature_fps,
        duration_s=seq.duration_s,
        strides=strides,
        logits=logits,
        dists=dists,
    )


@torch.no_grad()
def run_inference(
    model: Detector,
    sequences: list[FeatureSequence],
    decode_cfg: DecodeConfig = DecodeConfig(),
    nms_cfg: NmsConfig = NmsConfig(),
    batch_size: int = 8,
    class_aware_nms: bool = True,
) -> tuple[dict[str, list[Proposal]], dict[str, RawDetectorOutput]]:
    """Decode and suppress proposals for every sequence; also return raws."""
    model.eval()
    predictions: dict[str, list[Proposal]] = {}
    raws: dict[str, RawDetectorOutput] = {}
    for lo in range(0, len(sequences), batch_size):
        batch = sequences[lo : lo + batch_size]
        x, mask = pad_batch([s.features for s in batch])
        outputs = model(x, mask, training=False)
        for bi, seq in enumerate(batch):
            raw = raw_from_outputs(outputs, bi, seq)
            raws[seq.video_id] = raw
            proposals = decode(raw, decode_cfg)
            predictions[seq.video_id] = soft_nms(proposals, nms_cfg, class_aware_nms)
    return predictions, raws
