"""Input embedding, hybrid blocks, and the multi-scale feature pyramid.

A hybrid block normalizes its input once, feeds both the attention branch
and the state-space branch, concatenates the two branch outputs, and maps
them back to the model width through one fusion layer inside a residual
connection. Levels after the first halve the time axis with a strided
depthwise convolution (or max pooling).

Batches of variable-length videos are carried with a boolean validity mask;
every stage re-zeroes padded positions so padding can never leak into real
outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .attention import CausalAttention
from .errors import ConfigError, SequenceTooShort, ShapeError
from .ssm import CausalSSM

BRANCH_MODES = ("hybrid", "attention_only", "ssm_only")
DIRECTION_MODES = ("bidirectional", "past_only", "symmetric")


@dataclass
class EncoderConfig:
    levels: int = 6
    width: int = 64  # model width D
    heads: int = 4
    attn_dim: int | None = None  # defaults to width
    ssm_state: int = 16
    ssm_expand: float = 2.0
    conv_width: int = 4
    ssm_chunk: int | None = None  # None picks a chunk near sqrt(T)
    channel_dropout_p: float = 0.1
    blocks_per_stage: int = 1
    attention_window: int | None = None
    branch_mode: str = "hybrid"
    direction_mode: str = "bidirectional"
    downsample: str = "conv"  # conv | maxpool

    def validate(self) -> "EncoderConfig":
        if self.levels < 1:
            raise ConfigError("encoder.levels must be >= 1")
        if self.width < 1 or self.blocks_per_stage < 1:
            raise ConfigError("encoder.width and blocks_per_stage must be >= 1")
        attn_dim = self.width if self.attn_dim is None else self.attn_dim
        if attn_dim % self.heads != 0:
            raise ConfigError(f"attn_dim={attn_dim} must be divisible by heads={self.heads}")
        if not (0.0 <= self.channel_dropout_p < 1.0):
            raise ConfigError("encoder.channel_dropout_p must be in [0, 1)")
        if self.branch_mode not in BRANCH_MODES:
            raise ConfigError(f"encoder.branch_mode must be one of {BRANCH_MODES}")
        if self.direction_mode not in DIRECTION_MODES:
            raise ConfigError(f"encoder.direction_mode must be one of {DIRECTION_MODES}")
        if self.downsample not in ("conv", "maxpool"):
            raise ConfigError("encoder.downsample must be 'conv' or 'maxpool'")
        if self.attention_window is not None and self.attention_window < 1:
            raise ConfigError("encoder.attention_window must be >= 1 when set")
        return self


def pyramid_lengths(t: int, levels: int) -> list[int]:
    """Per-level sequence lengths: T, ceil(T/2), ceil(T/4), ..."""
    out = [t]
    for _ in range(levels - 1):
        out.append(-(-out[-1] // 2))
    return out


@dataclass
class LevelFeatures:
    """One pyramid level: features, validity mask, and stride in snippets."""

    features: torch.Tensor  # (B, T_l, D)
    mask: torch.Tensor | None  # (B, T_l) bool, True where real
    stride: int


PyramidFeatures = list[LevelFeatures]


def _apply_mask(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return x
    return x * mask.unsqueeze(-1).to(x.dtype)


class InputEmbedding(nn.Module):
    """Channel dropout on the raw features, then two pointwise conv layers."""

    def __init__(self, in_dim: int, width: int, dropout_p: float = 0.0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.in_dim = in_dim
        self.dropout_p = dropout_p
        self.fc1 = nn.Linear(in_dim, width, dtype=dtype)
        self.fc2 = nn.Linear(width, width, dtype=dtype)

    def forward(
        self,
        x: torch.Tensor,
        pad_mask: torch.Tensor | None = None,
        training: bool = False,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"expected feature dim {self.in_dim}, got {x.shape[-1]}")
        if training and self.dropout_p > 0.0:
            keep = (
                torch.rand(x.shape[0], 1, self.in_dim, generator=generator, dtype=x.dtype)
                >= self.dropout_p
            )
            x = x * keep.to(x.dtype) / (1.0 - self.dropout_p)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return _apply_mask(x, pad_mask)


class HybridCausalBlock(nn.Module):
    """Residual fusion of the attention branch and the state-space branch.

    Y = X + fuse(concat(attn(norm(X)), ssm(norm(X)))). A disabled branch
    contributes zeros, which is equivalent to zeroing its half of the
    fusion weights.
    """

    def __init__(self, cfg: EncoderConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        cfg.validate()
        self.width = cfg.width
        self.branch_mode = cfg.branch_mode
        self.norm = nn.LayerNorm(cfg.width, dtype=dtype)
        self.attn = (
            CausalAttention(
                cfg.width,
                num_heads=cfg.heads,
                d_attn=cfg.attn_dim,
                window=cfg.attention_window,
                direction_mode=cfg.direction_mode,
                dtype=dtype,
            )
            if cfg.branch_mode != "ssm_only"
            else None
        )
        self.ssm = (
            CausalSSM(
                cfg.width,
                expand=cfg.ssm_expand,
                state_size=cfg.ssm_state,
                conv_width=cfg.conv_width,
                direction_mode=cfg.direction_mode,
                chunk_size=cfg.ssm_chunk,
                dtype=dtype,
            )
            if cfg.branch_mode != "attention_only"
            else None
        )
        self.fuse = nn.Linear(2 * cfg.width, cfg.width, dtype=dtype)
        # Start every block at the identity map: stabilizes early training.
        with torch.no_grad():
            self.fuse.weight.zero_()
            self.fuse.bias.zero_()

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        if x.dim() != 3 or x.shape[-1] != self.width:
            raise ShapeError(f"expected (B, T, {self.width}), got {tuple(x.shape)}")
        xn = self.norm(x)
        zeros = torch.zeros_like(xn)
        a = self.attn(xn, pad_mask) if self.attn is not None else zeros
        s = self.ssm(xn, pad_mask) if self.ssm is not None else zeros
        y = x + self.fuse(torch.cat([a, s], dim=-1))
        return _apply_mask(y, pad_mask)


class Downsample(nn.Module):
    """Halve the time axis (stride-2, width-3 receptive field)."""

    def __init__(self, width: int, mode: str = "conv", dtype: torch.dtype = torch.float32):
        super().__init__()
        self.mode = mode
        if mode == "conv":
            self.conv = nn.Conv1d(
                width, width, kernel_size=3, stride=2, padding=1, groups=width, dtype=dtype
            )

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None = None):
        x = _apply_mask(x, pad_mask)
        z = x.transpose(1, 2)
        if self.mode == "conv":
            z = self.conv(z)
        else:
            if pad_mask is not None:
                z = z.masked_fill(~pad_mask.unsqueeze(1), float("-inf"))
            z = F.max_pool1d(z, kernel_size=3, stride=2, padding=1)
        y = z.transpose(1, 2)
        new_mask = None if pad_mask is None else pad_mask[:, ::2]
        y = _apply_mask(y, new_mask)
        if self.mode == "maxpool" and pad_mask is not None:
            y = torch.nan_to_num(y, nan=0.0, posinf=0.0, neginf=0.0)
            y = _apply_mask(y, new_mask)
        return y, new_mask


class CausalEncoder(nn.Module):
    """Embedding plus one stage of hybrid blocks per pyramid level."""

    def __init__(self, in_dim: int, cfg: EncoderConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.embed = InputEmbedding(in_dim, cfg.width, cfg.channel_dropout_p, dtype=dtype)
        self.stages = nn.ModuleList(
            nn.ModuleList(HybridCausalBlock(cfg, dtype=dtype) for _ in range(cfg.blocks_per_stage))
            for _ in range(cfg.levels)
        )
        self.downsamples = nn.ModuleList(
            Downsample(cfg.width, cfg.downsample, dtype=dtype) for _ in range(cfg.levels - 1)
        )

    def forward(
        self,
        x: torch.Tensor,
        pad_mask: torch.Tensor | None = None,
        training: bool = False,
        generator: torch.Generator | None = None,
    ) -> PyramidFeatures:
        if x.dim() != 3:
            raise ShapeError(f"expected (B, T, D_in), got {tuple(x.shape)}")
        min_t = int(pad_mask.sum(dim=1).min()) if pad_mask is not None else x.shape[1]
        if min_t < 2 ** (self.cfg.levels - 1):
            raise SequenceTooShort(
                f"T={min_t} too short for {self.cfg.levels} pyramid levels"
            )
        z = self.embed(x, pad_mask, training=training, generator=generator)
        mask = pad_mask
        levels: PyramidFeatures = []
        for l in range(self.cfg.levels):
            if l > 0:
                z, mask = self.downsamples[l - 1](z, mask)
            for block in self.stages[l]:
                z = block(z, mask)
            levels.append(LevelFeatures(features=z, mask=mask, stride=2**l))
        return levels
