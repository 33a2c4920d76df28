"""Direction-restricted multi-head self-attention.

A block runs two gated branches over the same sequence: one limited to
past-and-present context, one to future-and-present. The Q/K/V/output maps
are shared between the branches; only the input and gate projectors are
per-direction. Masking is additive: excluded positions get -inf at 64-bit
precision and a -1e9 sentinel at 32-bit, both of which underflow to an
exact zero attention weight after softmax, so causality holds bitwise.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DegenerateMask, EmptySequence, ShapeError

PAST = "past"
FUTURE = "future"
SYMMETRIC = "symmetric"  # no direction restriction; ablation control

MASKED_32 = -1.0e9
# Entries at or below this threshold count as excluded when checking masks.
_VISIBLE_THRESHOLD = -1.0e8


def _masked_value(dtype: torch.dtype) -> float:
    return float("-inf") if dtype == torch.float64 else MASKED_32


def causal_mask(
    t: int,
    direction: str,
    window: int | None = None,
    dtype: torch.dtype = torch.float32,
    device: torch.device | None = None,
) -> torch.Tensor:
    """Additive T x T mask; entry (i, j) is 0 iff query i may attend key j.

    ``past``: j <= i (and i - j < window if windowed).
    ``future``: j >= i (and j - i < window if windowed).
    The diagonal is always visible.
    """
    if t < 1:
        raise EmptySequence("mask requires T >= 1")
    if window is not None and window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if direction not in (PAST, FUTURE):
        raise ValueError(f"direction must be '{PAST}' or '{FUTURE}', got {direction!r}")
    idx = torch.arange(t, device=device)
    offset = idx.view(-1, 1) - idx.view(1, -1)  # i - j
    if direction == PAST:
        visible = offset >= 0
        if window is not None:
            visible &= offset < window
    else:
        visible = offset <= 0
        if window is not None:
            visible &= offset > -window
    mask = torch.zeros(t, t, dtype=dtype, device=device)
    return mask.masked_fill(~visible, _masked_value(dtype))


def masked_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: torch.Tensor,
    return_weights: bool = False,
):
    """softmax(Q K^T / sqrt(d_k) + mask) V over the last two dimensions.

    Accepts any leading batch/head dimensions; ``mask`` must broadcast
    against the (T, T) score matrix. Raises DegenerateMask if any mask
    row excludes every key.
    """
    if q.shape[-1] != k.shape[-1] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"q {tuple(q.shape)} and k {tuple(k.shape)} not conformable")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"k {tuple(k.shape)} and v {tuple(v.shape)} disagree on T")
    if mask.shape[-1] != k.shape[-2] or mask.shape[-2] != q.shape[-2]:
        raise ShapeError(f"mask {tuple(mask.shape)} does not match T={q.shape[-2]}")
    if not (mask > _VISIBLE_THRESHOLD).any(dim=-1).all():
        raise DegenerateMask("a mask row excludes every position")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = torch.matmul(q, k.transpose(-2, -1)) * scale + mask
    weights = torch.softmax(scores, dim=-1)
    out = torch.matmul(weights, v)
    if return_weights:
        return out, weights
    return out


class CausalAttention(nn.Module):
    """Gated bidirectional block with shared attention weights.

    ``direction_mode`` selects the context each branch sees:
      * ``bidirectional``: branch 0 past-only, branch 1 future-only;
      * ``past_only``: both branches past-only;
      * ``symmetric``: no masking (full context), the non-causal control.
    """

    MODES = {
        "bidirectional": (PAST, FUTURE),
        "past_only": (PAST, PAST),
        "symmetric": (SYMMETRIC, SYMMETRIC),
    }

    def __init__(
        self,
        d_model: int,
        num_heads: int = 4,
        d_attn: int | None = None,
        window: int | None = None,
        direction_mode: str = "bidirectional",
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        d_attn = d_model if d_attn is None else d_attn
        if d_attn % num_heads != 0:
            raise ShapeError(f"d_attn={d_attn} not divisible by num_heads={num_heads}")
        if direction_mode not in self.MODES:
            raise ValueError(f"unknown direction_mode {direction_mode!r}")
        self.d_model = d_model
        self.d_attn = d_attn
        self.num_heads = num_heads
        self.window = window
        self.direction_mode = direction_mode
        self.branch_directions = self.MODES[direction_mode]
        # Per-branch input and gate projectors.
        self.in_projs = nn.ModuleList(
            [nn.Linear(d_model, d_attn, dtype=dtype) for _ in range(2)]
        )
        self.gate_projs = nn.ModuleList(
            [nn.Linear(d_model, d_attn, dtype=dtype) for _ in range(2)]
        )
        # One shared Q/K/V/output set referenced by both branches.
        self.wq = nn.Linear(d_attn, d_attn, dtype=dtype)
        self.wk = nn.Linear(d_attn, d_attn, dtype=dtype)
        self.wv = nn.Linear(d_attn, d_attn, dtype=dtype)
        self.wo = nn.Linear(2 * d_attn, d_model, dtype=dtype)

    def _bias(self, t, direction, pad_mask, dtype, device) -> torch.Tensor:
        if direction == SYMMETRIC:
            bias = torch.zeros(t, t, dtype=dtype, device=device)
        else:
            bias = causal_mask(t, direction, self.window, dtype, device)
        bias = bias.view(1, 1, t, t)
        if pad_mask is not None:
            key_bias = torch.where(
                pad_mask.view(-1, 1, 1, t),
                torch.zeros((), dtype=dtype, device=device),
                torch.full((), _masked_value(dtype), dtype=dtype, device=device),
            )
            bias = bias + key_bias
            # Keep padded query rows finite; their outputs are re-masked anyway.
            eye = torch.eye(t, dtype=torch.bool, device=device).view(1, 1, t, t)
            bias = bias.masked_fill(eye, 0.0)
        return bias

    def branch_output(
        self, x: torch.Tensor, branch: int, pad_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        """One gated directional branch, before concatenation and Wo."""
        b, t, _ = x.shape
        direction = self.branch_directions[branch]
        u = self.in_projs[branch](x)
        head_dim = self.d_attn // self.num_heads

        def to_heads(z):
            return z.view(b, t, self.num_heads, head_dim).transpose(1, 2)

        q, k, v = to_heads(self.wq(u)), to_heads(self.wk(u)), to_heads(self.wv(u))
        bias = self._bias(t, direction, pad_mask, x.dtype, x.device)
        att = masked_attention(q, k, v, bias)
        att = att.transpose(1, 2).reshape(b, t, self.d_attn)
        return att * F.silu(self.gate_projs[branch](x))

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        if x.dim() != 3 or x.shape[-1] != self.d_model:
            raise ShapeError(f"expected (B, T, {self.d_model}), got {tuple(x.shape)}")
        branches = [self.branch_output(x, i, pad_mask) for i in range(2)]
        return self.wo(torch.cat(branches, dim=-1))
