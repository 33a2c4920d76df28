"""Selective state-space sequence operator with decomposed bidirectional wrapper.

The scan realizes h_t = Abar_t * h_{t-1} + Bbar_t * x_t with input-dependent
step size, input map, and readout (softplus(W_d x), W_b x, W_c x). Two
evaluation paths exist: a plain sequential recurrence (the oracle) and a
chunked path that composes per-chunk prefix scans, cutting the sequential
step count from T to chunk + T/chunk while staying numerically equivalent.

A block runs the shared scan core in both time directions through separate
input/gate projectors, mirroring the attention block's sharing layout.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidStep, ShapeError


def discretize(delta: torch.Tensor, a: torch.Tensor, b: torch.Tensor):
    """Zero-order hold on A, Euler on B: (exp(delta*A), delta*B).

    ``delta`` must be strictly positive and broadcastable against ``a``.
    """
    if bool((delta <= 0).any()):
        raise InvalidStep("discretization step must be strictly positive")
    return torch.exp(delta * a), delta * b


def default_chunk_size(t: int) -> int:
    """Power-of-two near sqrt(T), clamped to [8, 128]."""
    root = max(1.0, math.sqrt(t))
    return max(8, min(128, 1 << round(math.log2(root))))


class SsmCore(nn.Module):
    """The scan parameters shared by both directions of a block.

    A is diagonal per channel, parameterized as -exp(a_log) so it stays
    strictly negative; with a positive step this keeps |exp(delta*A)| < 1.
    """

    def __init__(
        self,
        d_inner: int,
        state_size: int = 16,
        conv_width: int = 4,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.d_inner = d_inner
        self.state_size = state_size
        self.conv_width = conv_width
        # Log-uniform spread of -A over [1, N].
        a_init = torch.log(
            torch.logspace(0.0, math.log10(max(1.0, state_size)), state_size, dtype=dtype)
        )
        self.a_log = nn.Parameter(a_init.expand(d_inner, state_size).clone())
        self.d_skip = nn.Parameter(torch.ones(d_inner, dtype=dtype))
        self.w_b = nn.Linear(d_inner, state_size, bias=False, dtype=dtype)
        self.w_c = nn.Linear(d_inner, state_size, bias=False, dtype=dtype)
        self.w_delta = nn.Linear(d_inner, d_inner, dtype=dtype)
        # Bias the step projection so softplus lands in [1e-3, 1e-1] at init.
        dt = torch.exp(
            torch.rand(d_inner, dtype=dtype) * (math.log(0.1) - math.log(1e-3))
            + math.log(1e-3)
        )
        with torch.no_grad():
            self.w_delta.bias.copy_(dt + torch.log(-torch.expm1(-dt)))
        self.conv_weight = nn.Parameter(
            torch.empty(d_inner, 1, conv_width, dtype=dtype).uniform_(
                -1.0 / math.sqrt(conv_width), 1.0 / math.sqrt(conv_width)
            )
        )
        self.conv_bias = nn.Parameter(torch.zeros(d_inner, dtype=dtype))

    def causal_conv(self, x: torch.Tensor) -> torch.Tensor:
        """Depthwise convolution reading only [t - k + 1, t]."""
        z = x.transpose(1, 2)  # (B, D, T)
        z = F.pad(z, (self.conv_width - 1, 0))
        z = F.conv1d(z, self.conv_weight, self.conv_bias, groups=self.d_inner)
        return z.transpose(1, 2)


def _as_batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 2:
        return x.unsqueeze(0), True
    if x.dim() == 3:
        return x, False
    raise ShapeError(f"expected (T, D) or (B, T, D), got {tuple(x.shape)}")


def _scan_inputs(x, core: SsmCore, pad_mask):
    """Per-step decay/input/readout tensors for the recurrence."""
    if x.shape[-1] != core.d_inner:
        raise ShapeError(f"expected inner width {core.d_inner}, got {x.shape[-1]}")
    delta = F.softplus(core.w_delta(x))  # (B, T, D)
    if pad_mask is not None:
        # Padded steps become identity transitions: Abar = 1, Bbar*x = 0.
        delta = delta * pad_mask.unsqueeze(-1).to(delta.dtype)
    a_diag = -torch.exp(core.a_log)  # (D, N)
    decay = torch.exp(delta.unsqueeze(-1) * a_diag)  # (B, T, D, N)
    b_in = core.w_b(x)  # (B, T, N)
    drive = (delta * x).unsqueeze(-1) * b_in.unsqueeze(-2)  # (B, T, D, N)
    readout = core.w_c(x)  # (B, T, N)
    return decay, drive, readout


def _states_sequential(decay, drive):
    b, t, d, n = decay.shape
    h = torch.zeros(b, d, n, dtype=decay.dtype, device=decay.device)
    states = []
    for i in range(t):
        h = decay[:, i] * h + drive[:, i]
        states.append(h)
    return torch.stack(states, dim=1)


def _states_chunked(decay, drive, chunk: int):
    b, t, d, n = decay.shape
    n_chunks = -(-t // chunk)
    pad = n_chunks * chunk - t
    if pad:
        decay = torch.cat(
            [decay, torch.ones(b, pad, d, n, dtype=decay.dtype, device=decay.device)], dim=1
        )
        drive = torch.cat(
            [drive, torch.zeros(b, pad, d, n, dtype=drive.dtype, device=drive.device)], dim=1
        )
    decay = decay.view(b, n_chunks, chunk, d, n)
    drive = drive.view(b, n_chunks, chunk, d, n)
    # Local prefix scan inside every chunk, all chunks in parallel.
    prod = torch.ones(b, n_chunks, d, n, dtype=decay.dtype, device=decay.device)
    local = torch.zeros_like(prod)
    prods, locals_ = [], []
    for i in range(chunk):
        prod = prod * decay[:, :, i]
        local = decay[:, :, i] * local + drive[:, :, i]
        prods.append(prod)
        locals_.append(local)
    prod = torch.stack(prods, dim=2)  # (B, nc, chunk, D, N)
    local = torch.stack(locals_, dim=2)
    # Carry the state across chunk boundaries.
    carries = [torch.zeros(b, d, n, dtype=decay.dtype, device=decay.device)]
    for k in range(n_chunks - 1):
        carries.append(prod[:, k, -1] * carries[-1] + local[:, k, -1])
    carry = torch.stack(carries, dim=1)  # (B, nc, D, N)
    h = local + prod * carry.unsqueeze(2)
    h = h.view(b, n_chunks * chunk, d, n)
    return h[:, :t]


def _finalize(states, readout, x, core: SsmCore):
    y = (states * readout.unsqueeze(-2)).sum(dim=-1)
    return y + core.d_skip * x


def selective_scan_sequential(
    x: torch.Tensor, core: SsmCore, pad_mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Reference evaluation of the recurrence, one step at a time."""
    xb, squeeze = _as_batched(x)
    decay, drive, readout = _scan_inputs(xb, core, pad_mask)
    y = _finalize(_states_sequential(decay, drive), readout, xb, core)
    return y.squeeze(0) if squeeze else y


def selective_scan_chunked(
    x: torch.Tensor,
    core: SsmCore,
    chunk_size: int | None = None,
    pad_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Chunk-parallel evaluation; matches the sequential path numerically."""
    xb, squeeze = _as_batched(x)
    t = xb.shape[1]
    chunk = default_chunk_size(t) if chunk_size is None else chunk_size
    if chunk < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk}")
    decay, drive, readout = _scan_inputs(xb, core, pad_mask)
    y = _finalize(_states_chunked(decay, drive, min(chunk, t)), readout, xb, core)
    return y.squeeze(0) if squeeze else y


class CausalSSM(nn.Module):
    """Decomposed bidirectional wrapper around one shared scan core.

    ``direction_mode`` mirrors CausalAttention:
      * ``bidirectional``: branch 0 scans past-to-future, branch 1 the reverse;
      * ``past_only``: both branches scan past-to-future;
      * ``symmetric``: each branch averages both scan directions (the
        non-causal control with identical parameter count).
    """

    MODES = ("bidirectional", "past_only", "symmetric")

    def __init__(
        self,
        d_model: int,
        expand: float = 2.0,
        state_size: int = 16,
        conv_width: int = 4,
        direction_mode: str = "bidirectional",
        chunk_size: int | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if direction_mode not in self.MODES:
            raise ValueError(f"unknown direction_mode {direction_mode!r}")
        self.d_model = d_model
        self.d_inner = int(round(expand * d_model))
        self.direction_mode = direction_mode
        self.chunk_size = chunk_size
        self.in_projs = nn.ModuleList(
            [nn.Linear(d_model, self.d_inner, dtype=dtype) for _ in range(2)]
        )
        self.gate_projs = nn.ModuleList(
            [nn.Linear(d_model, self.d_inner, dtype=dtype) for _ in range(2)]
        )
        self.core = SsmCore(self.d_inner, state_size, conv_width, dtype=dtype)
        self.wo = nn.Linear(2 * self.d_inner, d_model, dtype=dtype)

    def _directional_pass(self, u, pad_mask, reverse: bool, sequential: bool):
        if reverse:
            u = torch.flip(u, dims=(1,))
            pad_mask = None if pad_mask is None else torch.flip(pad_mask, dims=(1,))
        if pad_mask is not None:
            u = u * pad_mask.unsqueeze(-1).to(u.dtype)
        u = F.silu(self.core.causal_conv(u))
        if sequential:
            y = selective_scan_sequential(u, self.core, pad_mask)
        else:
            y = selective_scan_chunked(u, self.core, self.chunk_size, pad_mask)
        if reverse:
            y = torch.flip(y, dims=(1,))
        return y

    def branch_output(
        self,
        x: torch.Tensor,
        branch: int,
        pad_mask: torch.Tensor | None = None,
        sequential: bool = False,
    ) -> torch.Tensor:
        """One gated directional branch, before concatenation and Wo."""
        u = self.in_projs[branch](x)
        if self.direction_mode == "symmetric":
            y = 0.5 * (
                self._directional_pass(u, pad_mask, False, sequential)
                + self._directional_pass(u, pad_mask, True, sequential)
            )
        else:
            reverse = self.direction_mode == "bidirectional" and branch == 1
            y = self._directional_pass(u, pad_mask, reverse, sequential)
        return y * F.silu(self.gate_projs[branch](x))

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        if x.dim() != 3 or x.shape[-1] != self.d_model:
            raise ShapeError(f"expected (B, T, {self.d_model}), got {tuple(x.shape)}")
        branches = [self.branch_output(x, i, pad_mask) for i in range(2)]
        return self.wo(torch.cat(branches, dim=-1))
