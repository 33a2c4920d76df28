"""Central finite-difference verification of analytic gradients.

Every differentiable component can be checked at 64-bit precision: a tiny
instance is built from a fixed seed, a scalar loss is formed through a
random projection of the output, and each parameter coordinate is perturbed
by +-eps. The per-tensor maximum relative error must stay under tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .attention import CausalAttention, causal_mask, masked_attention
from .encoder import EncoderConfig, HybridCausalBlock
from .heads import AssignmentConfig, assign_targets, diou_loss, focal_loss, total_loss
from .model import Detector
from .ssm import CausalSSM, SsmCore, selective_scan_sequential
from .types import SegmentAnnotation

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4


@dataclass
class TensorReport:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    component: str
    eps: float
    tolerance: float
    tensors: list[TensorReport]

    @property
    def passed(self) -> bool:
        return all(t.passed for t in self.tensors)

    def to_table(self) -> str:
        width = max(len(t.name) for t in self.tensors)
        lines = [f"[{'PASS' if self.passed else 'FAIL'}] {self.component}"]
        for t in self.tensors:
            flag = "ok" if t.passed else "FAIL"
            lines.append(f"  {t.name.ljust(width)}  {t.max_rel_error:10.3e}  {flag}")
        return "\n".join(lines)


def check_scalar_function(
    fn,
    named_tensors: dict[str, torch.Tensor],
    eps: float = DEFAULT_EPS,
    tol: float = DEFAULT_TOL,
) -> list[TensorReport]:
    """Compare autograd gradients of fn() against central differences.

    The relative-error scale is floored at 1e-6 * max(1, |loss|): the FD
    quotient carries round-off of order eps_machine * |loss| / eps, so
    gradients far below that level can only be compared absolutely.
    """
    loss = fn()
    tensors = list(named_tensors.values())
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    noise_floor = 1e-6 * max(1.0, abs(float(loss.detach())))
    reports = []
    for (name, t), a in zip(named_tensors.items(), analytic):
        a = torch.zeros_like(t) if a is None else a
        numeric = torch.zeros_like(t)
        flat = t.data.view(-1)
        num_flat = numeric.view(-1)
        with torch.no_grad():
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                f_plus = float(fn())
                flat[j] = orig - eps
                f_minus = float(fn())
                flat[j] = orig
                num_flat[j] = (f_plus - f_minus) / (2.0 * eps)
        scale = max(float(a.abs().max()), float(numeric.abs().max()), noise_floor)
        err = float((a - numeric).abs().max()) / scale
        reports.append(TensorReport(name=name, max_rel_error=err, passed=err <= tol))
    return reports


def _named_params(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.named_parameters()}


def _build_masked_attention(seed):
    gen = torch.Generator().manual_seed(seed)
    t, d = 4, 3
    q = torch.randn(t, d, generator=gen, dtype=torch.float64, requires_grad=True)
    k = torch.randn(t, d, generator=gen, dtype=torch.float64, requires_grad=True)
    v = torch.randn(t, d, generator=gen, dtype=torch.float64, requires_grad=True)
    mask = causal_mask(t, "past", dtype=torch.float64)
    w = torch.randn(t, d, generator=gen, dtype=torch.float64)

    def fn():
        return (masked_attention(q, k, v, mask) * w).sum()

    return fn, {"q": q, "k": k, "v": v}


def _build_attention_block(seed):
    torch.manual_seed(seed)
    block = CausalAttention(d_model=6, num_heads=2, dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed + 1)
    x = torch.randn(1, 5, 6, generator=gen, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 5, 6, generator=gen, dtype=torch.float64)

    def fn():
        return (block(x) * w).sum()

    return fn, {"x": x, **_named_params(block)}


def _build_selective_scan(seed):
    torch.manual_seed(seed)
    core = SsmCore(d_inner=3, state_size=2, conv_width=2, dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed + 1)
    x = torch.randn(8, 3, generator=gen, dtype=torch.float64, requires_grad=True)
    w = torch.randn(8, 3, generator=gen, dtype=torch.float64)

    def fn():
        return (selective_scan_sequential(x, core) * w).sum()

    return fn, {"x": x, **_named_params(core)}


def _build_ssm_block(seed):
    torch.manual_seed(seed)
    block = CausalSSM(
        d_model=4, expand=2.0, state_size=2, conv_width=2, dtype=torch.float64
    )
    gen = torch.Generator().manual_seed(seed + 1)
    x = torch.randn(1, 6, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 6, 4, generator=gen, dtype=torch.float64)

    def fn():
        return (block(x) * w).sum()

    return fn, {"x": x, **_named_params(block)}


def _tiny_encoder_cfg(**kw) -> EncoderConfig:
    base = dict(
        levels=2,
        width=6,
        heads=2,
        ssm_state=2,
        ssm_expand=1.0,
        conv_width=2,
        channel_dropout_p=0.0,
        blocks_per_stage=1,
    )
    base.update(kw)
    return EncoderConfig(**base)


def _build_hybrid_block(seed):
    torch.manual_seed(seed)
    block = HybridCausalBlock(_tiny_encoder_cfg(levels=1), dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed + 1)
    x = torch.randn(1, 5, 6, generator=gen, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 5, 6, generator=gen, dtype=torch.float64)

    def fn():
        return (block(x) * w).sum()

    return fn, {"x": x, **_named_params(block)}


def _build_focal_loss(seed):
    gen = torch.Generator().manual_seed(seed)
    logits = torch.randn(6, 3, generator=gen, dtype=torch.float64, requires_grad=True)
    targets = torch.tensor([0, -1, 2, -1, 1, 0])

    def fn():
        return focal_loss(logits, targets)

    return fn, {"logits": logits}


def _build_diou_loss(seed):
    gen = torch.Generator().manual_seed(seed)
    pred = torch.rand(5, 2, generator=gen, dtype=torch.float64) * 4 + 0.2
    pred.requires_grad_(True)
    target = torch.rand(5, 2, generator=gen, dtype=torch.float64) * 4 + 0.2

    def fn():
        return diou_loss(pred, target)

    return fn, {"pred": pred}


def _build_full_model(seed):
    torch.manual_seed(seed)
    model = Detector(in_dim=3, num_classes=2, cfg=_tiny_encoder_cfg(), dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed + 1)
    t, fps = 12, 2.0
    x = torch.randn(1, t, 3, generator=gen, dtype=torch.float64, requires_grad=True)
    segments = [
        SegmentAnnotation(0.5, 3.0, 1),
        SegmentAnnotation(3.5, 5.5, 0),
    ]
    lengths = [t, -(-t // 2)]
    cls_t, reg_t = assign_targets(lengths, [1, 2], fps, segments, AssignmentConfig())

    def fn():
        outputs = model(x)
        flat = [(lv.logits[0], lv.dists[0]) for lv in outputs]
        loss, _, _ = total_loss(flat, cls_t, reg_t, lambda_reg=1.0)
        return loss

    return fn, {"x": x, **_named_params(model)}


COMPONENT_BUILDERS = {
    "masked_attention": _build_masked_attention,
    "attention_block": _build_attention_block,
    "selective_scan": _build_selective_scan,
    "ssm_block": _build_ssm_block,
    "hybrid_block": _build_hybrid_block,
    "focal_loss": _build_focal_loss,
    "diou_loss": _build_diou_loss,
    "full_model": _build_full_model,
}


def check_component(
    name: str, seed: int = 0, eps: float = DEFAULT_EPS, tol: float = DEFAULT_TOL
) -> GradCheckReport:
    if name not in COMPONENT_BUILDERS:
        raise KeyError(f"unknown component {name!r}; known: {sorted(COMPONENT_BUILDERS)}")
    fn, tensors = COMPONENT_BUILDERS[name](seed)
    reports = check_scalar_function(fn, tensors, eps=eps, tol=tol)
    return GradCheckReport(component=name, eps=eps, tolerance=tol, tensors=reports)


def check_all(
    seed: int = 0, eps: float = DEFAULT_EPS, tol: float = DEFAULT_TOL
) -> list[GradCheckReport]:
    return [check_component(name, seed, eps, tol) for name in COMPONENT_BUILDERS]
