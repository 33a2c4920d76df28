"""Training loop, decoupled-weight-decay optimizer, schedule, EMA, checkpoints.

Determinism contract: all randomness (parameter init, channel dropout, data
order, crops) derives from TrainConfig.seed, so two runs with the same seed
produce byte-identical checkpoints.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .encoder import EncoderConfig
from .errors import ConfigError, DivergedAtStep, GradientOverflow, InvalidData, IoError
from .heads import AssignmentConfig, assign_targets, total_loss
from .io import load_features, load_manifest
from .model import Detector, pad_batch
from .types import AnnotationDB, FeatureSequence, SegmentAnnotation

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    base_lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_epochs: float = 2.0
    lambda_reg: float = 1.0
    seed: int = 7
    max_seq_len: int = 2304
    ema_decay: float = 0.999
    grad_clip: float = 1.0

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("train.epochs and batch_size must be >= 1")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ConfigError("train.ema_decay must be in [0, 1)")
        if self.base_lr <= 0 or self.warmup_epochs < 0:
            raise ConfigError("train.base_lr must be > 0 and warmup_epochs >= 0")
        if self.max_seq_len < 1:
            raise ConfigError("train.max_seq_len must be >= 1")
        return self


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to base, then cosine decay to 0 at total_steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@torch.no_grad()
def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    exp_avg: dict[str, torch.Tensor],
    exp_avg_sq: dict[str, torch.Tensor],
    step: int,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """One bias-corrected adaptive update with decoupled weight decay.

    ``step`` is 1-based (the number of updates including this one).
    Weight decay multiplies weights by (1 - lr * decay) before the moment
    update is applied.
    """
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    for name, p in params.items():
        g = grads[name]
        if weight_decay != 0.0:
            p.mul_(1.0 - lr * weight_decay)
        m = exp_avg[name].mul_(beta1).add_(g, alpha=1.0 - beta1)
        v = exp_avg_sq[name].mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)


class EmaWeights:
    """Exponential moving average of a parameter dict."""

    def __init__(self, params: dict[str, torch.Tensor]):
        self.shadow = {k: p.detach().clone() for k, p in params.items()}

    @torch.no_grad()
    def update(self, params: dict[str, torch.Tensor], decay: float) -> None:
        for k, p in params.items():
            self.shadow[k].mul_(decay).add_(p, alpha=1.0 - decay)


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_MAGIC = b"CTCK"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


@dataclass
class Checkpoint:
    config: dict
    step: int
    model_state: dict[str, np.ndarray]
    ema_state: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    loss_history: list[float] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION


def _dtype_tag(arr: np.ndarray) -> str:
    for tag, dt in _DTYPE_TAGS.items():
        if arr.dtype == dt:
            return tag
    raise InvalidData(f"unsupported checkpoint dtype {arr.dtype}")


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Versioned header + named-tensor table + little-endian payload."""
    groups = {
        "model": ckpt.model_state,
        "ema": ckpt.ema_state,
        "optm": ckpt.opt_m,
        "optv": ckpt.opt_v,
    }
    table = []
    payloads = []
    offset = 0
    for group, tensors in groups.items():
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            blob = arr.tobytes()
            table.append(
                {
                    "name": f"{group}.{name}",
                    "shape": list(arr.shape),
                    "dtype": _dtype_tag(arr),
                    "offset": offset,
                    "nbytes": len(blob),
                }
            )
            payloads.append(blob)
            offset += len(blob)
    header = {
        "version": ckpt.version,
        "step": ckpt.step,
        "config": ckpt.config,
        "loss_history": ckpt.loss_history,
        "tensors": table,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<IQ", ckpt.version, len(blob)))
            f.write(blob)
            for p in payloads:
                f.write(p)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload[:4] != CHECKPOINT_MAGIC:
        raise InvalidData(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack("<IQ", payload[4:16])
    if version != CHECKPOINT_VERSION:
        raise InvalidData(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(payload[16 : 16 + header_len].decode("utf-8"))
    base = 16 + header_len
    groups: dict[str, dict[str, np.ndarray]] = {"model": {}, "ema": {}, "optm": {}, "optv": {}}
    for entry in header["tensors"]:
        group, name = entry["name"].split(".", 1)
        dt = _DTYPE_TAGS[entry["dtype"]]
        start = base + entry["offset"]
        arr = np.frombuffer(payload, dtype=dt, count=entry["nbytes"] // dt.itemsize, offset=start)
        groups[group][name] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(
        config=header["config"],
        step=int(header["step"]),
        model_state=groups["model"],
        ema_state=groups["ema"],
        opt_m=groups["optm"],
        opt_v=groups["optv"],
        loss_history=[float(x) for x in header.get("loss_history", [])],
        version=version,
    )


def build_model(ckpt: Checkpoint, use_ema: bool = True) -> Detector:
    """Reconstruct the detector from a checkpoint's config and weights."""
    enc_cfg = EncoderConfig(**ckpt.config["encoder"])
    model = Detector(int(ckpt.config["in_dim"]), int(ckpt.config["num_classes"]), enc_cfg)
    state = ckpt.ema_state if use_ema else ckpt.model_state
    tensors = {k: torch.from_numpy(v.copy()) for k, v in state.items()}
    model.load_state_dict(tensors)
    return model


# ---------------------------------------------------------------------------
# Dataset access


@dataclass
class DetectionDataset:
    """In-memory (features, segments) pairs for one split."""

    items: list[tuple[FeatureSequence, list[SegmentAnnotation]]]
    num_classes: int

    @classmethod
    def from_files(
        cls, manifest_path: str | Path, db: AnnotationDB, subset: str | None
    ) -> "DetectionDataset":
        manifest = load_manifest(manifest_path)
        items = []
        for video_id in db.subset_ids(subset):
            if video_id not in manifest["videos"]:
                continue
            seq = load_features(manifest_path, video_id)
            items.append((seq, list(db.videos[video_id].segments)))
        return cls(items=items, num_classes=db.num_classes)

    def __len__(self) -> int:
        return len(self.items)


def _crop_item(
    seq: FeatureSequence,
    segments: list[SegmentAnnotation],
    max_len: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[SegmentAnnotation], float]:
    """Random window of at most max_len snippets, segments clipped to it."""
    t = seq.num_snippets
    if t <= max_len:
        return seq.features, segments, seq.duration_s
    lo = int(rng.integers(0, t - max_len + 1))
    lo_s = lo / seq.feature_fps
    hi_s = (lo + max_len) / seq.feature_fps
    cropped = []
    for seg in segments:
        s = max(seg.start_s, lo_s) - lo_s
        e = min(seg.end_s, hi_s) - lo_s
        if e - s > 0.5 / seq.feature_fps:
            cropped.append(SegmentAnnotation(s, e, seg.label_id))
    return seq.features[lo : lo + max_len], cropped, max_len / seq.feature_fps


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_history: list[float]


def train(
    dataset: DetectionDataset,
    enc_cfg: EncoderConfig,
    asn_cfg: AssignmentConfig,
    cfg: TrainConfig,
    extra_config: dict | None = None,
    log=None,
) -> TrainResult:
    """Deterministic full-batch-loop training; returns the final checkpoint.

    The checkpoint carries raw weights, EMA weights (used for evaluation),
    optimizer moments, the schedule step, and a config snapshot.
    """
    cfg.validate()
    enc_cfg.validate()
    asn_cfg.validate()
    if len(dataset) == 0:
        raise ConfigError("training requires a non-empty train split")
    in_dim = dataset.items[0][0].feature_dim
    fps = dataset.items[0][0].feature_fps

    torch.manual_seed(cfg.seed)
    model = Detector(in_dim, dataset.num_classes, enc_cfg)
    model.train()
    params = dict(model.named_parameters())
    exp_avg = {k: torch.zeros_like(p) for k, p in params.items()}
    exp_avg_sq = {k: torch.zeros_like(p) for k, p in params.items()}
    ema = EmaWeights(params)
    drop_gen = torch.Generator().manual_seed(cfg.seed + 101)
    order_rng = np.random.default_rng(cfg.seed + 202)
    crop_rng = np.random.default_rng(cfg.seed + 303)

    n = len(dataset)
    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = int(round(cfg.warmup_epochs * steps_per_epoch))
    target_cache: dict = {}
    history: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, cfg.batch_size):
            batch_idx = order[lo : lo + cfg.batch_size]
            feats, seg_lists, lengths = [], [], []
            for i in batch_idx:
                seq, segs = dataset.items[int(i)]
                f, segs, _dur = _crop_item(seq, segs, cfg.max_seq_len, crop_rng)
                feats.append(f)
                seg_lists.append(segs)
                lengths.append(f.shape[0])
            x, mask = pad_batch(feats)
            outputs = model(x, mask, training=True, generator=drop_gen)

            level_outputs, cls_targets, reg_targets = [], [], []
            for bi, i in enumerate(batch_idx):
                valid = [
                    int(level.mask[bi].sum()) if level.mask is not None
                    else level.logits.shape[1]
                    for level in outputs
                ]
                strides = [level.stride for level in outputs]
                key = (int(i), tuple(valid))
                cached = target_cache.get(key)
                if cached is None or lengths[bi] != dataset.items[int(i)][0].num_snippets:
                    cached = assign_targets(valid, strides, fps, seg_lists[bi], asn_cfg)
                    if lengths[bi] == dataset.items[int(i)][0].num_snippets:
                        target_cache[key] = cached
                cls_t, reg_t = cached
                for li, level in enumerate(outputs):
                    level_outputs.append(
                        (level.logits[bi, : valid[li]], level.dists[bi, : valid[li]])
                    )
                cls_targets.extend(cls_t)
                reg_targets.extend(reg_t)

            loss, _cls_l, _reg_l = total_loss(
                level_outputs, cls_targets, reg_targets, cfg.lambda_reg
            )
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value):
                raise DivergedAtStep(step)
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = {}
            for name, p in params.items():
                g = p.grad if p.grad is not None else torch.zeros_like(p)
                if not torch.isfinite(g).all():
                    raise GradientOverflow(f"non-finite gradient in {name}")
                grads[name] = g
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params.values(), cfg.grad_clip)
            lr = lr_at(step, total_steps, warmup_steps, cfg.base_lr)
            adamw_step(
                params, grads, exp_avg, exp_avg_sq, step + 1, lr, cfg.weight_decay
            )
            ema.update(params, cfg.ema_decay)
            step += 1
            epoch_losses.append(loss_value)
        history.append(float(np.mean(epoch_losses)))
        if log is not None:
            log(f"epoch {epoch + 1:3d}/{cfg.epochs}  loss {history[-1]:.4f}")

    config_snapshot = {
        "in_dim": in_dim,
        "num_classes": dataset.num_classes,
        "feature_fps": fps,
        "encoder": vars(enc_cfg).copy(),
        "assignment": vars(asn_cfg).copy(),
        "train": vars(cfg).copy(),
    }
    if extra_config:
        config_snapshot.update(extra_config)
    ckpt = Checkpoint(
        config=config_snapshot,
        step=step,
        model_state={k: p.detach().numpy().copy() for k, p in params.items()},
        ema_state={k: v.numpy().copy() for k, v in ema.shadow.items()},
        opt_m={k: v.numpy().copy() for k, v in exp_avg.items()},
        opt_v={k: v.numpy().copy() for k, v in exp_avg_sq.items()},
        loss_history=history,
    )
    return TrainResult(checkpoint=ckpt, loss_history=history)
