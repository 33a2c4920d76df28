"""Branch/direction ablation grid on a synthetic dataset.

Trains every combination of {hybrid, attention_only, ssm_only} branches and
{bidirectional, past_only, symmetric} context restriction, each over several
seeds, and reports per-variant average mAP on the validation split. The
symmetric rows are the non-causal controls with identical parameter counts.
"""

from __future__ import annotations

from dataclasses import replace

from .encoder import BRANCH_MODES, DIRECTION_MODES, EncoderConfig
from .evaluation import EvalConfig, detection_map
from .heads import AssignmentConfig, DecodeConfig
from .model import run_inference
from .postprocess import NmsConfig
from .training import DetectionDataset, TrainConfig, build_model, train
from .types import AnnotationDB, FeatureSequence


def run_ablation(
    train_ds: DetectionDataset,
    val_sequences: list[FeatureSequence],
    db: AnnotationDB,
    enc_cfg: EncoderConfig,
    asn_cfg: AssignmentConfig,
    train_cfg: TrainConfig,
    eval_cfg: EvalConfig = EvalConfig(),
    decode_cfg: DecodeConfig = DecodeConfig(),
    nms_cfg: NmsConfig = NmsConfig(),
    num_seeds: int = 3,
    subset: str = "val",
    log=None,
) -> dict:
    """Returns {"rows": [...], "num_seeds": n}; rows carry per-seed and mean mAP."""
    rows = []
    for branch_mode in BRANCH_MODES:
        for direction_mode in DIRECTION_MODES:
            per_seed = []
            for s in range(num_seeds):
                cfg_i = replace(
                    enc_cfg, branch_mode=branch_mode, direction_mode=direction_mode
                )
                tcfg = replace(train_cfg, seed=train_cfg.seed + s)
                result = train(train_ds, cfg_i, asn_cfg, tcfg)
                model = build_model(result.checkpoint, use_ema=True)
                preds, _ = run_inference(model, val_sequences, decode_cfg, nms_cfg)
                report = detection_map(preds, db, eval_cfg, subset=subset)
                per_seed.append(report.average_map)
                if log is not None:
                    log(
                        f"{branch_mode:>15s} {direction_mode:>14s} seed {tcfg.seed}: "
                        f"avg mAP {report.average_map:.4f}"
                    )
            rows.append(
                {
                    "branch_mode": branch_mode,
                    "direction_mode": direction_mode,
                    "per_seed_map": per_seed,
                    "mean_map": sum(per_seed) / len(per_seed),
                }
            )
    return {"rows": rows, "num_seeds": num_seeds, "thresholds": list(eval_cfg.thresholds)}


def ablation_table(report: dict) -> str:
    lines = [
        f"{'branch':>15s}  {'direction':>14s}  {'mean mAP':>9s}  per-seed",
        "-" * 60,
    ]
    for row in report["rows"]:
        seeds = ", ".join(f"{v:.4f}" for v in row["per_seed_map"])
        lines.append(
            f"{row['branch_mode']:>15s}  {row['direction_mode']:>14s}  "
            f"{row['mean_map']:>9.4f}  [{seeds}]"
        )
    return "\n".join(lines)
