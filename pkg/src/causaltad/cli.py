"""Command-line pipeline driver.

Subcommands: synth | train | infer | ensemble | eval | ablate | gradcheck.
Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 I/O error, 1 any other failure. CAUSALTAD_THREADS caps torch's worker
threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import torch

from . import __version__
from .ablation import ablation_table, run_ablation
from .config import config_help_text, load_run_config
from .errors import CausalTadError, ConfigError, DivergedAtStep, IoError, ShapeError
from .evaluation import detection_map
from .gradcheck import COMPONENT_BUILDERS, check_component
from .heads import decode, read_raw, write_raw
from .io import load_annotations, load_features, load_manifest, read_predictions, write_predictions
from .model import run_inference
from .postprocess import ensemble, soft_nms
from .synth import generate_dataset
from .training import DetectionDataset, build_model, load_checkpoint, save_checkpoint, train


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run configuration file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config value, e.g. --set train.epochs=10",
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causaltad",
        description="Temporal action detection with direction-restricted context.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    epilog = config_help_text()

    def subparser(name, help_text):
        p = sub.add_parser(
            name,
            help=help_text,
            epilog=epilog,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        _add_common(p)
        return p

    p = subparser("synth", "generate a seeded synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = subparser("train", "train the detector on a dataset directory")
    p.add_argument("--data", help="dataset directory (manifest.json + annotations.json)")
    p.add_argument("--out", help="checkpoint output path")
    p.add_argument("--subset", default="train", help="annotation subset to train on")

    p = subparser("infer", "run a checkpoint over a split and write predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--subset", default="val")
    p.add_argument("--out", required=True, help="predictions JSON path")
    p.add_argument("--emit-raw", dest="emit_raw", help="directory for per-video .raw files")
    p.add_argument("--weights", choices=("ema", "raw"), default="ema")

    p = subparser("ensemble", "average .raw outputs from several runs, then decode")
    p.add_argument("raw_dirs", nargs="+", help="directories of per-video .raw files")
    p.add_argument("--out", required=True, help="predictions JSON path")

    p = subparser("eval", "score predictions against ground truth")
    p.add_argument("--pred", required=True, help="predictions JSON")
    p.add_argument("--gt", required=True, help="annotations JSON")
    p.add_argument("--subset", default=None)
    p.add_argument("--out", help="optional report JSON path")

    p = subparser("ablate", "train the branch/direction ablation grid")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="optional report JSON path")
    p.add_argument("--seeds", type=int, default=3)

    p = subparser("gradcheck", "finite-difference gradient verification")
    p.add_argument(
        "--components",
        nargs="*",
        default=None,
        help=f"subset of: {', '.join(sorted(COMPONENT_BUILDERS))}",
    )
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _data_dir(args, cfg) -> Path:
    data = args.data or cfg.paths.data_dir
    if not data:
        raise ConfigError("no dataset directory: pass --data or set paths.data_dir")
    return Path(data)


def _load_split(data: Path, subset: str | None):
    db = load_annotations(data / "annotations.json")
    manifest_path = data / "manifest.json"
    manifest = load_manifest(manifest_path)
    sequences = [
        load_features(manifest_path, vid)
        for vid in db.subset_ids(subset)
        if vid in manifest["videos"]
    ]
    return db, manifest_path, sequences


def _write_json(path: str, payload: dict) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def cmd_synth(args, cfg) -> int:
    manifest, annotations = generate_dataset(cfg.synth, args.out)
    print(f"wrote {manifest}")
    print(f"wrote {annotations}")
    return 0


def cmd_train(args, cfg) -> int:
    data = _data_dir(args, cfg)
    out = args.out or cfg.paths.checkpoint
    if not out:
        raise ConfigError("no checkpoint path: pass --out or set paths.checkpoint")
    db = load_annotations(data / "annotations.json")
    dataset = DetectionDataset.from_files(data / "manifest.json", db, args.subset)
    result = train(
        dataset,
        cfg.encoder,
        cfg.assignment,
        cfg.train,
        extra_config={"run_config": cfg.to_dict()},
        log=print,
    )
    save_checkpoint(out, result.checkpoint)
    print(f"wrote {out}")
    return 0


def cmd_infer(args, cfg) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = build_model(ckpt, use_ema=args.weights == "ema")
    data = _data_dir(args, cfg)
    _db, _manifest, sequences = _load_split(data, args.subset)
    predictions, raws = run_inference(
        model, sequences, cfg.decode, cfg.nms, batch_size=cfg.train.batch_size
    )
    write_predictions(args.out, predictions)
    print(f"wrote {args.out} ({len(predictions)} videos)")
    if args.emit_raw:
        raw_dir = Path(args.emit_raw)
        raw_dir.mkdir(parents=True, exist_ok=True)
        for vid, raw in raws.items():
            write_raw(raw_dir / f"{vid}.raw", raw)
        print(f"wrote {len(raws)} raw files to {raw_dir}")
    return 0


def cmd_ensemble(args, cfg) -> int:
    dirs = [Path(d) for d in args.raw_dirs]
    stems = [sorted(p.stem for p in d.glob("*.raw")) for d in dirs]
    if not stems or not stems[0]:
        raise IoError(f"no .raw files found in {dirs[0]}")
    if any(s != stems[0] for s in stems[1:]):
        raise ShapeError("raw directories do not contain the same video set")
    predictions = {}
    for vid in stems[0]:
        raws = [read_raw(d / f"{vid}.raw") for d in dirs]
        averaged = ensemble(raws)
        proposals = decode(averaged, cfg.decode)
        predictions[vid] = soft_nms(proposals, cfg.nms, class_aware=True)
    write_predictions(args.out, predictions)
    print(f"wrote {args.out} ({len(predictions)} videos)")
    return 0


def cmd_eval(args, cfg) -> int:
    predictions = read_predictions(args.pred)
    db = load_annotations(args.gt)
    report = detection_map(predictions, db, cfg.eval, subset=args.subset)
    print(report.to_table())
    if args.out:
        _write_json(args.out, report.to_dict())
        print(f"wrote {args.out}")
    return 0


def cmd_ablate(args, cfg) -> int:
    data = _data_dir(args, cfg)
    db = load_annotations(data / "annotations.json")
    train_ds = DetectionDataset.from_files(data / "manifest.json", db, "train")
    _db, _manifest, val_sequences = _load_split(data, "val")
    report = run_ablation(
        train_ds,
        val_sequences,
        db,
        cfg.encoder,
        cfg.assignment,
        cfg.train,
        cfg.eval,
        cfg.decode,
        cfg.nms,
        num_seeds=args.seeds,
        log=print,
    )
    print(ablation_table(report))
    if args.out:
        _write_json(args.out, report)
        print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args, cfg) -> int:
    names = args.components if args.components else sorted(COMPONENT_BUILDERS)
    all_passed = True
    for name in names:
        if name not in COMPONENT_BUILDERS:
            raise ConfigError(f"unknown gradcheck component {name!r}")
        report = check_component(name, seed=args.seed, eps=args.eps, tol=args.tol)
        print(report.to_table())
        all_passed &= report.passed
    return 0 if all_passed else 1


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "ensemble": cmd_ensemble,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("CAUSALTAD_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"ignoring invalid CAUSALTAD_THREADS={threads!r}", file=sys.stderr)
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.overrides)
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergedAtStep as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    except IoError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    except CausalTadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
