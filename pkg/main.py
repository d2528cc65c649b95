#!/usr/bin/env python3
"""
VFSS toolkit - command-line entry point
Pharyngeal phase detection and weakly-supervised bolus localization

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 internal failure.
"""

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from config import config
from data.models.errors import DataValidationError, UsageError, VfssError
from data.models.schemas import Difficulty, PipelineConfig
from data.pipeline.pipeline_manager import pipeline_manager
from data.storage import clip_store
from data.storage.report_writer import write_provenance

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to exit code 1"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().strip()}")


# ============================================================================
# ARGUMENTS
# ============================================================================

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key=value configuration file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--profile", choices=["standard", "fast"])
    parser.add_argument("--clahe-clip", type=float)
    parser.add_argument("--clahe-tiles", help="tile grid as ROWS,COLS")
    parser.add_argument("--net-size", type=int)


def _add_selection(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", type=Path)
    parser.add_argument("--split", type=Path)
    parser.add_argument("--partition", choices=["train", "val", "test"])


def _add_refine(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--threshold-frac", type=float)
    parser.add_argument("--k-darkest", type=int)
    parser.add_argument("--gac-iterations", type=int)
    parser.add_argument("--balloon", choices=["expand", "contract", "off"])


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="vfss", description="VFSS pharyngeal phase detection and bolus localization")
    sub = parser.add_subparsers(dest="command", parser_class=ArgumentParser)
    sub.required = True

    p = sub.add_parser("ingest", help="validate a dataset and describe it")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--annotations", type=Path)
    p.add_argument("--out-dir", type=Path)

    p = sub.add_parser("split", help="subject-wise train/val/test split")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--ratios", default="0.6,0.2,0.2")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train a frame classifier")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--split", type=Path)
    p.add_argument("--arch", default="cnn4", help="cnn3, cnn4 or plugin:<name>")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay-factor", type=float)
    p.add_argument("--lr-decay-period", type=int)
    p.add_argument("--class-weighting", choices=["none", "balanced"])
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("predict", help="per-frame P probabilities")
    _add_common(p)
    _add_selection(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--clip", type=Path)
    p.add_argument("--out", type=Path, help="probs.csv for a single --clip")
    p.add_argument("--out-dir", type=Path, help="<clip_id>.csv files for a manifest")

    p = sub.add_parser("decode", help="BPM/UESC from predicted sequences")
    _add_common(p)
    p.add_argument("--probs", type=Path, required=True, help="probs.csv or a directory of them")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("cam", help="Grad-CAM heatmaps for every frame of a clip")
    _add_common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--clip", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("localize", help="bolus localization on frames classified P")
    _add_common(p)
    _add_selection(p)
    _add_refine(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--clip", type=Path)
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("eval-phase", help="F1 / P3 report")
    _add_common(p)
    _add_selection(p)
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--probs-dir", type=Path, required=True)
    p.add_argument("--backbone", default="cnn")
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("eval-localize", help="r_y / RMSE / IoU-F1 report")
    _add_common(p)
    _add_selection(p)
    p.add_argument("--annotations", type=Path)
    p.add_argument("--landmarks", type=Path, required=True)
    p.add_argument("--bolus-dir", type=Path, required=True)
    p.add_argument("--masks", type=Path, help="defaults to <manifest dir>/masks")
    p.add_argument("--backbone", default="cnn")
    p.add_argument("--flip-x", action="store_true", help="x axis points posterior instead of anterior")
    p.add_argument("--overlays", action="store_true")
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--subjects", type=int, default=config.PHANTOM_SUBJECTS)
    p.add_argument("--clips-per-subject", type=int, default=config.PHANTOM_CLIPS_PER_SUBJECT)
    p.add_argument("--difficulty", choices=[d.value for d in Difficulty], default=Difficulty.STANDARD.value)

    p = sub.add_parser("report", help="compare backbones across evaluation directories")
    _add_common(p)
    p.add_argument("--input", action="append", required=True, metavar="NAME=DIR")
    p.add_argument("--out-dir", type=Path, required=True)
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Explicit CLI flags as flat configuration keys"""
    mapping = {
        "seed": "seed", "workers": "workers", "clahe_clip": "clahe_clip", "clahe_tiles": "clahe_tiles",
        "net_size": "net_size", "epochs": "epochs", "batch": "batch_size", "lr": "initial_lr",
        "lr_decay_factor": "lr_decay_factor", "lr_decay_period": "lr_decay_period",
        "class_weighting": "class_weighting", "threshold_frac": "threshold_frac", "k_darkest": "k_darkest",
        "gac_iterations": "gac_iterations", "balloon": "balloon", "manifest": "manifest",
        "annotations": "annotations", "landmarks": "landmarks", "ckpt": "checkpoint"
    }
    return {key: getattr(args, attr) for attr, key in mapping.items() if getattr(args, attr, None) is not None}


def _parse_ratios(text: str):
    try:
        ratios = tuple(float(part) for part in text.split(","))
    except ValueError:
        raise UsageError(f"--ratios must be three comma-separated numbers, got {text!r}")
    if len(ratios) != 3:
        raise UsageError(f"--ratios must be three comma-separated numbers, got {text!r}")
    return ratios


def _parse_inputs(items: Sequence[str]) -> Dict[str, Path]:
    inputs = {}
    for item in items:
        name, sep, directory = item.partition("=")
        if not sep:
            name, directory = Path(item).name, item
        if not name or not directory:
            raise UsageError(f"--input expects NAME=DIR, got {item!r}")
        inputs[name] = Path(directory)
    return inputs


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def _selected(args, settings: PipelineConfig):
    if settings.manifest is None:
        raise UsageError(f"{args.command}: give --clip or --manifest")
    entries = clip_store.load_manifest(settings.manifest)
    split = clip_store.load_split(args.split) if args.split else None
    if args.partition and split is None:
        raise UsageError(f"{args.command}: --partition needs --split")
    return pipeline_manager.select(entries, split, args.partition)


async def dispatch(args: argparse.Namespace, settings: PipelineConfig) -> Path:
    """Run one subcommand; returns the directory its provenance record belongs in"""
    command = args.command

    if command == "ingest":
        settings.output_dir = args.out_dir
        table = await pipeline_manager.ingest(settings)
        print(table.to_string(index=False))
        return args.out_dir or settings.manifest.parent

    if command == "split":
        table = await pipeline_manager.split(settings, _parse_ratios(args.ratios), args.out)
        print(table.to_string(index=False))
        return args.out.parent

    if command == "train":
        split = clip_store.load_split(args.split) if args.split else None
        checkpoint = await pipeline_manager.train_model(settings, args.arch, split, args.out)
        print(f"Trained {checkpoint.arch} for {len(checkpoint.history)} epochs -> {args.out}")
        return args.out

    if command == "predict":
        if args.clip is not None:
            if args.out is None:
                raise UsageError("predict --clip needs --out")
            targets = [(args.clip, args.out)]
            where = args.out.parent
        else:
            if args.out_dir is None:
                raise UsageError("predict --manifest needs --out-dir")
            targets = [(e.path, args.out_dir / f"{e.clip_id}.csv") for e in _selected(args, settings)]
            where = args.out_dir
        written = await pipeline_manager.predict(settings, targets)
        print(f"Wrote {len(written)} probability files")
        return where

    if command == "decode":
        files = sorted(args.probs.glob("*.csv")) if args.probs.is_dir() else [args.probs]
        if not files:
            raise DataValidationError(f"No probability files in {args.probs}")
        events = await pipeline_manager.decode_probs(files, args.out)
        print(f"Decoded {len(events)} clips -> {args.out}")
        return args.out.parent

    if command == "cam":
        await pipeline_manager.cam(settings, [(args.clip, args.out_dir)])
        return args.out_dir

    if command == "localize":
        if args.clip is not None:
            targets = [(args.clip, args.out_dir)]
        else:
            targets = [(e.path, args.out_dir / e.clip_id) for e in _selected(args, settings)]
        written = await pipeline_manager.localize(settings, targets)
        print(f"Localized {len(written)} clips -> {args.out_dir}")
        return args.out_dir

    if command == "eval-phase":
        entries = _selected(args, settings)
        annotations = clip_store.load_annotations(settings.annotations, entries)
        text, _ = await pipeline_manager.eval_phase(
            settings, entries, annotations, args.probs_dir, args.backbone, args.out_dir
        )
        print(text)
        return args.out_dir

    if command == "eval-localize":
        entries = _selected(args, settings)
        annotations = clip_store.load_annotations(settings.annotations, entries) if settings.annotations else {}
        masks = args.masks or settings.manifest.parent / "masks"
        text, _ = await pipeline_manager.eval_localize(
            settings, entries, annotations, args.bolus_dir, masks, args.backbone, args.out_dir,
            flip_x=args.flip_x, overlays=args.overlays
        )
        print(text)
        return args.out_dir

    if command == "phantom":
        paths = await pipeline_manager.phantom(
            args.out_dir, args.subjects, args.clips_per_subject, settings.seed,
            Difficulty(args.difficulty), settings.workers
        )
        print(f"Phantom dataset: {paths['manifest']}")
        return args.out_dir

    if command == "report":
        text = await pipeline_manager.report(_parse_inputs(args.input), args.out_dir, settings)
        print(text)
        return args.out_dir

    raise UsageError(f"Unknown subcommand {command!r}")


def run_subcommand(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        settings = config.build_pipeline_config(args.config, overrides_from_args(args), args.profile)
        where = asyncio.run(dispatch(args, settings))
        write_provenance(where, args.command, argv, settings.model_dump(mode="json"), settings.seed)
        return EXIT_OK
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataValidationError, ValidationError) as e:
        message = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"data error: {message}", file=sys.stderr)
        return EXIT_DATA
    except VfssError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as e:
        logger.debug("Internal failure", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


def main() -> None:
    logging.basicConfig(
        level=getattr(logging, config.LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr
    )
    sys.exit(run_subcommand())


if __name__ == "__main__":
    main()
