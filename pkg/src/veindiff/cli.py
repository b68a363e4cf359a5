"""Command-line entry point: ``veindiff {synth,masks,pretrain,train,eval,det}``.

Every subcommand accepts ``--config FILE`` (flat ``key = value`` text) and one
flag per configuration key (``--num-classes 12``); flags win over the file.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from .classical_veins import FusionConfig, write_fused_masks
from .config import FIELD_TYPES, TrainConfig, load_config, parse_config_text
from .errors import CheckpointError, ConfigError, DatasetError, InvariantError, ProtocolError, TrainingError
from .metrics import det_curve, write_det_csv
from .synthdata import generate_dataset, read_manifest
from .trainer import Checkpoint, det_path, evaluate, joint_train, pretrain_segmentation, scores_path

log = logging.getLogger("veindiff")

HANDLED = (CheckpointError, ConfigError, DatasetError, InvariantError, ProtocolError, TrainingError, OSError)


def _add_config_flags(parser: argparse.ArgumentParser, skip=()) -> None:
    group = parser.add_argument_group("configuration keys")
    group.add_argument("--config", metavar="FILE", help="key = value configuration file")
    for f in fields(TrainConfig):
        if f.name in skip:
            continue
        names = [f"--{f.name.replace('_', '-')}"]
        if "_" in f.name:
            names.append(f"--{f.name}")
        group.add_argument(*names, dest=f"cfg_{f.name}", metavar=FIELD_TYPES[f.name].__name__.upper(),
                           default=None, help=f"default: {f.default}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="veindiff", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="render a synthetic two-session dataset")
    p.add_argument("--out", dest="cfg_root", metavar="DIR", help="dataset root (same as --root)")
    p.add_argument("--classes", dest="cfg_num_classes", metavar="INT", help="same as --num-classes")
    _add_config_flags(p)

    p = sub.add_parser("masks", help="replace masks by majority-vote fused classical masks")
    p.add_argument("--debug", action="store_true", help="dump per-voter masks to <root>/debug_masks/")
    p.add_argument("--vote-threshold", type=int, default=3, help="votes needed out of 4 (default 3)")
    _add_config_flags(p)

    p = sub.add_parser("pretrain", help="pretrain the segmentation and authentication networks")
    p.add_argument("--out", required=True, metavar="CKPT", help="checkpoint to write")
    _add_config_flags(p)

    p = sub.add_parser("train", help="joint training from a pretrain checkpoint")
    p.add_argument("--checkpoint", required=True, metavar="CKPT", help="pretrain checkpoint")
    p.add_argument("--out", required=True, metavar="CKPT", help="checkpoint to write")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test session")
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--report", required=True, metavar="PATH", help="metrics report to write")
    _add_config_flags(p)

    p = sub.add_parser("det", help="write the DET sweep CSV for an evaluated report")
    p.add_argument("--report", required=True, metavar="PATH")
    return parser


def _overrides(args) -> dict:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}


def _config(args, base: dict | None = None) -> TrainConfig:
    merged = dict(base or {})
    merged.update(_overrides(args))
    return load_config(args.config, merged)


def _config_from_checkpoint(args, ckpt: Checkpoint) -> TrainConfig:
    """Checkpoint settings, then the config file, then flags."""
    values = dict(ckpt.config)
    if args.config:
        try:
            with open(args.config) as fh:
                values.update(parse_config_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
    values.update(_overrides(args))
    return load_config(None, values)


def run(args) -> int:
    if args.command == "synth":
        cfg = _config(args)
        m = generate_dataset(cfg.root, cfg.num_classes, cfg.samples_per_session, cfg.image_h, cfg.image_w, cfg.seed)
        print(os.path.join(m.root, "manifest.txt"))
    elif args.command == "masks":
        cfg = _config(args)
        manifest = read_manifest(cfg.root)
        n = write_fused_masks(manifest, FusionConfig(vote_threshold=args.vote_threshold), debug=args.debug)
        log.info("wrote %d fused masks", n)
    elif args.command == "pretrain":
        cfg = _config(args)
        pretrain_segmentation(cfg).save(args.out)
        print(args.out)
    elif args.command == "train":
        start = Checkpoint.load(args.checkpoint)
        cfg = _config_from_checkpoint(args, start)
        joint_train(cfg, start).save(args.out)
        print(args.out)
    elif args.command == "eval":
        ckpt = Checkpoint.load(args.checkpoint)
        cfg = _config_from_checkpoint(args, ckpt)
        report = evaluate(cfg, ckpt, args.report)
        sys.stdout.write(report.to_text())
    elif args.command == "det":
        path = scores_path(args.report)
        if not os.path.exists(path):
            raise DatasetError(f"missing file: {path} (run eval with --report {args.report} first)")
        scores = np.load(path)
        write_det_csv(det_path(args.report), det_curve(scores["genuine"], scores["impostor"]))
        print(det_path(args.report))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except HANDLED as exc:
        print(f"veindiff: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
