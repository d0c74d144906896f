"""Command-line entry point: ``vertloc <verb> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, PipelineConfig, load_config
from .pipeline import EXIT_FATAL


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON pipeline config (defaults for missing keys)")
    common.add_argument("--seed", type=int, help="root seed, overrides the config")
    common.add_argument("--output-dir", help="output directory, overrides the config")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vertloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("make-labels", parents=[common], help="dense label maps from centroid annotations")
    sub.add_parser("sample", parents=[common], help="training patches for both networks")
    p = sub.add_parser("train", parents=[common], help="train one network")
    p.add_argument("which", choices=("detection", "identification"))
    p.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
    p.add_argument("--samples", type=Path, help="sample directory (default: <output>/samples/<which>)")
    p = sub.add_parser("predict", parents=[common], help="centroid predictions for one or all test scans")
    p.add_argument("--scan", type=Path, help="single scan; default is every scan in test_dir")
    p.add_argument("--stub", action="store_true", help="use analytic stub networks instead of checkpoints")
    p.add_argument("--save-maps", action="store_true", help="also write detection/identification/fused maps")
    sub.add_parser("evaluate", parents=[common], help="score predictions against test annotations")
    p = sub.add_parser("plot", parents=[common], help="per-vertebra error box plot from a report")
    p.add_argument("--report", type=Path, help="report JSON (default: <output>/evaluation/report.json)")
    p.add_argument("--out", type=Path, help="image path (default: <output>/evaluation/per_vertebra.png)")
    p = sub.add_parser("init-config", help="write the default config as JSON")
    p.add_argument("path", type=Path)
    p = sub.add_parser("synth", help="write a synthetic phantom dataset")
    p.add_argument("directory", type=Path)
    p.add_argument("--scans", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    return parser


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "init-config":
        args.path.write_text(json.dumps(PipelineConfig().to_dict(), indent=2) + "\n")
        return 0
    if args.command == "synth":
        from .synthetic import write_dataset

        write_dataset(args.directory, args.scans, args.seed, tuple(args.spacing))
        return 0
    try:
        cfg = load_config(args.config, seed=args.seed, output_dir=args.output_dir)
        if args.command == "make-labels":
            return pipeline.cmd_make_labels(cfg)
        if args.command == "sample":
            return pipeline.cmd_sample(cfg)
        if args.command == "train":
            return pipeline.cmd_train(cfg, args.which, args.resume, args.samples)
        if args.command == "predict":
            return pipeline.cmd_predict(cfg, args.scan, args.stub, args.save_maps)
        if args.command == "evaluate":
            return pipeline.cmd_evaluate(cfg)
        if args.command == "plot":
            evaluation = Path(cfg.output_dir) / "evaluation"
            return pipeline.cmd_plot(args.report or evaluation / "report.json",
                                     args.out or evaluation / "per_vertebra.png")
    except (ConfigError, pipeline.PipelineError, FileNotFoundError, ValueError) as exc:
        logging.getLogger("vertloc").error("%s", exc)
        return EXIT_FATAL
    return EXIT_FATAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
