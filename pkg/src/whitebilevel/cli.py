"""Command-line front end.

Subcommands: degrade, learn, grid, batch, report.  Exit codes: 0 on
success, 1 on per-item failures, 2 on configuration errors.  The
``WHITEBILEVEL_THREADS`` environment variable caps batch parallelism.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .config import ConfigError, ExperimentConfig, KernelSpec, load_config
from .harness import MissingSideDataError, cmd_batch, cmd_degrade, cmd_grid, cmd_learn, cmd_report

logger = logging.getLogger("whitebilevel")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="whitebilevel",
        description="Learn TV deconvolution regularization weights by bilevel optimization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--quiet", action="store_true", help="suppress progress logging")
        p.add_argument("--config", required=True, help="path to the JSON experiment config")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--seed", type=int, help="override the base seed")
        p.add_argument("--bsnr", type=float, action="append",
                       help="restrict to the given BSNR level(s); repeatable")
        p.add_argument("--kernel", choices=("gaussian", "motion"),
                       help="override the blur kernel kind (default parameters)")

    p = sub.add_parser("degrade", help="synthesize blurred, noisy observations")
    common(p)

    p = sub.add_parser("learn", help="learn the weight for one image and loss")
    common(p)
    p.add_argument("--image", required=True, help="image id, e.g. synth000")
    p.add_argument("--loss", required=True, choices=("mse", "gauss", "white"))

    p = sub.add_parser("grid", help="brute-force sweep of the weight grid for one image")
    common(p)
    p.add_argument("--image", required=True, help="image id")

    p = sub.add_parser("batch", help="run every (image, bsnr, loss) job and aggregate")
    common(p)

    p = sub.add_parser("report", help="plots and tables from batch results")
    common(p)
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    updates = {}
    if args.out is not None:
        updates["out_dir"] = args.out
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.bsnr:
        missing = [b for b in args.bsnr if b not in cfg.bsnr]
        if missing:
            raise ConfigError(f"--bsnr {missing} not present in the config levels {cfg.bsnr}")
        updates["bsnr"] = tuple(args.bsnr)
    if args.kernel is not None:
        updates["kernel"] = KernelSpec(kind=args.kernel)
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
        cfg.validate()
    return cfg


def _single_bsnr(cfg: ExperimentConfig, args) -> float:
    if args.bsnr:
        return float(args.bsnr[0])
    if len(cfg.bsnr) == 1:
        return cfg.bsnr[0]
    raise ConfigError(
        f"config lists several BSNR levels {cfg.bsnr}; pick one with --bsnr"
    )


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _apply_overrides(load_config(args.config), args)
    except ConfigError as exc:
        logger.error("%s", exc)
        return 2

    try:
        if args.command == "degrade":
            written = cmd_degrade(cfg)
            logger.info("wrote %d observations under %s", len(written), cfg.out_dir)
            return 0
        if args.command == "learn":
            record = cmd_learn(cfg, args.image, _single_bsnr(cfg, args), args.loss)
            logger.info(
                "%s bsnr=%g loss=%s: lambda_hat=%.6g q=%.6g psnr=%s",
                record.image, record.bsnr, record.loss, record.lambda_hat,
                record.q_value, "n/a" if record.psnr is None else f"{record.psnr:.2f}",
            )
            return 0
        if args.command == "grid":
            _, interior = cmd_grid(cfg, args.image, _single_bsnr(cfg, args))
            return 0 if interior else 1
        if args.command == "batch":
            _, ok = cmd_batch(cfg)
            return 0 if ok else 1
        if args.command == "report":
            outputs = cmd_report(cfg)
            for name, path in sorted(outputs.items()):
                logger.info("%s: %s", name, path)
            return 0
    except ConfigError as exc:
        logger.error("%s", exc)
        return 2
    except MissingSideDataError as exc:
        logger.error("%s", exc)
        return 1
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
