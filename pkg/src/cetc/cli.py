"""Command-line front end.

    cetc run --config cfg.json [--coeffs A,B,G | --sweep]
             [--eval-only CKPT] [--seed N] [--deterministic] [--out DIR]

Exit code 0 means the run completed and all artifacts were written;
any failure exits nonzero after emitting a machine-readable error JSON
(to stderr and, when the output directory is known, to ``error.json``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .decoder import EnsembleCoefficients
from .experiment import ExperimentConfig, run_eval_only, run_single, run_sweep
from .metrics import format_percent

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cetc",
        description="Train and evaluate the controllable ensemble CNN-transformer classifier.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="train/evaluate according to a config file")
    run.add_argument("--config", required=True, help="path to the JSON run config")
    mode = run.add_mutually_exclusive_group()
    mode.add_argument("--coeffs", help="single run with coefficients A,B,G "
                                       "(the token 1/3 is accepted)")
    mode.add_argument("--sweep", action="store_true",
                      help="run all seven coefficient groups")
    run.add_argument("--eval-only", metavar="CKPT",
                     help="skip training; evaluate this checkpoint")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--deterministic", action="store_true",
                     help="serial, single-threaded execution")
    run.add_argument("--out", help="override the output directory")
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    updates = {}
    if args.coeffs:
        updates["coefficients"] = EnsembleCoefficients.parse(args.coeffs)
        updates["sweep"] = False
    elif args.sweep:
        updates["sweep"] = True
        updates["coefficients"] = None
    if args.seed is not None:
        updates["seed"] = args.seed
        updates["train"] = dataclasses.replace(cfg.train, seed=args.seed)
    if args.deterministic:
        updates["deterministic"] = True
    if args.out:
        updates["output_dir"] = args.out
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _emit_error(out_dir, exc: BaseException) -> None:
    doc = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    line = json.dumps(doc, sort_keys=True)
    print(line, file=sys.stderr)
    if out_dir is not None:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "error.json").write_text(line + "\n")
        except OSError:
            pass


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = None
    try:
        cfg = ExperimentConfig.from_json(args.config)
        cfg = _apply_overrides(cfg, args)
        out_dir = cfg.output_dir

        if args.eval_only:
            doc = run_eval_only(cfg, args.eval_only)
            print(json.dumps(doc, indent=2, sort_keys=True))
            return 0

        if cfg.sweep:
            sweep = run_sweep(cfg)
            best_coeffs, best_report = sweep.best
            print((Path(cfg.output_dir) / "results.txt").read_text(), end="")
            print(f"best group: {best_coeffs.as_tuple()} "
                  f"(ACC {format_percent(best_report.acc)})")
        else:
            result = run_single(cfg)
            print((Path(cfg.output_dir) / "results.txt").read_text(), end="")
            print(f"best val loss: {result.val_loss!r}")
        return 0
    except BaseException as exc:  # noqa: BLE001 - CLI boundary
        if isinstance(exc, KeyboardInterrupt):
            raise
        _emit_error(out_dir, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
