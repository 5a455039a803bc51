"""Command-line entry point: ``signrepair <subcommand> --config cfg.yaml --seed 0 --out runs/x``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig
from .pipeline import ReportBundle, StageError, run_ablations, run_pipeline

STAGE_COMMANDS = {
    "prepare": "prepare",
    "train-classifier": "classifier",
    "train-generator": "generator",
    "attack": "attacks",
    "train-reconstructor": "reconstructor",
    "evaluate": "evaluate",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="signrepair", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGE_COMMANDS, "ablate", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="YAML experiment config (defaults when omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=Path, required=True, help="workspace directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in STAGE_COMMANDS:
            p.add_argument("--fresh", action="store_true", help="ignore completed stages and recompute")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def fail(stage: str, message: str) -> int:
    print(f"signrepair: stage {stage} failed: {message}", file=sys.stderr)
    return 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from .report import emit_ablation_report, emit_report

    try:
        cfg = load_config(args)
    except (OSError, ValueError, KeyError) as exc:
        return fail("config", str(exc))

    if args.command in STAGE_COMMANDS:
        b = run_pipeline(cfg, args.out, until=STAGE_COMMANDS[args.command], resume=not args.fresh)
        if b.failed_stage:
            emit_report(b, args.out / "report")
            return fail(b.failed_stage, b.error or "unknown error")
        if args.command == "evaluate":
            emit_report(b, args.out / "report")
            for cond in b.conditions:
                print(f"{cond:28s} accuracy {b.accuracy(cond):.4f}")
        else:
            print(f"completed: {', '.join(b.completed)}")
        return 0

    if args.command == "ablate":
        try:
            bundles = run_ablations(cfg, args.out)
        except StageError as exc:
            return fail(exc.stage, str(exc))
        except Exception as exc:  # noqa: BLE001
            return fail("ablate", str(exc))
        emit_ablation_report(bundles, args.out / "ablations")
        for b in bundles:
            print(f"{b.variant:24s} repair score {b.repair_score:.4f}")
        return 0

    # report: re-emit from the stored bundle
    path = args.out / "bundle.json"
    if not path.exists():
        return fail("report", f"no bundle at {path}; run 'evaluate' first")
    b = ReportBundle.load(path)
    emit_report(b, args.out / "report")
    abl = args.out / "ablations" / "ablations.json"
    if abl.exists():
        from .report import load_ablation_bundles
        emit_ablation_report(load_ablation_bundles(abl), args.out / "ablations")
    print(f"report written to {args.out / 'report'}{' (partial)' if b.partial else ''}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
