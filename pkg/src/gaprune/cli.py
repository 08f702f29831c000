"""Command-line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from gaprune.analysis import GRANULARITIES, METHODS
from gaprune.config import ExperimentConfig, build_config, load_config
from gaprune.errors import ConfigError, DependencyError, GAPruneError
from gaprune.pipeline import MANIFEST, ORDER, Run, verify_run

HELP = {
    "synth": "generate training, calibration, geometry and evaluation data",
    "train-dense": "train the dense fixture encoder",
    "sample": "k-means representative sampling of both calibration pools",
    "analyze": "Fisher and gradient statistics, alignment and importance scores",
    "prune": "build one mask per (method, sparsity)",
    "retrain": "masked retraining of every pruned model",
    "eval": "evaluate dense, one-shot and (if present) retrained models",
    "geom": "embedding geometry metrics",
    "correlate": "rank correlation between importance methods",
    "layer-probe": "per-layer importance and retrieval probe",
    "report": "render the evaluation tables",
}


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _methods(text: str) -> list[str]:
    out = [x.strip() for x in text.split(",") if x.strip()]
    bad = [m for m in out if m not in METHODS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
    return out


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run", required=True, type=Path, help="run directory")
    common.add_argument("--config", type=Path, help="TOML experiment config")
    common.add_argument("--seed", type=_seed, help="experiment seed; re-derives every section seed")
    common.add_argument("--sparsity", type=_floats, help="comma-separated sparsity levels, e.g. 0.3,0.5")
    common.add_argument("--method", type=_methods, help=f"comma-separated subset of {','.join(METHODS)}")
    common.add_argument("--granularity", choices=GRANULARITIES, help="alignment group")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gaprune", description="Desk-scale gradient-alignment pruning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ORDER:
        p = sub.add_parser(name, parents=[common], help=HELP[name])
        if name in ("train-dense", "retrain"):
            p.add_argument("--steps", type=int, help="optimizer steps for this stage")
    sub.add_parser("all", parents=[common], help="run every stage in order")
    sub.add_parser("verify", parents=[common], help="check stored artifacts against their invariants")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    manifest = args.run / MANIFEST
    if args.config is not None or not manifest.exists():
        cfg = load_config(args.config, args.seed)
    else:
        cfg = build_config(json.loads(manifest.read_text(encoding="utf-8"))["config"], args.seed)
    if args.sparsity is not None:
        cfg = cfg.replace("experiment", sparsities=tuple(args.sparsity))
    if args.method is not None:
        cfg = cfg.replace("experiment", methods=tuple(args.method))
    if args.granularity is not None:
        cfg = cfg.replace("dai", alignment_granularity=args.granularity)
    steps = getattr(args, "steps", None)
    if steps is not None:
        section = "train" if args.command == "train-dense" else "retrain"
        cfg = cfg.replace(section, steps=steps)
    return cfg


def _fail(exc: BaseException) -> int:
    kind = getattr(exc, "kind", "error")
    payload = {"error": kind, "message": str(exc)}
    if isinstance(exc, DependencyError):
        payload.update(stage=exc.stage, requires=exc.requires)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return 2


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            if not (args.run / MANIFEST).exists():
                raise ConfigError(f"no run at {args.run}")
            checks = verify_run(args.run)
            for c in checks:
                print(c.line())
            return 0 if all(c.ok for c in checks) else 1
        run = Run.open(args.run, resolve_config(args))
        stages = ORDER if args.command == "all" else (args.command,)
        for name in stages:
            outputs = run.run_stage(name)
            print(f"{name}: wrote {len(outputs)} artifact(s)")
        if args.command in ("report", "all"):
            print(run.path("reports/report.txt").read_text(encoding="utf-8"), end="")
        return 0
    except GAPruneError as exc:
        return _fail(exc)
    except (ValueError, OSError) as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
