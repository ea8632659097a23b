"""Command line: ``python -m d2f <command> [--config run.json] [--set key=value ...] [--seed N]``.

Commands: gen-data, train-teacher, distill, eval, sweep, report. Every
configuration field can be overridden with ``--set section.field=value``
(values parse as JSON, so ``--set decode.tau_add=0.5`` and
``--set eval.sweep_tau_add=[0.1,0.3]`` both work).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .harness import runs
from .harness.config import RunConfig, load_config
from .harness.report import emit_report, read_report


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one field, e.g. distill.steps=200 (repeatable)")
    p.add_argument("--seed", type=int, help="master seed; derives every component seed")
    p.add_argument("--output-dir", help="run directory (overrides output_dir)")
    p.add_argument("--format", choices=("csv", "json"), help="report format (overrides report_format)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="d2f", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("gen-data", help="generate and save train / held-out splits"))
    _common(sub.add_parser("train-teacher", help="train the bidirectional teacher"))

    p = sub.add_parser("distill", help="distill a block-causal student from the teacher")
    _common(p)
    p.add_argument("--schedule-mode", choices=("monotone", "random"))

    p = sub.add_parser("eval", help="score decoders on the held-out split")
    _common(p)
    p.add_argument("--decoders", default="vanilla,cache_only,d2f", help="comma-separated decoder list")
    p.add_argument("--checkpoint", help="score this checkpoint with a single --decoders entry instead")

    _common(sub.add_parser("sweep", help="tau_add x tau_act threshold grid over the student"))

    p = sub.add_parser("report", help="re-emit metrics with speedups against a named baseline")
    p.add_argument("inputs", nargs="+", help="arms.json / report files to merge")
    p.add_argument("--baseline", help="reference arm name (default: first row)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", required=True, help="output file")
    return parser


def _config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"output_dir={json.dumps(args.output_dir)}")
    if args.format:
        overrides.append(f"report_format={json.dumps(args.format)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _emit(cfg: RunConfig, results, stem: str, baseline: str | None) -> None:
    rows = [r.row() for r in results]
    names = {r["arm"] for r in rows}
    path = emit_report(rows, cfg.report_format, cfg.path(f"{stem}.{cfg.report_format}"),
                       baseline if baseline in names else None)
    for r in rows:
        print(f"{r['arm']:>22}  exact_match {r['exact_match']:.3f}  forward_passes {r['forward_passes']}"
              f"  tokens/forward {r['tokens_per_forward']:.2f}")
    print(f"wrote {path}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "report":
            rows = [row for path in args.inputs for row in read_report(path)]
            out = Path(args.out)
            emit_report(rows, args.format, out, args.baseline)
            print(f"wrote {out}")
            return 0
        cfg = _config(args)
        if args.command == "gen-data":
            train, held = runs.run_gen_data(cfg)
            print(f"train {len(train)}  heldout {len(held)}  -> {cfg.path('data.npz')}")
        elif args.command == "train-teacher":
            print(f"wrote {runs.run_train_teacher(cfg)}")
        elif args.command == "distill":
            print(f"wrote {runs.run_distill(cfg, args.schedule_mode)}")
        elif args.command == "eval":
            decoders = [d.strip() for d in args.decoders.split(",") if d.strip()]
            if args.checkpoint:
                if len(decoders) != 1:
                    raise ValueError("--checkpoint takes exactly one decoder")
                resolved = cfg.resolved()
                metrics = runs.run_eval(args.checkpoint, decoders[0], resolved)
                print(json.dumps(dataclasses.asdict(metrics), indent=2))
            else:
                results = runs.run_arms(cfg, decoders)
                _emit(cfg.resolved(), results, "metrics", cfg.eval.baseline_arm)
        elif args.command == "sweep":
            results = runs.run_sweep(cfg)
            _emit(cfg.resolved(), results, "sweep", None)
    except (ValueError, FileNotFoundError, OSError, FloatingPointError) as exc:
        print(f"d2f {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
