"""Command-line entry point: ``cilab {generate-data,train,transfer,report,evaluate}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import load_config
from .errors import CilabError
from .harness import (
    curves_csv,
    metrics_csv,
    read_metrics,
    render_report,
    run_experiment,
    write_data,
    write_metrics,
)
from .model import load_checkpoint
from .retrieval import mean_average_precision
from .synth import load_split


def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    out = Path(cfg.output_dir)
    counts = write_data(cfg, out)
    print(f"wrote dataset to {out}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def _run(args, transfer: bool) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    out = Path(cfg.output_dir)
    result = run_experiment(cfg, out, transfer=transfer)
    write_metrics(result.rows, out / "metrics.csv")
    (out / "plan.json").write_text(result.plan.to_json() + "\n")
    print(metrics_csv(result.rows), end="")
    return 0


def cmd_train(args) -> int:
    return _run(args, transfer=False)


def cmd_transfer(args) -> int:
    return _run(args, transfer=True)


def cmd_report(args) -> int:
    rows = read_metrics(args.metrics)
    text = render_report(rows)
    print(text)
    out = Path(args.out) if args.out else Path(args.metrics).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text + "\n")
    (out / "curves.csv").write_text(curves_csv(rows))
    return 0


def cmd_evaluate(args) -> int:
    net, _ = load_checkpoint(args.checkpoint)
    split = load_split(args.split)
    print(f"mAP {mean_average_precision(net, split):.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cilab", description="Continual instance learning lab")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, help_ in (
        ("generate-data", cmd_generate, "render the synthetic dataset and evaluation split"),
        ("train", cmd_train, "run cumulative reference and every configured strategy"),
        ("transfer", cmd_transfer, "as train, plus runs with synthetic pretraining"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", default=None, help="overrides output_dir")
        p.set_defaults(func=fn)

    p = sub.add_parser("report", help="tables and curve data from a metrics CSV")
    p.add_argument("metrics", type=Path)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("evaluate", help="mAP of a checkpoint on a saved split")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("split", type=Path)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CilabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
