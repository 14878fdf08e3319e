"""Command-line entry point.

    abstrap simulate --config sweep.yaml --out run1
    abstrap analyze  --config sweep.yaml --out run1 [--manifest PATH | RECORD ...]
    abstrap fit      --config sweep.yaml --out run1 [--dataset PATH]
    abstrap report   --config sweep.yaml --out run1 [--report PATH --dataset PATH]
    abstrap pipeline --config sweep.yaml --out run1 --jobs 4

Exit status: 0 on success, 1 for invalid configuration or arguments,
2 for runtime failures.
"""
import argparse
import logging
from pathlib import Path
import sys

from . import io, pipeline
from .config import ConfigValidationError, PipelineConfig, load_config, validate
from .simulator import ConfigError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML pipeline configuration")
    common.add_argument("--seed", type=_u64, help="override simulator.seed")
    common.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
    common.add_argument("--jobs", type=_positive, default=1, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="abstrap", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write synthetic records")
    p = sub.add_parser("analyze", parents=[common], help="HMM analysis into a dataset table")
    p.add_argument("--manifest", type=Path)
    p.add_argument("records", nargs="*", type=Path)
    p = sub.add_parser("fit", parents=[common], help="staged fits into a report")
    p.add_argument("--dataset", type=Path)
    p = sub.add_parser("report", parents=[common], help="plot-data tables")
    p.add_argument("--report", type=Path)
    p.add_argument("--dataset", type=Path)
    sub.add_parser("pipeline", parents=[common], help="simulate, analyze, fit and report")
    return parser


def _config(args):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.simulator.seed = args.seed
    if args.out is not None:
        cfg.output.dir = str(args.out)
    return validate(cfg)


def _cmd_simulate(cfg, args, out):
    manifest = pipeline.simulate(cfg, out, args.jobs)
    print(f"wrote {len(manifest['records'])} record(s) and {out / pipeline.MANIFEST}")


def _cmd_analyze(cfg, args, out):
    if args.records:
        dataset, entries, base = pipeline.analyze(cfg, record_paths=args.records,
                                                  jobs=args.jobs)
    else:
        manifest = args.manifest or out / pipeline.MANIFEST
        dataset, entries, base = pipeline.analyze(cfg, manifest_path=manifest, jobs=args.jobs)
    out.mkdir(parents=True, exist_ok=True)
    io.write_dataset(out / pipeline.DATASET, dataset)
    if cfg.output.compare_truth:
        rows = pipeline.truth_comparison(dataset, entries, base)
        if rows:
            io.write_table(out / pipeline.TRUTH_TABLE, pipeline.TRUTH_HEADER, rows)
    print(f"wrote {len(dataset)} row(s) to {out / pipeline.DATASET}")


def _cmd_fit(cfg, args, out):
    dataset = io.read_dataset(args.dataset or out / pipeline.DATASET)
    report = pipeline.fit(dataset, cfg)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / pipeline.REPORT, report)
    for w in report["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    print(f"fit status {report['status']}; wrote {out / pipeline.REPORT}")


def _cmd_report(cfg, args, out):
    report = io.read_json(args.report or out / pipeline.REPORT)
    dataset = io.read_dataset(args.dataset or out / pipeline.DATASET)
    files = pipeline.write_figures(report, dataset, out / pipeline.FIGURES)
    print(f"wrote {len(files)} table(s) to {out / pipeline.FIGURES}")


def _cmd_pipeline(cfg, args, out):
    report = pipeline.run(cfg, out, args.jobs)
    for w in report["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    print(f"pipeline finished (fit status {report['status']}); outputs in {out}")


COMMANDS = {"simulate": _cmd_simulate, "analyze": _cmd_analyze, "fit": _cmd_fit,
            "report": _cmd_report, "pipeline": _cmd_pipeline}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](cfg, args, Path(cfg.output.dir))
    except (ConfigValidationError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as err:  # noqa: BLE001 - the exit code is the contract
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
