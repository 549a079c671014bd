"""Command-line entry point.

Examples::

    mixprec demo --output-dir work --seed 42
    mixprec run --model work/model --calib work/calib --output-dir work/out --seed 42
    mixprec analyze --config pipeline.json
    mixprec costtable gen --model work/model --cost-per-mac 0.001 --out table.csv

Exit codes: 0 success, 2 configuration error, 3 data error, 4 evaluation
budget exceeded.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .costmodel import CostTableError
from .modelio import DataError, save_calibration, save_model
from .pipeline import BudgetExceeded, ConfigError, Pipeline, PipelineConfig, run_all
from .quantizer import QuantError
from .search import SearchError
from .sensitivity import SensitivityError
from .tensorcore import ModelError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_BUDGET = 0, 2, 3, 4

log = logging.getLogger("mixprec")


def _int_list(text):
    return [int(x) for x in text.split(",") if x]


def _float_list(text):
    return [float(x) for x in text.split(",") if x]


def _str_list(text):
    return [x for x in text.split(",") if x]


# flag -> (PipelineConfig field, parser)
_FLAGS = {
    "--model": ("model_path", str),
    "--calib": ("calib_path", str),
    "--output-dir": ("output_dir", str),
    "--seed": ("seed", int),
    "--percentile": ("percentile", float),
    "--n-hutchinson": ("n_hutchinson", int),
    "--bit-palette": ("bit_palette", _int_list),
    "--accuracy-targets": ("accuracy_targets", _float_list),
    "--metric": ("metric", str),
    "--compare-metrics": ("compare_metrics", _str_list),
    "--search": ("search", str),
    "--cost-table": ("cost_table", str),
    "--cost-per-mac": ("cost_per_mac", float),
    "--hessian-norm": ("hessian_norm", str),
    "--clip": ("clip", str),
    "--rounding": ("rounding", str),
    "--quant-mode": ("quant_mode", str),
    "--workers": ("workers", int),
    "--max-evals": ("max_evals", int),
    "--trials": ("trials", int),
}


def _pipeline_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", help="JSON file with PipelineConfig fields")
    for flag, (dest, kind) in _FLAGS.items():
        parent.add_argument(flag, dest=dest, type=kind, default=None)
    parent.add_argument("--record-timings", dest="record_timings", action="store_true", default=None,
                        help="store stage timings in run_manifest.json (breaks byte-identical reruns)")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixprec", description="Mixed-precision post-training quantization")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    parent = _pipeline_parent()
    sub.add_parser("analyze", parents=[parent], help="scales + sensitivity.csv + degradation_matrix.csv")
    sub.add_parser("search", parents=[parent], help="final_config.json + search_trace.json")
    sub.add_parser("quantize", parents=[parent], help="materialise quantized models")
    sub.add_parser("report", parents=[parent], help="report.json, report.md, frontier.csv")
    sub.add_parser("run", parents=[parent], help="all stages in order")

    ct = sub.add_parser("costtable", help="cost table utilities")
    ct_sub = ct.add_subparsers(dest="costtable_command", required=True)
    gen = ct_sub.add_parser("gen", parents=[parent], help="write a synthetic cost table")
    gen.add_argument("--out", help="destination CSV (default: <output-dir>/cost_table.csv)")

    demo = sub.add_parser("demo", help="write the desk-scale demo model and calibration set")
    demo.add_argument("--output-dir", required=True)
    demo.add_argument("--seed", type=int, default=42)
    demo.add_argument("--samples", type=int, default=2048)
    demo.add_argument("--layers", type=int, default=12)
    return parser


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, then the ``--config`` file, then explicit flags."""
    data = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
    for dest, _ in _FLAGS.values():
        value = getattr(args, dest, None)
        if value is not None:
            data[dest] = value
    if getattr(args, "record_timings", None):
        data["record_timings"] = True
    try:
        return PipelineConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _demo(args) -> None:
    from .desk import desk_problem

    model, calib = desk_problem(seed=args.seed, n_calib=args.samples, n_layers=args.layers)
    out = Path(args.output_dir)
    save_model(model, out / "model")
    save_calibration(calib, out / "calib")
    print(f"wrote {out / 'model'} and {out / 'calib'}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "demo":
            _demo(args)
            return EXIT_OK
        cfg = config_from_args(args)
        cfg.validate(need_paths=args.command != "costtable")
        if args.command == "costtable":
            if not cfg.model_path or not Path(cfg.model_path).exists():
                raise ConfigError(f"model_path {cfg.model_path!r} does not exist")
            Pipeline(cfg).costtable(args.out)
            return EXIT_OK
        if args.command == "run":
            run_all(cfg)
            return EXIT_OK
        pipe = Pipeline(cfg)
        try:
            getattr(pipe, args.command)()
        finally:
            pipe.write_manifest()
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetExceeded as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (DataError, ModelError, CostTableError, QuantError, SensitivityError, SearchError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
