"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .errors import DataError, PtqLoraError
from .pipeline import (
    MANIFEST_NAME,
    evaluate_model,
    generate_data,
    load_manifest,
    prepare_data,
    run_pipeline,
    run_stage1,
    run_stage2,
    run_stage3,
    run_suite,
)
from .quant.apply import METHODS
from .report import compare_stages, emit_report, format_comparison

log = logging.getLogger("ptqlora")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _shared(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file (defaults apply when omitted)")
    p.add_argument("--seed", type=_u64, help="override the config seed")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ptqlora", description="SFT -> 4-bit PTQ -> QLoRA pipeline at desk scale")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic JSON-lines datasets")
    _shared(p)

    p = sub.add_parser("train-sft", help="stage 1: full-parameter SFT on the training mixture")
    _shared(p)

    p = sub.add_parser("quantize", help="stage 2: 4-bit post-training quantization")
    _shared(p)
    p.add_argument("--method", choices=METHODS, help="override quant.method")
    p.add_argument("--checkpoint", type=Path, help="stage-1 checkpoint (default <out>/checkpoints/stage1.pqlr)")

    p = sub.add_parser("train-qlora", help="stage 3: LoRA fine-tuning on the quantized model")
    _shared(p)
    p.add_argument("--checkpoint", type=Path, help="stage-2 checkpoint (default <out>/checkpoints/stage2.pqlr)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured test sets")
    _shared(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("pipeline", help="run all three stages (resumable)")
    _shared(p)
    p.add_argument("--method", choices=METHODS, help="override quant.method")
    p.add_argument("--seeds", help="comma-separated seeds: run a suite over seeds and both methods")
    p.add_argument("--no-resume", action="store_true", help="ignore an existing manifest")

    p = sub.add_parser("report", help="render manifests as a stage-by-metric table")
    p.add_argument("manifests", nargs="+", type=Path, help="manifest files or directories holding them")
    p.add_argument("--format", choices=("csv", "table"), default="table")
    p.add_argument("--out", type=Path, help="write to this file instead of stdout")

    p = sub.add_parser("compare", help="Wilcoxon signed-rank test between two stages")
    p.add_argument("manifests", nargs="+", type=Path, help="manifest files or directories holding them")
    p.add_argument("--stage-a", required=True, help="stage label or wildcard pattern")
    p.add_argument("--stage-b", required=True, help="stage label or wildcard pattern")
    p.add_argument("--metric", required=True)
    p.add_argument("--task", help="restrict to tasks matching this pattern")
    p.add_argument("--mode", choices=("auto", "exact", "normal_approx"), default="auto")
    p.add_argument("--alpha", type=float, default=0.05)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "method", None):
        cfg = cfg.with_method(args.method)
    return cfg


def _manifest_paths(items) -> list[Path]:
    out = []
    for p in items:
        if p.is_dir():
            found = sorted(p.rglob(MANIFEST_NAME))
            if not found:
                raise DataError(f"no {MANIFEST_NAME} under {p}")
            out.extend(found)
        else:
            out.append(p)
    return out


def _print_report(report) -> None:
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    for name, paths in generate_data(cfg, args.out).items():
        for split, path in sorted(paths.items()):
            print(f"{name}\t{split}\t{path}")
    return EXIT_OK


def cmd_train_sft(args) -> int:
    cfg = _config(args)
    bundle = prepare_data(cfg, args.out / "data")
    lines: list[str] = []
    model = run_stage1(cfg, bundle.mixture(cfg), lines)
    (args.out / "logs").mkdir(parents=True, exist_ok=True)
    (args.out / "logs" / "stage1.log").write_text("".join(x + "\n" for x in lines), encoding="utf-8")
    path = save_checkpoint(model, args.out / "checkpoints" / "stage1.pqlr")
    print(path)
    return EXIT_OK


def cmd_quantize(args) -> int:
    cfg = _config(args)
    src = args.checkpoint or args.out / "checkpoints" / "stage1.pqlr"
    sft = load_checkpoint(src)
    if getattr(sft, "params", None) is None:
        raise DataError(f"{src} is not a stage-1 (dense) checkpoint")
    bundle = prepare_data(cfg, args.out / "data")
    qmodel = run_stage2(replace(cfg, model=sft.cfg), sft, bundle.mixture(cfg))
    path = save_checkpoint(qmodel, args.out / "checkpoints" / "stage2.pqlr")
    print(path)
    print(f"density {qmodel.density_bits_per_weight():.6f} bits/weight")
    return EXIT_OK


def cmd_train_qlora(args) -> int:
    cfg = _config(args)
    src = args.checkpoint or args.out / "checkpoints" / "stage2.pqlr"
    qmodel = load_checkpoint(src)
    if not hasattr(qmodel, "qweights"):
        raise DataError(f"{src} is not a stage-2 (quantized) checkpoint")
    bundle = prepare_data(cfg, args.out / "data")
    lines: list[str] = []
    model = run_stage3(replace(cfg, model=qmodel.cfg), qmodel, bundle.mixture(cfg), lines)
    (args.out / "logs").mkdir(parents=True, exist_ok=True)
    (args.out / "logs" / "stage3.log").write_text("".join(x + "\n" for x in lines), encoding="utf-8")
    path = save_checkpoint(model, args.out / "checkpoints" / "stage3.pqlr")
    print(path)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(args.checkpoint)
    bundle = prepare_data(cfg, args.out / "data")
    report = evaluate_model(replace(cfg, model=model.cfg), model, bundle)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "eval.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _print_report(report)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    if args.seeds:
        try:
            seeds = [_u64(s.strip()) for s in args.seeds.split(",") if s.strip()]
        except argparse.ArgumentTypeError as exc:
            raise PtqLoraError(str(exc)) from None
        methods = [args.method] if args.method else list(METHODS)
        manifests = run_suite(cfg, args.out, seeds, methods, resume=not args.no_resume)
    else:
        manifests = [run_pipeline(cfg, args.out, resume=not args.no_resume)]
    sys.stdout.write(emit_report(manifests, "table"))
    return EXIT_OK


def cmd_report(args) -> int:
    manifests = [load_manifest(p) for p in _manifest_paths(args.manifests)]
    text = emit_report(manifests, args.format)
    if args.out:
        args.out.write_text(text, encoding="utf-8", newline="")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    manifests = [load_manifest(p) for p in _manifest_paths(args.manifests)]
    paired = compare_stages(manifests, args.stage_a, args.stage_b, args.metric, args.task, args.mode)
    sys.stdout.write(format_comparison(paired, args.stage_a, args.stage_b, args.metric, args.alpha))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-sft": cmd_train_sft,
    "quantize": cmd_quantize,
    "train-qlora": cmd_train_qlora,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
    "report": cmd_report,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except PtqLoraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
