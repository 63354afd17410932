"""Command-line entry point: search, retrain, eval, gen-data, export-trace."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .artifacts import load_checkpoint, read_trace, save_checkpoint, trace_to_jsonl, write_json
from .config import BITS_PER_MB, RunConfig, config_from_dict, load_config
from .data import load_or_generate, save_dataset
from .errors import ConfigError
from .models import accuracy, build_from_spec, full_precision
from .objectives import mb
from .pipeline import fixed_weight_fn, load_data, retrain, run_search, _derive_int
from .quantization import QuantCache
from .supernet import import_assignment

log = logging.getLogger("mpqsearch")


def _bits_list(text: str) -> list[int]:
    try:
        return [int(b) for b in text.split(",") if b.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--bits expects comma-separated integers, got {text!r}") from None


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="TOML config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out-dir", type=Path, default=Path("runs/latest"))
    target = parser.add_mutually_exclusive_group()
    target.add_argument("--target-mb", type=float)
    target.add_argument("--target-bits", type=float)
    parser.add_argument("--lambda", dest="lam", type=float)
    parser.add_argument("--epsilon", type=float)
    parser.add_argument("--groups", type=int)
    parser.add_argument("--bits", type=_bits_list)
    parser.add_argument("--mode", choices=["first-order", "unrolled"])
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpqsearch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="bit-width search, derive, retrain and evaluate")
    _common(p)

    p = sub.add_parser("retrain", help="retrain from scratch at a fixed exported assignment")
    _common(p)
    p.add_argument("--assignment", type=Path, required=True)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint on the test split")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("gen-data", help="write the synthetic dataset cache")
    _common(p)
    p.add_argument("--out", type=Path, help="cache path (default: <out-dir>/data.mqds)")

    p = sub.add_parser("export-trace", help="convert a run trace to JSON lines or CSV")
    _common(p)
    p.add_argument("--trace", type=Path, help="trace CSV (default: <out-dir>/trace.csv)")
    p.add_argument("--format", choices=["jsonl", "csv"], default="jsonl")
    p.add_argument("--out", type=Path, help="output file (default: stdout)")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config.schedule.seed = args.seed
    if args.target_mb is not None:
        config.objective.target_bits, config.objective.target_fraction = args.target_mb * BITS_PER_MB, None
    if args.target_bits is not None:
        config.objective.target_bits, config.objective.target_fraction = args.target_bits, None
    if args.lam is not None:
        config.objective.penalty_weight = args.lam
    if args.epsilon is not None:
        config.objective.epsilon = args.epsilon
    if args.groups is not None:
        config.model.groups = args.groups
    if args.bits is not None:
        config.candidate_bits = args.bits
    if args.mode is not None:
        config.optim.mode = args.mode.replace("-", "_")
    return config.validate()


def cmd_search(args, config: RunConfig) -> int:
    art = run_search(config, args.out_dir)
    r = art.report
    print(f"size {r['size_bits']} bits ({r['size_mb']:.6f} MB), target {r['target_bits']:.0f} bits "
          f"[{r['band']}], test accuracy {r['test_accuracy']:.4f}, pruned groups {r['pruned_groups']}")
    print(f"artifacts in {args.out_dir}")
    return 0


def cmd_retrain(args, config: RunConfig) -> int:
    if not args.assignment.is_file():
        raise ConfigError(f"assignment file not found: {args.assignment}")
    assignment = import_assignment(args.assignment.read_text())
    data = load_data(config)
    result = retrain(assignment, config, data)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    report = {"seed": config.schedule.seed, "size_bits": result.size_bits, "size_mb": mb(result.size_bits),
              "test_accuracy": result.test_accuracy}
    write_json(args.out_dir / "retrain_report.json", report)
    arrays = {name: t.data for name, t in result.model.named_parameters().items()}
    meta = dict(config=config.to_dict(), model=result.model.spec,
                assignment=[[l, g, b] for (l, g), b in sorted(assignment.items())], init="retrain")
    save_checkpoint(args.out_dir / "final.mqck", arrays, meta)
    print(json.dumps(report))
    return 0


def cmd_eval(args, _config: RunConfig) -> int:
    if not args.checkpoint.is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    arrays, meta = load_checkpoint(args.checkpoint)
    config = config_from_dict(meta["config"])
    model = build_from_spec(meta["model"], 0)
    model.load_arrays({k: v for k, v in arrays.items() if k in model.named_parameters()})
    data = load_data(config)
    if "assignment" in meta:
        assignment = {(l, g): b for l, g, b in meta["assignment"]}
        cache = QuantCache(0)
        cache.refresh([l.weight.data for l in model.layers], [l.groups for l in model.layers])
        fn = fixed_weight_fn(model, assignment, cache)
    else:
        fn = full_precision
    acc = accuracy(model, *data.test, weight_fn=fn)
    print(json.dumps({"checkpoint": str(args.checkpoint), "test_accuracy": acc}))
    return 0


def cmd_gen_data(args, config: RunConfig) -> int:
    d = config.data
    out = args.out or args.out_dir / "data.mqds"
    out.parent.mkdir(parents=True, exist_ok=True)
    data = load_or_generate(None, d.n, d.input_dim, d.classes, d.difficulty,
                            _derive_int(config.schedule.seed, "data"))
    save_dataset(out, data)
    print(f"wrote {out}: {len(data.train[1])}/{len(data.val[1])}/{len(data.test[1])} train/val/test")
    return 0


def cmd_export_trace(args, _config: RunConfig) -> int:
    src = args.trace or args.out_dir / "trace.csv"
    if not src.is_file():
        raise ConfigError(f"trace not found: {src}")
    if args.format == "csv":
        text = src.read_text()
    else:
        text = trace_to_jsonl(read_trace(src))
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {
    "search": cmd_search,
    "retrain": cmd_retrain,
    "eval": cmd_eval,
    "gen-data": cmd_gen_data,
    "export-trace": cmd_export_trace,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"mpqsearch: error: {exc}", file=sys.stderr)
        return 2
    except BrokenPipeError:  # e.g. `mpqsearch export-trace | head`
        sys.stdout = open(os.devnull, "w")
        return 0
    except Exception as exc:  # noqa: BLE001 - top-level exit status mapping
        log.debug("run failed", exc_info=True)
        print(f"mpqsearch: run failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
