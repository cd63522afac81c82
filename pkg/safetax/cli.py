"""
Command-line front end: analyze, merge, inspect, score, toytrain.
"""

import argparse
import json
import logging
import os
import sys

from pathlib import Path
from typing import Any

from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from . import analysis, checkpoint, container, helpdoc, merge, penalty, scoring, toy
from .errors import ConfigError, InputError, SafetaxError

logger = logging.getLogger(__name__)

THREADS_ENV = "SAFETAX_THREADS"

EXIT_OK = 0
EXIT_INPUT = 2

err_console = Console(stderr=True)
out_console = Console()


class StagedOutputs:
    """
    Collects output files as hidden temp files and renames them all into place
    when the block exits cleanly. On error the temp files are removed, so a
    failed command leaves no partial output.
    """

    def __init__(self):
        self._staged: list[tuple[Path, Path]] = []

    def write(self, path: str | os.PathLike, data: bytes) -> None:
        path = Path(path)
        tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
        self._staged.append((tmp, path))
        tmp.write_bytes(data)

    def __enter__(self) -> "StagedOutputs":
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        try:
            if exc_type is None:
                for tmp, path in self._staged:
                    os.replace(tmp, path)
                    logger.info(f"wrote {path}")
        finally:
            for tmp, _ in self._staged:
                tmp.unlink(missing_ok=True)
        return False


def setup_logging(verbosity: int) -> None:
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(verbosity, 2)]
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


def default_threads() -> int:
    value = os.environ.get(THREADS_ENV)
    if value is None:
        return os.cpu_count() or 1
    try:
        threads = int(value)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {value!r}") from None
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {value!r}")
    return threads


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def validate_args(args: argparse.Namespace) -> None:
    "range checks on numeric flags, run before any file is touched"
    if getattr(args, "threads", None) is None and hasattr(args, "threads"):
        args.threads = default_threads()
    if hasattr(args, "threads"):
        _require(args.threads >= 1, f"--threads must be >= 1, got {args.threads}")
    if hasattr(args, "top_t"):
        _require(args.top_t >= 1, f"--top-t must be >= 1, got {args.top_t}")

    match args.command:
        case "merge":
            _require(args.k >= 0, f"--k must be >= 0, got {args.k}")
            if args.lam is not None:
                _require(args.lam > 0, f"--lambda must be positive, got {args.lam}")
            if args.lambda_sweep:
                args.mode = args.mode or "ortho_both"
                _require(
                    args.mode == "ortho_both",
                    f"--lambda-sweep needs --mode ortho_both, got {args.mode}",
                )
            args.mode = args.mode or "vanilla"
        case "score":
            if args.metric == "pass_at_k":
                _require(args.k is not None, "--metric pass_at_k needs --k")
            if args.k is not None:
                _require(args.k >= 1, f"--k must be >= 1, got {args.k}")
            if args.n is not None:
                _require(args.n >= 1, f"--n must be >= 1, got {args.n}")
        case "toytrain":
            if args.rank is not None:
                _require(args.rank >= 1, f"--rank must be >= 1, got {args.rank}")
            if args.alpha is not None:
                _require(args.alpha > 0, f"--alpha must be positive, got {args.alpha}")
            if args.beta is not None:
                _require(args.beta > 0, f"--beta must be positive, got {args.beta}")
            if args.epochs is not None:
                _require(args.epochs >= 0, f"--epochs must be >= 0, got {args.epochs}")
            for r in args.ranks:
                _require(r >= 1, f"--ranks entries must be >= 1, got {r}")


def load_deltas(
    args: argparse.Namespace, base: container.TensorMap
) -> dict[str, checkpoint.DeltaSource]:
    if args.adapter is not None:
        return checkpoint.deltas_from_adapters(checkpoint.load_adapters(args.adapter))
    tuned = container.load_tensor_map(args.tuned)
    return checkpoint.diff_checkpoints(base, tuned).deltas


def _json_bytes(doc: Any) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n").encode("utf-8")


def cmd_analyze(args: argparse.Namespace) -> int:
    base = container.load_tensor_map(args.base)
    deltas = load_deltas(args, base)
    reports = analysis.analyze_checkpoint(base, deltas, args.top_t, args.threads)
    json_report = analysis.emit_report(reports, "json", args.top_t)

    with StagedOutputs() as out:
        if args.csv:
            out.write(args.csv, analysis.emit_report(reports, "csv", args.top_t))
        if args.json:
            out.write(args.json, json_report)
    if not args.csv and not args.json:
        sys.stdout.write(json_report.decode("utf-8"))
    return EXIT_OK


def sweep_path(out: Path, lam: float) -> Path:
    "merged.safetensors -> merged.lambda1.15.safetensors"
    return out.with_name(f"{out.stem}.lambda{lam:g}{out.suffix}")


def manifest_path(out: Path) -> Path:
    return out.with_name(f"{out.stem}.manifest.json")


def cmd_merge(args: argparse.Namespace) -> int:
    cfg = merge.check_merge_config(
        merge.MergeConfig(
            mode=args.mode,
            k=args.k,
            lam=args.lam if args.lam is not None else merge.DEFAULT_LAMBDA,
            passthrough_missing=not args.drop_untargeted,
        )
    )
    precision = None if args.precision == "source" else args.precision
    base = container.load_tensor_map(args.base)
    deltas = load_deltas(args, base)
    out = Path(args.out)

    if args.lambda_sweep:
        runs = [
            (sweep_path(out, lam), manifest_path(sweep_path(out, lam)), result)
            for lam, result in merge.sweep_lambda(base, deltas, cfg, merge.LAMBDA_SWEEP, args.threads)
        ]
    else:
        result = merge.merge_checkpoint(base, deltas, cfg, threads=args.threads)
        runs = [(out, Path(args.manifest) if args.manifest else manifest_path(out), result)]

    with StagedOutputs() as staged:
        for path, manifest, result in runs:
            staged.write(path, container.dump_tensor_map(result.tensors, precision))
            staged.write(manifest, _json_bytes({**result.manifest, "output": path.name}))
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    tmap = container.load_tensor_map(args.path)
    rows = [
        {
            "name": name,
            "shape": [values.shape[1]] if name in tmap.flat else list(values.shape),
            "dtype": tmap.dtypes[name],
        }
        for name, values in tmap.items()
    ]
    if args.json:
        sys.stdout.write(_json_bytes({"metadata": tmap.metadata, "tensors": rows}).decode("utf-8"))
        return EXIT_OK

    table = Table(title=f"{args.path} ({len(rows)} tensors)")
    table.add_column("Name")
    table.add_column("Shape", justify="right")
    table.add_column("Dtype")
    for row in rows:
        table.add_row(row["name"], " x ".join(str(d) for d in row["shape"]), row["dtype"])
    out_console.print(table)
    return EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    log = scoring.load_eval_log(args.log)
    if args.n is not None:
        scoring.check_sample_count(log, args.n)
    match args.metric:
        case "pass_at_1":
            value = scoring.pass_at_1(log)
        case "pass_at_k":
            value = scoring.pass_at_k(log, args.k)
        case "safety":
            value = scoring.safety_score(log, args.polarity)
    print(f"{value:.6f}")
    return EXIT_OK


def scenario_with_overrides(args: argparse.Namespace) -> toy.ToyScenario:
    scenario = toy.load_scenario(args.scenario) if args.scenario else toy.ToyScenario()
    run = scenario.run
    overrides: dict[str, Any] = {
        "mode": args.mode,
        "seed": args.seed,
        "epochs": args.epochs,
        "r": args.rank,
        "alpha": args.alpha,
    }
    run = run._replace(**{k: v for k, v in overrides.items() if v is not None})
    if args.penalty == "none":
        run = run._replace(penalty=None)
    elif args.penalty is not None:
        run = run._replace(penalty=(run.penalty or penalty.PenaltyConfig())._replace(variant=args.penalty))
    if args.beta is not None:
        if run.penalty is None:
            raise ConfigError("--beta needs a penalty: pass --penalty col or --penalty both")
        run = run._replace(penalty=run.penalty._replace(beta=args.beta))
    if args.track_retention:
        run = run._replace(track_retention=True)
    return toy.check_scenario(scenario._replace(run=run), lora=True if args.compare else None)


def cmd_toytrain(args: argparse.Namespace) -> int:
    scenario = scenario_with_overrides(args)
    if args.compare:
        comparison = toy.compare_arms(scenario, tuple(args.ranks), args.threads, args.top_t)
        data = toy.report_json(comparison.to_dict())
    else:
        data = toy.report_json(toy.run_scenario(scenario, args.top_t).report)

    if args.out:
        with StagedOutputs() as out:
            out.write(args.out, data)
    else:
        sys.stdout.write(data.decode("utf-8"))
    return EXIT_OK


def _add_update_source(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument(
        "--adapter",
        metavar="PATH",
        help="LoRA adapter: safetensors file or directory with adapter_config.json beside it",
    )
    source.add_argument("--tuned", metavar="PATH", help="full fine-tuned checkpoint to diff against --base")


def _add_threads(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help=f"worker threads (default: ${THREADS_ENV} or the number of CPU cores)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safetax",
        description=helpdoc.MAIN,
        epilog=helpdoc.MAIN_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    raw = argparse.RawDescriptionHelpFormatter

    p = commands.add_parser(
        "analyze", help="stable rank and alignment metrics per layer",
        description=helpdoc.ANALYZE, epilog=helpdoc.ANALYZE_EPILOG, formatter_class=raw,
    )
    p.add_argument("--base", required=True, metavar="PATH", help="base checkpoint (safetensors)")
    _add_update_source(p)
    p.add_argument(
        "--top-t", type=int, default=analysis.DEFAULT_TOP_T,
        help="singular vectors used for m2/m4 (default: %(default)s)",
    )
    p.add_argument("--csv", metavar="PATH", help="write the per-layer CSV report here")
    p.add_argument("--json", metavar="PATH", help="write the JSON report here")
    _add_threads(p)
    p.set_defaults(func=cmd_analyze)

    p = commands.add_parser(
        "merge", help="merge updates into base weights",
        description=helpdoc.MERGE, epilog=helpdoc.MERGE_EPILOG, formatter_class=raw,
    )
    p.add_argument("--base", required=True, metavar="PATH", help="base checkpoint (safetensors)")
    _add_update_source(p)
    p.add_argument("--mode", choices=merge.MERGE_MODES, default=None, help="merge scheme (default: vanilla)")
    p.add_argument(
        "--k", type=int, default=merge.DEFAULT_K,
        help="rank of the base subspace projected out (default: %(default)s)",
    )
    lam = p.add_mutually_exclusive_group()
    lam.add_argument(
        "--lambda", dest="lam", type=float, default=None,
        help=f"ortho_both rescaling (default: {merge.DEFAULT_LAMBDA})",
    )
    lam.add_argument(
        "--lambda-sweep", action="store_true",
        help="one output per lambda in {1, 1.15, 1.75, 1.2, 1.25}",
    )
    p.add_argument("--out", required=True, metavar="PATH", help="merged checkpoint to write")
    p.add_argument("--manifest", metavar="PATH", help="manifest path (default: <out stem>.manifest.json)")
    p.add_argument(
        "--precision", choices=["source", *container.PRECISIONS], default="source",
        help="storage dtype of the output (default: each tensor's dtype in --base)",
    )
    p.add_argument(
        "--drop-untargeted", action="store_true",
        help="leave tensors without an update out of the output",
    )
    _add_threads(p)
    p.set_defaults(func=cmd_merge)

    p = commands.add_parser("inspect", help="list tensors in a checkpoint", description=helpdoc.INSPECT)
    p.add_argument("path", metavar="PATH", help="safetensors file")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    p.set_defaults(func=cmd_inspect)

    p = commands.add_parser(
        "score", help="pass@1, pass@k or safety score of an evaluation log",
        description=helpdoc.SCORE, formatter_class=raw,
    )
    p.add_argument("log", metavar="LOG", help="JSONL evaluation log")
    p.add_argument(
        "--metric", choices=["pass_at_1", "pass_at_k", "safety"], default="pass_at_1",
        help="metric to compute (default: %(default)s)",
    )
    p.add_argument("--k", type=int, default=None, help="k for pass_at_k")
    p.add_argument(
        "--n", type=int, default=None,
        help=f"require exactly n samples per question (reference setting: n={scoring.DEFAULT_N_SAMPLES})",
    )
    p.add_argument(
        "--polarity", choices=scoring.POLARITIES, default=scoring.DEFAULT_POLARITY,
        help="safety polarity (default: %(default)s)",
    )
    p.set_defaults(func=cmd_score)

    p = commands.add_parser(
        "toytrain", help="run the desk-scale interference experiment",
        description=helpdoc.TOYTRAIN, epilog=helpdoc.TOYTRAIN_EPILOG, formatter_class=raw,
    )
    p.add_argument("--scenario", metavar="PATH", help="scenario JSON (default: built-in scenario)")
    p.add_argument("--out", metavar="PATH", help="report path (default: standard output)")
    p.add_argument("--mode", choices=toy.TRAIN_MODES, default=None, help="fine-tuning mode (default: lora)")
    p.add_argument("--seed", type=int, default=None, help=f"random seed (default: {toy.DEFAULT_SEED})")
    p.add_argument("--epochs", type=int, default=None, help=f"epochs (default: {toy.DEFAULT_EPOCHS})")
    p.add_argument("--rank", type=int, default=None, help=f"LoRA rank r (default: {checkpoint.DEFAULT_RANK})")
    p.add_argument("--alpha", type=float, default=None, help=f"LoRA alpha (default: {checkpoint.DEFAULT_ALPHA:g})")
    p.add_argument(
        "--penalty", choices=["none", *penalty.PENALTY_VARIANTS], default=None,
        help="orthogonality penalty variant (default: none)",
    )
    p.add_argument("--beta", type=float, default=None, help=f"penalty weight (default: {penalty.DEFAULT_BETA:g})")
    p.add_argument(
        "--top-t", type=int, default=analysis.DEFAULT_TOP_T,
        help="singular vectors used for m2/m4 (default: %(default)s)",
    )
    p.add_argument("--compare", action="store_true", help="run the full, lora and penalized lora arms")
    p.add_argument(
        "--track-retention", action="store_true",
        help="record both task losses after every epoch in the report history",
    )
    p.add_argument(
        "--ranks", type=int, nargs="*", default=[],
        help="extra lora ranks to sweep with --compare (reference sweep: 1 4 8 64)",
    )
    _add_threads(p)
    p.set_defaults(func=cmd_toytrain)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        validate_args(args)
        return args.func(args)
    except SafetaxError as ex:
        logger.debug("command failed", exc_info=True)
        err_console.print(f"error: {ex}", markup=False, highlight=False, soft_wrap=True)
        return ex.exit_code
    except OSError as ex:
        err_console.print(f"error: {ex}", markup=False, highlight=False, soft_wrap=True)
        return InputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
