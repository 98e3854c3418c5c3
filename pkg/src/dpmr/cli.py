"""Command-line entry point: ``dpmr {train,classify,evaluate,gen-data,oracle-train}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. ``DPMR_WORKDIR``
sets the root for intermediate spill files.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from dpmr.datagen import CorpusSpec, generate_corpus, write_corpus
from dpmr.engine import EngineConfig, OutputExistsError, prepare_output
from dpmr.lr import Hyperparams
from dpmr.oracle import load_samples, oracle_train
from dpmr.pipeline import PipelineConfig, classify, evaluate, train
from dpmr.records import ParameterRecord, serialize
from dpmr.sharding import STRATEGIES, ShardPolicy

logger = logging.getLogger("dpmr")


class UsageError(Exception):
    pass


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _positive_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _shard_max(text):
    if text.lower() in ("inf", "none", "0"):
        return None
    return _positive_int(text)


def _add_engine_flags(p, default_workers):
    p.add_argument("--workers", type=_positive_int, default=default_workers, help="concurrent tasks (default: CPUs)")
    p.add_argument("--reducers", type=_positive_int, default=None, help="reduce tasks per job (default: workers)")
    p.add_argument("--split-size", type=_positive_int, default=64 * 1024 * 1024, help="input split size in bytes")
    p.add_argument("--shard-max-units", type=_shard_max, default=10_000, help="doc units per shard; 'inf' disables")
    p.add_argument("--shard-strategy", choices=STRATEGIES, default="round-robin")
    p.add_argument("--binary-features", action="store_true", help="use x=1 instead of token counts")
    p.add_argument("--keep-intermediates", action="store_true")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output")


def build_parser() -> argparse.ArgumentParser:
    cpus = os.cpu_count() or 1
    parser = argparse.ArgumentParser(prog="dpmr", description="Logistic regression as a chain of map-reduce jobs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="output root; parameters land in OUTPUT/paraValue")
    p.add_argument("--alpha", type=_positive_float, default=0.1)
    p.add_argument("--iterations", type=_non_negative_int, default=5)
    p.add_argument("--tol", type=float, default=1e-4, help="stop when |dJ|/J < tol (0 disables)")
    p.add_argument("--no-objective", action="store_true", help="skip the objective job each iteration")
    p.add_argument("--mapper-side-sharding", action="store_true", help="shard in the mapper from precomputed frequencies")
    _add_engine_flags(p, cpus)

    p = sub.add_parser("classify", help="predict labels for a test corpus")
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True, help="paraValue directory (or a training output root)")
    p.add_argument("--output", required=True)
    p.add_argument("--with-probability", action="store_true", help="append p(y=1) as a fourth column")
    _add_engine_flags(p, cpus)

    p = sub.add_parser("evaluate", help="precision/recall/F of a prediction output")
    p.add_argument("--predictions", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic Zipf corpus")
    p.add_argument("--samples", type=_positive_int, required=True)
    p.add_argument("--features", type=_positive_int, required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--zipf-exponent", type=float, default=1.0)
    p.add_argument("--tokens-per-sample", type=float, default=10.0)
    p.add_argument("--separable", action="store_true")
    p.add_argument("--margin", type=float, default=1.0, help="min |planted score| when --separable")
    p.add_argument("--tilt", type=float, default=2.0, help="log class preference of each feature")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-samples", type=_non_negative_int, default=0)
    p.add_argument("--test-output", default=None)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("oracle-train", help="train with the in-memory reference implementation")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="parameter file of f<TAB>p <value> lines")
    p.add_argument("--alpha", type=_positive_float, default=0.1)
    p.add_argument("--iterations", type=_non_negative_int, default=5)
    p.add_argument("--binary-features", action="store_true")
    p.add_argument("--force", action="store_true")
    return parser


def _pipeline_config(args, **hyper) -> PipelineConfig:
    reducers = args.reducers or args.workers
    engine = EngineConfig(
        workers=args.workers,
        split_size_bytes=args.split_size,
        work_dir=os.environ.get("DPMR_WORKDIR") or None,
        keep_intermediates=args.keep_intermediates,
    )
    return PipelineConfig(
        hyper=Hyperparams(binary_features=args.binary_features, **hyper),
        shard=ShardPolicy(args.shard_max_units, args.shard_strategy, reducers),
        engine=engine,
        num_reducers=reducers,
        sharding_enabled=args.shard_max_units is not None,
        compute_objective=not getattr(args, "no_objective", False),
        mapper_side_sharding=getattr(args, "mapper_side_sharding", False),
    )


def _check_input(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"input not found: {path}")


def cmd_train(args) -> int:
    _check_input(args.input)
    if args.tol < 0:
        raise UsageError("--tol must be >= 0")
    config = _pipeline_config(args, alpha=args.alpha, max_iter=args.iterations, tol=args.tol)
    reports = train(args.input, args.output, config, force=args.force)
    for r in reports:
        obj = "-" if r.objective is None else f"{r.objective:.6f}"
        total = sum(s.wall_time for s in r.job_stats.values())
        print(f"iteration {r.iteration}: objective {obj}  params {r.param_count}  {total:.2f}s")
    print(f"parameters written to {Path(args.output) / 'paraValue'}")
    return 0


def cmd_classify(args) -> int:
    _check_input(args.input)
    model = Path(args.model)
    if (model / "paraValue").is_dir():
        model = model / "paraValue"
    if not model.exists():
        raise FileNotFoundError(f"model not found: {args.model}")
    config = _pipeline_config(args)
    report = classify(args.input, model, args.output, config, with_probability=args.with_probability, force=args.force)
    print(f"{report.num_predictions} predictions written to {args.output}")
    return 0


def cmd_evaluate(args) -> int:
    _check_input(args.predictions)
    result = evaluate(args.predictions)
    print(result.to_text())
    print(result.to_json())
    return 0


def cmd_gen_data(args) -> int:
    if args.test_samples and not args.test_output:
        raise UsageError("--test-samples requires --test-output")
    if args.tokens_per_sample < 1 or args.zipf_exponent < 0 or args.tilt < 0:
        raise UsageError("--tokens-per-sample must be >= 1, --zipf-exponent and --tilt >= 0")
    outputs = [Path(args.output)] + ([Path(args.test_output)] if args.test_output else [])
    for out in outputs:
        prepare_output(out, force=args.force)
    spec = CorpusSpec(
        n_features=args.features,
        zipf_exponent=args.zipf_exponent,
        tokens_per_sample=args.tokens_per_sample,
        separable=args.separable,
        margin=args.margin,
        tilt=args.tilt,
        seed=args.seed,
    )
    train_lines, test_lines = generate_corpus(args.samples, spec, args.test_samples if args.test_output else 0)
    write_corpus(args.output, train_lines)
    if args.test_output:
        write_corpus(args.test_output, test_lines)
    print(f"wrote {len(train_lines)} samples to {args.output}")
    return 0


def cmd_oracle_train(args) -> int:
    _check_input(args.input)
    out = Path(args.output)
    prepare_output(out, force=args.force)
    params = oracle_train(
        load_samples(args.input),
        Hyperparams(alpha=args.alpha, max_iter=args.iterations, binary_features=args.binary_features),
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for f in sorted(params):
            fh.write(serialize(ParameterRecord(f, params[f])) + "\n")
    print(f"wrote {len(params)} parameters to {out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "classify": cmd_classify,
    "evaluate": cmd_evaluate,
    "gen-data": cmd_gen_data,
    "oracle-train": cmd_oracle_train,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        try:
            parser.error(str(exc))
        except SystemExit as stop:
            return int(stop.code)
    except OutputExistsError as exc:
        print(f"dpmr: {exc} (use --force to overwrite)", file=sys.stderr)
        return 1
    except Exception as exc:
        if args.verbose:
            logger.exception("command failed")
        print(f"dpmr: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
