"""Command-line entry point.

Reports go to stdout and diagnostics to stderr. Every run first echoes its
full invocation, defaults included, so it can be reproduced exactly.
"""

from __future__ import annotations

import argparse
import logging
import os
import shlex
import sys
from pathlib import Path

import numpy as np

from . import conviction, evaluation, explain, imputation, persistence, reduction, synthesis
from .data import FeatureKind, infer_schema, parse_table, read_schema_file
from .engine import Model, react
from .errors import DataError, SurprisalKNNError, UsageError
from .metric import DeviationMode, MetricConfig
from .residuals import DEFAULT_MAX_ITERS, DEFAULT_TOL, iterate_residuals

THREADS_ENV = "SURPRISALKNN_THREADS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _pairs(text: str) -> dict:
    """Parse ``name=value,name=value``; values stay strings and are encoded per feature."""
    out = {}
    if not text:
        return out
    for item in text.split(","):
        if "=" not in item:
            raise UsageError(f"expected name=value, got {item!r}")
        name, value = item.split("=", 1)
        name = name.strip()
        if name in out:
            raise UsageError(f"feature {name!r} given twice")
        out[name] = value.strip()
    return out


def _typed(model: Model, context: dict) -> dict:
    """Give numeric context values their numeric type so bundles record them as numbers."""
    out = {}
    for name, value in context.items():
        kind = model.schema[model.dataset.feature_index(name)].kind
        if kind in (FeatureKind.CONTINUOUS, FeatureKind.CYCLIC):
            try:
                value = float(value)
            except ValueError:
                raise DataError(f"feature {name!r}: non-numeric value {value!r}") from None
        out[name] = value
    return out


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def _write_or_print(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


# -- subcommands ------------------------------------------------------------


def cmd_ingest(args) -> int:
    text = _read(args.data)
    schema = read_schema_file(_read(args.schema)) if args.schema else infer_schema(text, args.delimiter)
    ds = parse_table(text, schema, args.delimiter)
    model = Model(ds, k=args.k, metric=MetricConfig(args.p, args.mode), alpha=args.alpha)
    if ds.n >= model.k + 1:
        result = iterate_residuals(model, max_iters=args.max_iters, tol=args.tol)
        model = model.replace(deviations=result.deviations)
        if not result.converged:
            print(f"warning: residuals did not converge in {args.max_iters} iterations", file=sys.stderr)
        sys.stdout.write(result.report.to_text(args.delimiter))
    persistence.save(model, args.output)
    print(f"saved {ds.n} cases x {ds.xi} features to {args.output}", file=sys.stderr)
    return 0


def cmd_analyze(args) -> int:
    model = persistence.load(args.snapshot)
    report = conviction.feature_report(model) if args.per_feature else conviction.case_report(model)
    sys.stdout.write(report.to_text(args.delimiter))
    return 0


def _explain_bundle(model, args):
    return explain.explain_react(
        model, _typed(model, _pairs(args.context)), _names(args.action), args.k,
        local_size=args.local_size, cf_count=args.cf_count, cf_rank=args.cf_rank,
    )


def cmd_react(args) -> int:
    model = persistence.load(args.audit or args.snapshot)
    if args.explain or args.audit:
        sys.stdout.write(_explain_bundle(model, args).to_text())
        return 0
    reaction = react(model, _typed(model, _pairs(args.context)), _names(args.action), args.k)
    for name, value in reaction.values.items():
        print(f"{name}={value}")
    return 0


def cmd_impute(args) -> int:
    model = persistence.load(args.snapshot)
    until = args.until[0]
    kwargs = {}
    if until == "ceiling" and len(args.until) > 1:
        kwargs["ceiling"] = float(args.until[1])
    elif until == "sparsity":
        if len(args.until) < 2:
            raise UsageError("--until sparsity needs a target fraction")
        kwargs["sparsity"] = float(args.until[1])
    elif len(args.until) > 1 and until == "complete":
        raise UsageError("--until complete takes no value")
    result = imputation.impute(
        model, args.batch, until=until, stochastic=args.stochastic, seed=args.seed,
        feature_first=args.feature_first, threads=args.threads, **kwargs,
    )
    persistence.save(result.model, args.output or args.snapshot)
    _write_or_print(result.log.to_text(args.delimiter), args.log)
    print(f"termination: {result.log.termination}; passes: {result.log.passes}; "
          f"cells: {len(result.log.entries)}; skipped cases: {result.log.skipped}", file=sys.stderr)
    return 0


def cmd_reduce(args) -> int:
    model = persistence.load(args.snapshot)
    keep = None
    if args.features:
        key, _, value = args.features.partition("=")
        if key != "keep" or not value:
            raise UsageError("--features expects keep=<count>")
        keep = int(value)
    threshold = None if args.anomaly_threshold <= 0 else args.anomaly_threshold
    model, log, flog = reduction.reduce_model(
        model, anomaly_threshold=threshold, cap=args.cap, floor=args.floor, keep_features=keep, batch=args.batch,
    )
    persistence.save(model, args.output or args.snapshot)
    sys.stdout.write(log.to_text(args.delimiter))
    if flog is not None:
        sys.stdout.write("\n" + flog.to_text(args.delimiter))
    print(f"kept {model.n} cases x {model.xi} features", file=sys.stderr)
    return 0


def cmd_synth(args) -> int:
    model = persistence.load(args.snapshot)
    out = synthesis.synthesize(
        model, conditions=_typed(model, _pairs(args.condition)), conviction=args.conviction, count=args.count,
        seed=args.seed, order=args.order,
    )
    sys.stdout.write(out.to_text(args.delimiter, metadata=True))
    return 0


def cmd_compare(args) -> int:
    a, b = persistence.load(args.snapshot_a), persistence.load(args.snapshot_b)
    ab = conviction.model_surprisal(a, b.dataset)
    ba = conviction.model_surprisal(b, a.dataset)
    print(f"surprisal_of_b_given_a{args.delimiter}{ab!r}")
    print(f"surprisal_of_a_given_b{args.delimiter}{ba!r}")
    return 0


def cmd_eval(args) -> int:
    benches = []
    if args.suite:
        suite = Path(args.suite)
        if not suite.is_dir():
            raise DataError(f"suite directory {args.suite} not found")
        files = sorted(str(p) for p in suite.iterdir() if p.suffix in (".csv", ".tsv", ".txt"))
        benches += evaluation.load_benchmarks(files, args.target, args.delimiter)
    if args.builtin in ("regression", "all"):
        benches += evaluation.regression_suite(seed=args.seed)
    if args.builtin in ("classification", "all"):
        benches += evaluation.classification_suite(seed=args.seed)
    if not benches:
        raise UsageError("no benchmarks selected")
    result = evaluation.evaluate(
        benches, _names(args.configs), folds=args.folds, k=args.k_eval, seed=args.seed, threads=args.threads,
    )
    sys.stdout.write(result.to_text(args.delimiter))
    sys.stdout.write("\n" + result.summary())
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="surprisalknn", description="Targetless kNN with surprisal and conviction.")
    parser.add_argument("--seed", type=int, default=None, help="seed for every random draw (drawn and printed if unset)")
    parser.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or core count)")
    parser.add_argument("--delimiter", default=",", help="field delimiter for tables and reports")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="parse data, fit residuals and save a snapshot")
    p.add_argument("data")
    p.add_argument("--schema", default=None)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--p", type=float, default=0.0)
    p.add_argument("--mode", choices=[m.value for m in DeviationMode], default=DeviationMode.LK_NORMAL.value)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--max-iters", type=int, default=DEFAULT_MAX_ITERS)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("analyze", help="conviction report per case or per feature")
    p.add_argument("snapshot")
    p.add_argument("--per-feature", action="store_true", help="feature report instead of the per-case report")
    p.set_defaults(func=cmd_analyze)

    for name, helptext in (("react", "predict action features"), ("explain", "explanation bundle for a decision")):
        p = sub.add_parser(name, help=helptext)
        if name == "react":
            p.add_argument("snapshot")
            p.add_argument("--explain", action="store_true")
            p.add_argument("--audit", default=None, help="regenerate from this snapshot instead")
        else:
            p.add_argument("--audit", required=True, help="snapshot to regenerate the bundle from")
            p.set_defaults(snapshot=None, explain=True)
        p.add_argument("--context", required=True, help="name=value,...")
        p.add_argument("--action", required=True, help="name,...")
        p.add_argument("--k", type=int, default=None)
        p.add_argument("--local-size", type=int, default=None)
        p.add_argument("--cf-count", type=int, default=3)
        p.add_argument("--cf-rank", choices=explain.CF_RANKS, default="ratio")
        p.set_defaults(func=cmd_react)

    p = sub.add_parser("impute", help="fill missing values, least surprising first")
    p.add_argument("snapshot")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--until", nargs="+", default=["complete"], metavar="COND",
                   help="complete | ceiling [s] | sparsity f")
    p.add_argument("--stochastic", action="store_true")
    p.add_argument("--feature-first", action="store_true")
    p.add_argument("-o", "--output", default=None)
    p.add_argument("--log", default=None, help="write the imputation log here instead of stdout")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("reduce", help="remove anomalies, prune cases and features")
    p.add_argument("snapshot")
    p.add_argument("--anomaly-threshold", type=float, default=reduction.DEFAULT_ANOMALY_THRESHOLD,
                   help="0 disables anomaly removal")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--cap", type=int, default=None)
    g.add_argument("--floor", type=float, default=None)
    p.add_argument("--features", default=None, help="keep=<count>")
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("synth", help="generate synthetic cases")
    p.add_argument("snapshot")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--conviction", type=float, default=1.0)
    p.add_argument("--condition", default="", help="name=value,...")
    p.add_argument("--order", choices=synthesis.ORDER_POLICIES, default="random")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("compare", help="surprisal of each model's cases under the other")
    p.add_argument("snapshot_a")
    p.add_argument("snapshot_b")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("eval", help="benchmark distance configurations")
    p.add_argument("--suite", default=None, help="directory of delimited benchmark files")
    p.add_argument("--target", default=None, help="target column (default: last column)")
    p.add_argument("--builtin", choices=["regression", "classification", "all", "none"], default=None)
    p.add_argument("--configs", default="classic,fractional,lk0")
    p.add_argument("--folds", type=int, default=evaluation.DEFAULT_FOLDS)
    p.add_argument("--k-eval", type=int, default=evaluation.DEFAULT_EVAL_K)
    p.set_defaults(func=cmd_eval)
    return parser


def _invocation(parser: argparse.ArgumentParser, args) -> str:
    """The command line that reproduces this run, with every default spelled out."""
    words = ["surprisalknn"]

    def render(p, skip=()):
        out_pos, out_opt = [], []
        for action in p._actions:
            if isinstance(action, (argparse._HelpAction, argparse._SubParsersAction)) or action.dest in skip:
                continue
            value = getattr(args, action.dest, None)
            if not action.option_strings:
                out_pos.append(shlex.quote(str(value)))
            elif isinstance(action, argparse._StoreTrueAction):
                if value:
                    out_opt.append(action.option_strings[-1])
            elif value is not None:
                vals = value if isinstance(value, list) else [value]
                out_opt.append(" ".join([action.option_strings[-1], *(shlex.quote(str(v)) for v in vals)]))
        return out_pos, out_opt

    _, top = render(parser)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[args.command]
    pos, opt = render(sub)
    return " ".join(words + top + [args.command] + pos + opt)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads is None:
            args.threads = _default_threads()
        if args.threads < 1:
            raise UsageError("--threads must be positive")
        if args.seed is None:
            args.seed = int(np.random.SeedSequence().entropy % (2**32))
            print(f"seed: {args.seed}", file=sys.stderr)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s: %(message)s")
        if args.command == "eval" and args.builtin is None:
            args.builtin = "none" if args.suite else "regression"
        print(_invocation(parser, args), file=sys.stderr)
        return args.func(args)
    except SurprisalKNNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
