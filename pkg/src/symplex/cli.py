"""Command line entry point: ``symplex solve|eval-expr|report|sample``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from .expr import (
    PARAM_SYMBOL,
    TIME_SYMBOL,
    ExpressionError,
    MalformedSequenceError,
    evaluate,
    parse_expression,
    to_infix,
    to_prefix_string,
)
from .pde import (
    CatalogError,
    PdeProblem,
    ProblemFormatError,
    catalog,
    load_problem,
    load_problem_file,
    pointwise_residual,
)
from .policy import PolicyConfig, SymFormer, save_params, load_params
from .trainer import EpochRecord, Trainer, TrainerConfig, build_vocabulary

log = logging.getLogger("symplex")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _problem(args) -> PdeProblem:
    if getattr(args, "problem_file", None):
        try:
            return load_problem_file(args.problem_file)
        except (OSError, ProblemFormatError, ValueError) as exc:
            raise UsageError(f"cannot load problem file {args.problem_file}: {exc}") from exc
    if not args.problem:
        raise UsageError("one of --problem or --problem-file is required")
    try:
        return load_problem(args.problem)
    except CatalogError as exc:
        listing = "\n".join(f"  {p.name:24s} {p.description}" for p in catalog())
        raise UsageError(f"unknown problem {args.problem!r}; available problems:\n{listing}") from exc


def _operators(text: str | None):
    return tuple(text.split(",")) if text else None


def _trainer_config(args) -> TrainerConfig:
    try:
        return TrainerConfig(seed=args.seed, epochs_cap=args.epochs_cap, workers=args.workers,
                             force_stage=args.stage, batch_size=args.batch_size,
                             operators=_operators(args.operators))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _policy_config(args) -> PolicyConfig:
    try:
        return PolicyConfig(d_max=args.d_max)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# solve


def cmd_solve(args) -> int:
    problem = _problem(args)
    config = _trainer_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    with open(out / "history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EpochRecord.FIELDS)

        def on_epoch(rec: EpochRecord):
            writer.writerow(rec.row())
            fh.flush()

        trainer = Trainer(problem, config, _policy_config(args), on_epoch=on_epoch)
        try:
            result = trainer.run_curriculum()
        except KeyboardInterrupt:
            log.error("interrupted; partial history kept in %s", out / "history.csv")
            return EXIT_RUNTIME
    doc = result.to_dict()
    doc["config"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(config).items()}
    doc["d_max"] = args.d_max
    _dump(out / "result.json", doc)
    _dump(out / "memory.json", {"entries": trainer.memory.to_list()})
    save_params(out / "checkpoint.json", trainer.policy.params)
    _dump(out / "timing.json", {"wall_clock_seconds": time.perf_counter() - start,
                                "epochs": len(result.history)})
    best = result.best
    print(f"problem  {problem.name}")
    print(f"best     {to_prefix_string(best.tree) if best else '-'}")
    print(f"infix    {to_infix(best.tree, 6) if best else '-'}")
    print(f"reward   {result.reward:.6g}")
    if result.mse is not None:
        print(f"mse      {result.mse:.3g}")
        print(f"srr      {result.srr}")
    print(f"epochs   {len(result.history)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval-expr


def _parse_points(problem: PdeProblem, args) -> dict[str, np.ndarray]:
    if args.at:
        rows = []
        for spec in args.at:
            try:
                pairs = dict(kv.split("=") for kv in spec.split(","))
                rows.append({k.strip(): float(v) for k, v in pairs.items()})
            except ValueError as exc:
                raise UsageError(f"bad point {spec!r}; expected e.g. x=0.1,y=0.2") from exc
        names = sorted(set().union(*rows))
        pts = {k: np.array([r.get(k, np.nan) for r in rows]) for k in names}
    else:
        rng = np.random.default_rng(args.seed)
        n = args.points
        pts = {v: rng.uniform(*problem.domain[v], size=n) for v in problem.spatial_vars}
        if problem.time_dependent:
            pts[TIME_SYMBOL] = rng.uniform(0.0, problem.time_horizon, size=n)
        if problem.parametric:
            pts[PARAM_SYMBOL] = rng.uniform(*problem.kappa_range, size=n)
    n = len(next(iter(pts.values())))
    pts.setdefault(TIME_SYMBOL, np.zeros(n))
    pts.setdefault(PARAM_SYMBOL, np.ones(n))
    return pts


def cmd_eval(args) -> int:
    try:
        tree = parse_expression(args.expression)
    except MalformedSequenceError as exc:
        raise UsageError(f"cannot parse expression at token index {exc.index}: {exc}") from exc
    problem = _problem(args)
    pts = _parse_points(problem, args)
    n = len(pts[TIME_SYMBOL])
    try:
        values = np.broadcast_to(evaluate(tree, pts), (n,))
        residual = pointwise_residual(problem, tree, pts)
    except ExpressionError as exc:
        raise UsageError(str(exc)) from exc
    names = list(problem.variables)
    cols = names + ["value", "residual"]
    exact = None
    if problem.solution is not None:
        exact = np.broadcast_to(evaluate(problem.solution, pts), (n,))
        cols.append("error")
    print("\t".join(cols))
    for i in range(n):
        row = [f"{pts[v][i]:.6g}" for v in names] + [f"{values[i]:.6e}", f"{residual[i]:.6e}"]
        if exact is not None:
            row.append(f"{values[i] - exact[i]:.6e}")
        print("\t".join(row))
    print(f"# mean squared residual {float(np.mean(residual ** 2)):.6e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def collect_results(dirs) -> dict[str, list[dict]]:
    by_problem: dict[str, list[dict]] = {}
    for d in dirs:
        path = Path(d) / "result.json"
        try:
            doc = json.loads(path.read_text())
            name = doc["problem"]
            srr = bool(doc["srr"])
            m = doc["mse"]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        by_problem.setdefault(name, []).append({"srr": srr, "mse": m})
    return by_problem


def format_report(by_problem: dict[str, list[dict]]) -> str:
    lines = [f"{'problem':24s} {'runs':>5s} {'MSE':>10s} {'SRR':>6s}"]
    for name in sorted(by_problem):
        runs = by_problem[name]
        mses = [r["mse"] for r in runs if r["mse"] is not None and math.isfinite(r["mse"])]
        mean_mse = f"{np.mean(mses):.2e}" if mses else "-"
        rate = 100.0 * sum(r["srr"] for r in runs) / len(runs)
        lines.append(f"{name:24s} {len(runs):5d} {mean_mse:>10s} {rate:5.0f}%")
    return "\n".join(lines)


def cmd_report(args) -> int:
    print(format_report(collect_results(args.dirs)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample


def cmd_sample(args) -> int:
    problem = _problem(args)
    vocab = build_vocabulary(problem, _operators(args.operators))
    policy = SymFormer(vocab, _policy_config(args), seed=args.seed)
    if args.checkpoint:
        try:
            load_params(args.checkpoint, policy.params)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    stage = args.stage or problem.n_stages
    rng = np.random.default_rng(args.seed)
    for ro in policy.sample_batch(args.n, rng, allowed=vocab.stage_mask(stage)):
        print(f"{ro.log_prob:.4f}\t{ro.depth}\t{' '.join(ro.symbols)}")
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_problem(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--problem", help="catalog problem name")
    g.add_argument("--problem-file", help="path to a problem JSON file")


def _add_model(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-max", type=int, default=7, help="maximum tree depth")
    p.add_argument("--operators", help="comma separated operator symbols, e.g. +,-,*,exp")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), help="run a single curriculum stage")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="symplex", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="train on a problem and write run files")
    _add_problem(p)
    _add_model(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs-cap", type=int, help="cap on epochs per curriculum stage")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("eval-expr", help="evaluate an expression and its residual")
    p.add_argument("expression", help='prefix expression, e.g. "* sin x cos y"')
    _add_problem(p)
    p.add_argument("--points", type=int, default=8, help="number of random points")
    p.add_argument("--at", action="append", help="explicit point, e.g. x=0.1,y=0.2,t=0")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate MSE and SRR over run directories")
    p.add_argument("dirs", nargs="*")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sample", help="print policy rollouts")
    _add_problem(p)
    _add_model(p)
    p.add_argument("-n", type=int, default=16)
    p.add_argument("--checkpoint", help="checkpoint.json from a solve run")
    p.set_defaults(func=cmd_sample)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"symplex: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.exception("run failed: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
