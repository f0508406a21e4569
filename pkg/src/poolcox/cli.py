"""Command line entry point: ``poolcox {sweep,single,summarize,generate}``.

Exit codes: 0 success, 1 usage error (bad flags or input files), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time

from . import harness
from .metrics import MODELS
from .simgen import Scenario, ScenarioError, write_batch

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _models(text: str) -> tuple[str, ...]:
    models = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in models if m not in MODELS and m != "cph-U"]
    if bad or not models:
        raise argparse.ArgumentTypeError(f"unknown model(s) {bad}; choose from {','.join(MODELS)}")
    return models


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="poolcox", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sweep = sub.add_parser("sweep", help="run a scenario sweep and write panel tables")
    sweep.add_argument("--scenario", required=True, help="sweep file (or plain scenario) JSON")
    sweep.add_argument("--out", required=True, help="output directory")
    sweep.add_argument("--seed", type=int, help="override the master seed")
    sweep.add_argument("--workers", type=int, default=1)
    sweep.add_argument("--models", type=_models, help="comma separated subset of models")

    single = sub.add_parser("single", help="fit one model on one dataset, print JSON")
    single.add_argument("--scenario", required=True)
    single.add_argument("--index", type=int, required=True, help="dataset index")
    single.add_argument("--model", required=True, choices=list(MODELS) + ["cph-U"])
    single.add_argument("--seed", type=int)
    single.add_argument("--generator", default="simgen", choices=sorted(harness.GENERATORS))

    summ = sub.add_parser("summarize", help="recompute summaries from stored fit JSONs")
    summ.add_argument("--out", required=True)

    gen = sub.add_parser("generate", help="write a batch of simulated datasets as CSV")
    gen.add_argument("--scenario", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "sweep":
            spec = harness.SweepSpec.from_json(args.scenario)
            changes = {}
            if args.seed is not None:
                changes["base"] = spec.base.replace(master_seed=args.seed)
            if args.models:
                changes["models"] = args.models
            if changes:
                spec = harness.SweepSpec(**{**spec.__dict__, **changes})
            start = time.perf_counter()
            summaries = harness.run_sweep(spec, args.out, workers=max(1, args.workers))
            logging.info("sweep finished in %.1fs", time.perf_counter() - start)
            print(f"wrote {len(summaries)} scenario summaries to {args.out}")
        elif args.command == "single":
            sc = Scenario.from_json(args.scenario)
            if args.seed is not None:
                sc = sc.replace(master_seed=args.seed)
            if not 0 <= args.index < sc.n_datasets:
                raise harness.UsageError(f"index: must lie in [0, {sc.n_datasets})")
            print(harness.dumps(harness.run_single(sc, args.index, args.model, args.generator)))
        elif args.command == "summarize":
            summaries = harness.summarize_outputs(args.out)
            print(f"rewrote {len(summaries)} scenario summaries in {args.out}")
        elif args.command == "generate":
            sc = Scenario.from_json(args.scenario)
            if args.seed is not None:
                sc = sc.replace(master_seed=args.seed)
            print(write_batch(sc, args.out))
    except (ScenarioError, harness.UsageError) as exc:
        print(f"poolcox: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"poolcox: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"poolcox: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
