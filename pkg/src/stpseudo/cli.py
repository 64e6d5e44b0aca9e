"""Command line entry point.

    stpseudo --config run.ini [--out DIR] [--threads N] [--seed N] run
    stpseudo --config run.ini ingest|cluster|deg|label|tile
    stpseudo eval GT_DIR PRED_DIR

Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import load_config
from .errors import StageError, ValidationError
from .metrics import evaluate_datasets
from .pipeline import STAGES, Pipeline

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stpseudo", description=__doc__.split("\n")[0])
    p.add_argument("--config", help="pipeline config file")
    p.add_argument("--threads", type=int, default=1, help="worker cap (results do not depend on it)")
    p.add_argument("--seed", type=int, default=None, help="overrides [run] seed")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", help="all stages")
    for stage in STAGES:
        sub.add_parser(stage, help=f"the {stage} stage only")
    ev = sub.add_parser("eval", help="score a predicted dataset dir against a ground-truth one")
    ev.add_argument("gt")
    ev.add_argument("pred")
    return p


def _is_io(exc: BaseException) -> bool:
    while exc is not None:
        if isinstance(exc, OSError):
            return True
        exc = exc.__cause__
    return False


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "eval":
            report = evaluate_datasets(args.gt, args.pred)
            print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
            return EXIT_OK
        if not args.config:
            print("error: --config is required", file=sys.stderr)
            return EXIT_VALIDATION
        cfg = load_config(args.config).with_overrides(seed=args.seed)
        pipe = Pipeline(cfg, args.out, args.threads)
        stages = STAGES if args.command == "run" else (args.command,)
        status = pipe.run(stages)
        for stage, state in status.items():
            print(f"{stage}\t{state}")
        return EXIT_OK
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if _is_io(exc) else EXIT_VALIDATION
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
